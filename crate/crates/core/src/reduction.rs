//! The main experiments: the ε-sweep convergence of Y^ε₀ to Ȳ₀, the value
//! identity against brute-force policy costs, the Fenchel dual layer and the
//! reduced control representation, and the dyadic partition diagnostics.

use nalgebra::DVector;
use serde::Serialize;

use crate::bsde::{solve_full_bsde, solve_reduced_bsde, BsdeSolution, SolveOptions};
use crate::ergodic::{multilinear, Axis, LambdaMap};
use crate::error::{CoreError, Result};
use crate::forward::{simulate_ensemble, GridSpec};
use crate::girsanov::{control_measure, reweighted_mean, terminal_log_weights, GirsanovSpec};
use crate::hamiltonian::Driver;
use crate::model::ModelSpec;
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Inconclusive,
    Fail,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Inconclusive => 2,
            Verdict::Fail => 1,
        }
    }
}

/// Result of the ε-sweep.
#[derive(Debug, Serialize)]
pub struct SweepResult {
    pub epsilons: Vec<f64>,
    /// (estimate, standard error) of Y^ε₀ per ε.
    pub y0_eps: Vec<(f64, f64)>,
    pub y0_bar: (f64, f64),
    /// |Y^ε₀ − Ȳ₀| per ε.
    pub gaps: Vec<f64>,
    /// Standard error of each gap from paired batch differences.
    pub gap_ses: Vec<f64>,
    /// Dyadic resolution used by companion diagnostics.
    pub partition_n: usize,
    pub verdict: Verdict,
    /// Steps used by the full solver at each ε.
    pub steps_used: Vec<usize>,
}

/// Sweep knobs on top of the solver options.
#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub solver: SolveOptions,
    /// Target for dt/ε of the full solves; steps grow as ε shrinks.
    pub stiffness_target: f64,
    /// Absolute tolerance of the final gap.
    pub tol_abs: f64,
    pub partition_n: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            solver: SolveOptions::default(),
            stiffness_target: 0.02,
            tol_abs: 1e-2,
            partition_n: 4,
        }
    }
}

/// Solve the full system at each ε (common slow randomness across ε) and the
/// reduced system once; report gaps and a convergence verdict.
pub fn epsilon_sweep(
    spec: &ModelSpec,
    driver: &Driver,
    lambda: &LambdaMap,
    epsilons: &[f64],
    grid: &GridSpec,
    n_paths: usize,
    opts: &SweepOptions,
    seed: u64,
) -> Result<SweepResult> {
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CoreError::Invalid("epsilons must be strictly decreasing".into()));
    }
    let reduced = solve_reduced_bsde(spec, grid, lambda, n_paths, seed, &opts.solver)?;

    let mut y0_eps = Vec::with_capacity(epsilons.len());
    let mut gaps = Vec::with_capacity(epsilons.len());
    let mut gap_ses = Vec::with_capacity(epsilons.len());
    let mut steps_used = Vec::with_capacity(epsilons.len());
    for (i, &eps) in epsilons.iter().enumerate() {
        let spec_eps = spec.with_epsilon(eps)?;
        let min_steps =
            (grid.horizon / (opts.stiffness_target * eps)).ceil() as usize;
        let n_steps = grid.n_steps.max(min_steps);
        let grid_eps = GridSpec::new(n_steps, grid.horizon);
        let mut sopts = opts.solver.clone();
        sopts.eps_tag = (i + 1) as u64;
        let full = solve_full_bsde(&spec_eps, &grid_eps, driver, n_paths, seed, &sopts)?;
        let paired: Vec<f64> = full
            .batch_y0
            .iter()
            .zip(&reduced.batch_y0)
            .map(|(a, b)| a - b)
            .collect();
        let (gap_mean, gap_se) = util::mean_se(&paired);
        y0_eps.push((full.y0, full.y0_se));
        gaps.push(gap_mean.abs());
        gap_ses.push(gap_se);
        steps_used.push(n_steps);
    }

    // Verdict: fail on a significant increase or a significant final excess;
    // pass when the final gap is inside tolerance; otherwise inconclusive.
    let last = gaps.len() - 1;
    let tol_eff = opts.tol_abs.max(3.0 * gap_ses[last]);
    let mut verdict = if gaps[last] <= tol_eff {
        Verdict::Pass
    } else if gaps[last] - 3.0 * gap_ses[last] > opts.tol_abs {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    };
    for w in 0..gaps.len().saturating_sub(1) {
        let se_comb = (gap_ses[w].powi(2) + gap_ses[w + 1].powi(2)).sqrt();
        if gaps[w + 1] > gaps[w] + 3.0 * se_comb + opts.tol_abs {
            verdict = Verdict::Fail;
        }
    }

    Ok(SweepResult {
        epsilons: epsilons.to_vec(),
        y0_eps,
        y0_bar: (reduced.y0, reduced.y0_se),
        gaps,
        gap_ses,
        partition_n: opts.partition_n,
        verdict,
        steps_used,
    })
}

/// Value-identity report: the Hamiltonian-driver BSDE value against
/// brute-force constant-policy costs simulated by reweighting.
#[derive(Debug, Serialize)]
pub struct ValueReport {
    pub v_bsde: (f64, f64),
    /// (control index, cost estimate, standard error, effective sample size).
    pub policies: Vec<(usize, f64, f64, f64)>,
    pub min_policy: (usize, f64, f64),
    /// BSDE value ≤ min policy cost + 3·combined SE.
    pub ordering_ok: bool,
    pub gap: f64,
}

/// Compare the BSDE value with every constant policy's simulated cost
/// E^{ε,α}[∫ l dt + h(X₁)].
pub fn value_function(
    spec: &ModelSpec,
    grid: &GridSpec,
    n_paths: usize,
    opts: &SolveOptions,
    seed: u64,
) -> Result<ValueReport> {
    let dims = spec.dims();
    if dims.n_controls == 0 {
        return Err(CoreError::Invalid("control set is empty".into()));
    }
    let solution = solve_full_bsde(spec, grid, &Driver::Hamiltonian, n_paths, seed, opts)?;

    let ens = simulate_ensemble(
        spec,
        grid,
        seed,
        0,
        n_paths,
        true,
        0,
        opts.stiffness_bound,
    )?;
    let xs = ens.x.as_ref().expect("slow states");
    let qs = ens.q.as_ref().expect("fast states");
    let dt = grid.dt();

    let mut policies = Vec::with_capacity(dims.n_controls);
    for a_idx in 0..dims.n_controls {
        // Path cost under the reference measure; the tilt moves it to P^{ε,α}.
        let costs: Vec<f64> = (0..n_paths)
            .map(|p| {
                let mut acc = 0.0;
                for k in 0..grid.n_steps {
                    let x = xs[k].column(p).into_owned();
                    let q = qs[k].column(p).into_owned();
                    acc += spec.coeffs().l.eval(&x, &q, a_idx) * dt;
                }
                acc + spec
                    .coeffs()
                    .h
                    .eval(&xs[grid.n_steps].column(p).into_owned())
            })
            .collect();
        let policy = std::sync::Arc::new(move |_: f64, _: &[f64], _: &[f64]| a_idx);
        let tilt = control_measure(spec, policy, spec.epsilon());
        let rw = reweighted_mean(spec, &tilt, &ens, &|p| costs[p])?;
        policies.push((a_idx, rw.estimate, rw.se, rw.ess));
    }

    let min_policy = policies
        .iter()
        .cloned()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(i, v, s, _)| (i, v, s))
        .expect("nonempty policies");
    let se_comb = (solution.y0_se.powi(2) + min_policy.2.powi(2)).sqrt();
    let gap = solution.y0 - min_policy.1;
    Ok(ValueReport {
        v_bsde: (solution.y0, solution.y0_se),
        policies,
        min_policy,
        ordering_ok: gap <= 3.0 * se_comb,
        gap,
    })
}

/// One (p, v) point of the dual grid.
#[derive(Clone, Debug, Serialize)]
pub struct PvPoint {
    pub p: Vec<f64>,
    pub v: Vec<f64>,
}

/// Dual search space: a (p, v) grid respecting the λ Lipschitz radii, a
/// piecewise-constant time resolution, and the (z, u) search box used for
/// conjugation when the λ map carries no cache grid.
#[derive(Clone, Debug)]
pub struct DualSpec {
    pub pv: Vec<PvPoint>,
    pub time_cells: usize,
    pub zu_z: Vec<Axis>,
    pub zu_u: Vec<Axis>,
}

impl DualSpec {
    /// Grid over |p| ≤ l_z (componentwise for d_x > 1) and per-mark v nodes
    /// with joint norm ‖1 − v‖_{L²(ν₁)} ≤ l_u (plus a small slack so the
    /// radius itself is admitted); v must stay positive.
    pub fn from_certificates(
        spec: &ModelSpec,
        l_z: f64,
        l_u: f64,
        p_res: usize,
        v_res: usize,
        time_cells: usize,
        zu_z: Vec<Axis>,
        zu_u: Vec<Axis>,
    ) -> Self {
        let dims = spec.dims();
        let p_axis = |_d: usize| -> Vec<f64> {
            if l_z <= 0.0 || p_res <= 1 {
                vec![0.0]
            } else {
                (0..p_res)
                    .map(|i| -l_z + 2.0 * l_z * i as f64 / (p_res - 1) as f64)
                    .collect()
            }
        };
        let mut p_grid: Vec<Vec<f64>> = vec![vec![]];
        for d in 0..dims.d_x {
            let mut next = Vec::new();
            for base in &p_grid {
                for val in p_axis(d) {
                    let mut b = base.clone();
                    b.push(val);
                    next.push(b);
                }
            }
            p_grid = next;
        }

        let mut v_grid: Vec<Vec<f64>> = vec![vec![]];
        for i in 0..dims.m1 {
            let lam = spec.nu1().intensities[i];
            let radius = if lam > 0.0 { l_u / lam.sqrt() } else { 0.0 };
            let nodes: Vec<f64> = if radius <= 0.0 || v_res <= 1 {
                vec![1.0]
            } else {
                (0..v_res)
                    .map(|k| 1.0 - radius + 2.0 * radius * k as f64 / (v_res - 1) as f64)
                    .filter(|v| *v > 1e-9)
                    .collect()
            };
            let mut next = Vec::new();
            for base in &v_grid {
                for &val in &nodes {
                    let mut b = base.clone();
                    b.push(val);
                    next.push(b);
                }
            }
            v_grid = next;
        }
        // Enforce the joint norm bound.
        let lam1 = &spec.nu1().intensities;
        v_grid.retain(|v| {
            let norm: f64 = v
                .iter()
                .zip(lam1)
                .map(|(vi, l)| (1.0 - vi) * (1.0 - vi) * l)
                .sum::<f64>()
                .sqrt();
            norm <= l_u + 1e-9
        });
        if v_grid.is_empty() {
            v_grid.push(vec![1.0; dims.m1]);
        }

        let mut pv = Vec::new();
        for p in &p_grid {
            for v in &v_grid {
                pv.push(PvPoint {
                    p: p.clone(),
                    v: v.clone(),
                });
            }
        }
        DualSpec {
            pv,
            time_cells,
            zu_z,
            zu_u,
        }
    }
}

/// λ* tabulated on an x-grid × (p, v)-grid. −∞ encodes recession directions
/// (the conjugand is unbounded below, which happens exactly beyond the
/// Lipschitz radii and along flat directions of λ).
#[derive(Clone, Debug, Serialize)]
pub struct ConjugateTable {
    pub x_axes: Vec<Axis>,
    pub pv: Vec<PvPoint>,
    /// values[x_flat][pv_idx].
    pub values: Vec<Vec<f64>>,
}

impl ConjugateTable {
    pub fn eval(&self, x: &DVector<f64>, pv_idx: usize) -> f64 {
        if self.values.len() == 1 {
            return self.values[0][pv_idx];
        }
        let coords: Vec<f64> = x.iter().copied().collect();
        let (v, _) = multilinear(&self.x_axes, &|flat| self.values[flat][pv_idx], &coords);
        // A −∞ corner with zero weight produces NaN; any −∞ involvement
        // means the conjugate recedes there.
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

fn zu_nodes(map: &LambdaMap, dual: &DualSpec) -> Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> {
    // Each node carries per-axis boundary flags (true at an active-axis edge).
    let (z_axes, u_axes): (Vec<Axis>, Vec<Axis>) = match map {
        LambdaMap::Cached(g) => (g.bounds.z.clone(), g.bounds.u.clone()),
        _ => (dual.zu_z.clone(), dual.zu_u.clone()),
    };
    let mut nodes: Vec<(Vec<f64>, Vec<bool>)> = vec![(vec![], vec![])];
    for axis in z_axes.iter().chain(u_axes.iter()) {
        let vals = axis.nodes();
        let mut next = Vec::new();
        for (base, flags) in &nodes {
            for (i, &v) in vals.iter().enumerate() {
                let mut b = base.clone();
                let mut f = flags.clone();
                b.push(v);
                f.push(axis.res > 1 && (i == 0 || i == axis.res - 1));
                next.push((b, f));
            }
        }
        nodes = next;
    }
    let nz = z_axes.len();
    nodes
        .into_iter()
        .map(|(coords, flags)| {
            (
                coords[..nz].to_vec(),
                coords[nz..].to_vec(),
                flags,
            )
        })
        .collect()
}

/// One conjugate row: λ*(x, p, v) = inf over the (z, u) grid of
/// (−z·p − ⟨u, 1 − v⟩_{ν₁} − λ(x, z, u)).
///
/// A minimum attained only at the box edge with a strictly decreasing trend
/// is a recession direction and encodes −∞; a flat edge attainment without
/// interior ties raises the widen-box error.
pub fn fenchel_conjugate(
    spec: &ModelSpec,
    map: &LambdaMap,
    x: &DVector<f64>,
    dual: &DualSpec,
) -> Result<Vec<f64>> {
    let lam1 = &spec.nu1().intensities;
    let nodes = zu_nodes(map, dual);
    if nodes.is_empty() {
        return Err(CoreError::Invalid("empty (z, u) search grid".into()));
    }
    let mut row = Vec::with_capacity(dual.pv.len());
    for point in &dual.pv {
        let mut best = f64::INFINITY;
        let mut second = f64::INFINITY;
        let mut interior_tie = false;
        let mut boundary_best = false;
        for (zc, uc, flags) in &nodes {
            let z = DVector::from_row_slice(zc);
            let u = DVector::from_row_slice(uc);
            let (lam_val, _) = map.eval(x, &z, &u)?;
            let mut val = -lam_val;
            for (zi, pi) in zc.iter().zip(&point.p) {
                val -= zi * pi;
            }
            for ((ui, vi), l) in uc.iter().zip(&point.v).zip(lam1) {
                val -= ui * (1.0 - vi) * l;
            }
            let on_boundary = flags.iter().any(|&b| b);
            let tol = 1e-9 * (1.0 + best.abs());
            if val < best - tol {
                second = best;
                best = val;
                boundary_best = on_boundary;
                interior_tie = !on_boundary;
            } else if val <= best + tol {
                if !on_boundary {
                    interior_tie = true;
                }
            } else if val < second {
                second = val;
            }
        }
        if boundary_best && !interior_tie {
            // Decreasing into the edge ⇒ recession (−∞); flat edge ⇒ the box
            // is genuinely too small.
            let slope_scale = (second - best).abs();
            if slope_scale > 1e-6 * (1.0 + best.abs()) {
                row.push(f64::NEG_INFINITY);
            } else {
                return Err(CoreError::ConjugateBoxTooSmall);
            }
        } else {
            row.push(best);
        }
    }
    Ok(row)
}

/// Tabulate λ* over an x grid.
pub fn build_conjugate_table(
    spec: &ModelSpec,
    map: &LambdaMap,
    x_axes: Vec<Axis>,
    dual: &DualSpec,
) -> Result<ConjugateTable> {
    let node_lists: Vec<Vec<f64>> = x_axes.iter().map(Axis::nodes).collect();
    let total: usize = node_lists.iter().map(|n| n.len()).product::<usize>().max(1);
    let mut values = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut coords = vec![0.0; x_axes.len()];
        for a in (0..x_axes.len()).rev() {
            let n = node_lists[a].len();
            coords[a] = node_lists[a][rem % n];
            rem /= n;
        }
        let x = DVector::from_row_slice(&coords);
        values.push(fenchel_conjugate(spec, map, &x, dual)?);
    }
    Ok(ConjugateTable {
        x_axes,
        pv: dual.pv.clone(),
        values,
    })
}

/// λ**(z, u) reconstructed from the table at one x node; used by the
/// biconjugacy checks.
pub fn biconjugate(
    spec: &ModelSpec,
    table: &ConjugateTable,
    x: &DVector<f64>,
    z: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let lam1 = &spec.nu1().intensities;
    let mut best = f64::INFINITY;
    for (i, point) in table.pv.iter().enumerate() {
        let star = table.eval(x, i);
        if star == f64::NEG_INFINITY {
            continue;
        }
        let mut val = -star;
        for (zi, pi) in z.iter().zip(&point.p) {
            val -= zi * pi;
        }
        for ((ui, vi), l) in u.iter().zip(&point.v).zip(lam1) {
            val -= ui * (1.0 - vi) * l;
        }
        best = best.min(val);
    }
    best
}

/// One evaluated dual schedule.
#[derive(Clone, Debug, Serialize)]
pub struct ScheduleValue {
    /// Per-cell index into the pv grid.
    pub cells: Vec<usize>,
    pub value: f64,
    pub se: f64,
    /// True when some cell's λ* is −∞ (the schedule is discarded from the
    /// infimum; its objective is +∞).
    pub infeasible: bool,
}

#[derive(Debug, Serialize)]
pub struct DualReport {
    pub schedules: Vec<ScheduleValue>,
    pub best: ScheduleValue,
    pub y0_bar: (f64, f64),
    /// Every feasible schedule's value ≥ Ȳ₀ − 3·combined SE.
    pub weak_duality_ok: bool,
    /// best − Ȳ₀.
    pub best_gap: f64,
    /// Set when the schedule enumeration was truncated to constants.
    pub truncated: bool,
}

const MAX_SCHEDULES: usize = 4096;

/// Grid infimum of E^{p,v}[h(X₁) − ∫ λ*(X_s, p_s, v_s) ds] over
/// piecewise-constant schedules on the dual grid.
pub fn reduced_control_value(
    spec: &ModelSpec,
    table: &ConjugateTable,
    dual: &DualSpec,
    grid: &GridSpec,
    n_paths: usize,
    y0_bar: (f64, f64),
    seed: u64,
    stiffness_bound: f64,
) -> Result<DualReport> {
    let dims = spec.dims();
    let ens = simulate_ensemble(spec, grid, seed, 0, n_paths, false, 0, stiffness_bound)?;
    let xs = ens.x.as_ref().expect("slow states");
    let dw1 = ens.dw1.as_ref().expect("W1 increments");
    let n1 = ens.n1.as_ref().expect("N1 counts");
    let dt = grid.dt();
    let n_cells = dual.time_cells.max(1);
    if grid.n_steps % n_cells != 0 {
        return Err(CoreError::Invalid(
            "n_steps must be divisible by the dual time cells".into(),
        ));
    }
    let steps_per_cell = grid.n_steps / n_cells;
    let cell_dt = dt * steps_per_cell as f64;
    let n_pv = dual.pv.len();
    let lam1 = &spec.nu1().intensities;

    // Per-path sufficient statistics.
    let mut s_cell = vec![vec![vec![0.0f64; dims.d_x]; n_cells]; n_paths];
    let mut j_cell = vec![vec![vec![0.0f64; dims.m1]; n_cells]; n_paths];
    let mut lstar_cell = vec![vec![vec![0.0f64; n_pv]; n_cells]; n_paths];
    let mut h_term = vec![0.0f64; n_paths];
    for p in 0..n_paths {
        for c in 0..n_cells {
            for k in c * steps_per_cell..(c + 1) * steps_per_cell {
                for d in 0..dims.d_x {
                    s_cell[p][c][d] += dw1[k][(d, p)];
                }
                for i in 0..dims.m1 {
                    j_cell[p][c][i] += n1[k][(i, p)];
                }
                let x = xs[k].column(p).into_owned();
                for (pv_idx, cell_acc) in lstar_cell[p][c].iter_mut().enumerate() {
                    let v = table.eval(&x, pv_idx);
                    *cell_acc += v * dt;
                }
            }
        }
        h_term[p] = spec
            .coeffs()
            .h
            .eval(&xs[grid.n_steps].column(p).into_owned());
    }

    // Schedule enumeration: full product when small, constants otherwise.
    let full_count = (n_pv as f64).powi(n_cells as i32);
    let truncated = full_count > MAX_SCHEDULES as f64;
    let schedules: Vec<Vec<usize>> = if truncated {
        (0..n_pv).map(|i| vec![i; n_cells]).collect()
    } else {
        let mut out: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..n_cells {
            let mut next = Vec::with_capacity(out.len() * n_pv);
            for base in &out {
                for i in 0..n_pv {
                    let mut b = base.clone();
                    b.push(i);
                    next.push(b);
                }
            }
            out = next;
        }
        out
    };

    let mut evaluated = Vec::with_capacity(schedules.len());
    for cells in schedules {
        let infeasible = cells.iter().any(|&pv_idx| {
            table
                .values
                .iter()
                .any(|row| row[pv_idx] == f64::NEG_INFINITY)
        });
        if infeasible {
            evaluated.push(ScheduleValue {
                cells,
                value: f64::INFINITY,
                se: 0.0,
                infeasible: true,
            });
            continue;
        }
        let mut prods = Vec::with_capacity(n_paths);
        for p in 0..n_paths {
            let mut logw = 0.0;
            let mut lstar_int = 0.0;
            for (c, &pv_idx) in cells.iter().enumerate() {
                let point = &dual.pv[pv_idx];
                let mut p_norm_sq = 0.0;
                for (d, pd) in point.p.iter().enumerate() {
                    logw -= pd * s_cell[p][c][d];
                    p_norm_sq += pd * pd;
                }
                logw -= 0.5 * p_norm_sq * cell_dt;
                for (i, vi) in point.v.iter().enumerate() {
                    logw += (1.0 - vi) * lam1[i] * cell_dt;
                    if j_cell[p][c][i] > 0.0 {
                        logw += j_cell[p][c][i] * vi.ln();
                    }
                }
                lstar_int += lstar_cell[p][c][pv_idx];
            }
            prods.push(logw.exp() * (h_term[p] - lstar_int));
        }
        let (value, se) = util::mean_se(&prods);
        evaluated.push(ScheduleValue {
            cells,
            value,
            se,
            infeasible: false,
        });
    }

    let best = evaluated
        .iter()
        .filter(|s| !s.infeasible)
        .min_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
        .cloned()
        .ok_or_else(|| CoreError::Invalid("no feasible dual schedule".into()))?;
    let weak_duality_ok = evaluated.iter().filter(|s| !s.infeasible).all(|s| {
        let se_comb = (s.se.powi(2) + y0_bar.1.powi(2)).sqrt();
        s.value >= y0_bar.0 - 3.0 * se_comb
    });

    Ok(DualReport {
        best_gap: best.value - y0_bar.0,
        best,
        y0_bar,
        weak_duality_ok,
        schedules: evaluated,
        truncated,
    })
}

/// Diagnostics of the dyadic step-process approximation.
#[derive(Clone, Debug, Serialize)]
pub struct DyadicRow {
    pub n: usize,
    /// E[(sup_t |X_t − X^N_t|)⁴]^{1/4}.
    pub delta_x: f64,
    /// E[∫|Z̄ − Z̃^N|² dt]^{1/2}, paper convention (Z̃ = 0 on the first cell).
    pub delta_z: f64,
    /// Contribution of the first cell alone.
    pub delta_z_cell0: f64,
    pub delta_u: f64,
    pub delta_u_cell0: f64,
    /// (ε, ε(2^N + 2^{3N/2}) + residual sum) pairs.
    pub envelopes: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
pub struct DyadicTable {
    pub rows: Vec<DyadicRow>,
}

/// Compute the discretization residuals of the dyadic partitions for each N
/// from a reduced solve (the solution's Z̄, Ū path values).
pub fn dyadic_diagnostics(
    spec: &ModelSpec,
    lambda: &LambdaMap,
    n_list: &[usize],
    eps_list: &[f64],
    grid: &GridSpec,
    n_paths: usize,
    opts: &SolveOptions,
    seed: u64,
) -> Result<DyadicTable> {
    for &n in n_list {
        if grid.n_steps % (1usize << n) != 0 {
            return Err(CoreError::Invalid(format!(
                "n_steps = {} not divisible by 2^{n}",
                grid.n_steps
            )));
        }
    }
    let mut o = opts.clone();
    o.keep_batches = true;
    let solution: BsdeSolution = solve_reduced_bsde(spec, grid, lambda, n_paths, seed, &o)?;
    let dims = spec.dims();
    let dt = grid.dt();
    let lam1 = &spec.nu1().intensities;

    let mut rows = Vec::with_capacity(n_list.len());
    for &nn in n_list {
        let cells = 1usize << nn;
        let steps_per_cell = grid.n_steps / cells;
        let mut dx4 = Vec::new();
        let mut dz = Vec::new();
        let mut dz0 = Vec::new();
        let mut du = Vec::new();
        let mut du0 = Vec::new();
        for batch in &solution.batches {
            let xs = batch.ensemble.x.as_ref().expect("slow states");
            for p in 0..batch.ensemble.n_paths {
                // sup_t |X_t − X^N_t| over the fine grid.
                let mut sup = 0.0f64;
                for k in 0..=grid.n_steps {
                    let anchor = (k / steps_per_cell).min(cells - 1) * steps_per_cell;
                    let gap = (xs[k].column(p) - xs[anchor].column(p)).norm();
                    sup = sup.max(gap);
                }
                dx4.push(sup.powi(4));

                // Step-average processes: cell c ≥ 1 carries the previous
                // cell's average; cell 0 carries zero.
                let mut z_acc = 0.0;
                let mut z_acc0 = 0.0;
                let mut u_acc = 0.0;
                let mut u_acc0 = 0.0;
                for c in 0..cells {
                    for d in 0..dims.d_x {
                        let tilde = if c == 0 {
                            0.0
                        } else {
                            let mut s = 0.0;
                            for k in (c - 1) * steps_per_cell..c * steps_per_cell {
                                s += batch.z[k][(d, p)];
                            }
                            s / steps_per_cell as f64
                        };
                        for k in c * steps_per_cell..(c + 1) * steps_per_cell {
                            let diff = batch.z[k][(d, p)] - tilde;
                            z_acc += diff * diff * dt;
                            if c == 0 {
                                z_acc0 += diff * diff * dt;
                            }
                        }
                    }
                    for i in 0..dims.m1 {
                        let tilde = if c == 0 {
                            0.0
                        } else {
                            let mut s = 0.0;
                            for k in (c - 1) * steps_per_cell..c * steps_per_cell {
                                s += batch.u[k][(i, p)];
                            }
                            s / steps_per_cell as f64
                        };
                        for k in c * steps_per_cell..(c + 1) * steps_per_cell {
                            let diff = batch.u[k][(i, p)] - tilde;
                            u_acc += diff * diff * lam1[i] * dt;
                            if c == 0 {
                                u_acc0 += diff * diff * lam1[i] * dt;
                            }
                        }
                    }
                }
                dz.push(z_acc);
                dz0.push(z_acc0);
                du.push(u_acc);
                du0.push(u_acc0);
            }
        }
        let delta_x = util::mean(&dx4).powf(0.25);
        let delta_z = util::mean(&dz).sqrt();
        let delta_z_cell0 = util::mean(&dz0).sqrt();
        let delta_u = util::mean(&du).sqrt();
        let delta_u_cell0 = util::mean(&du0).sqrt();
        let envelopes = eps_list
            .iter()
            .map(|&e| {
                let pow = (2.0f64).powi(nn as i32) + (2.0f64).powf(1.5 * nn as f64);
                (e, e * pow + delta_z + delta_u + delta_x)
            })
            .collect();
        rows.push(DyadicRow {
            n: nn,
            delta_x,
            delta_z,
            delta_z_cell0,
            delta_u,
            delta_u_cell0,
            envelopes,
        });
    }
    Ok(DyadicTable { rows })
}

/// Batch weights of a dual schedule, exposed for the girsanov-check CLI
/// command's weight dump on slow-only ensembles.
pub fn schedule_weights(
    spec: &ModelSpec,
    tilt: &GirsanovSpec,
    grid: &GridSpec,
    n_paths: usize,
    seed: u64,
    stiffness_bound: f64,
) -> Result<Vec<f64>> {
    let with_fast = tilt.beta2.is_some() || tilt.gamma2.is_some();
    let ens = simulate_ensemble(spec, grid, seed, 0, n_paths, with_fast, 0, stiffness_bound)?;
    terminal_log_weights(spec, tilt, &ens)
}
