//! Regression Monte Carlo backward induction.
//!
//! At each time slice the conditional expectations are global least-squares
//! projections on a basis of the current state (degree-2 polynomials by
//! default, tabulated bins in low dimension). The martingale integrands are
//! regressed against control-variate targets
//! `(Y_{k+1} − Ŷ_k) · ΔW/dt` and `(Y_{k+1} − Ŷ_k) · ΔÑ_i/(λ_i dt)`, which
//! leaves their conditional expectations unchanged but removes the bulk of
//! the Monte Carlo variance, and the slice value is
//! `Y_k = Ê[Y_{k+1}] + ψ·dt` with inner fixed-point sweeps of the ψ term.
//!
//! The ensemble is split into independent batches solved separately; the
//! reported Y₀ is the mean of the batch values and its standard error comes
//! from the batch spread.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::forward::{simulate_ensemble, Ensemble, GridSpec, DEFAULT_STIFFNESS_BOUND};
use crate::hamiltonian::{Driver, DriverCertificate, DriverInput};
use crate::model::{ModelSpec, TerminalCost};
use crate::util;

/// Conditional-expectation estimator family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    Polynomial { degree: usize },
    TabulatedGrid { resolution: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    #[serde(flatten)]
    pub kind: BasisKind,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis {
            kind: BasisKind::Polynomial { degree: 2 },
        }
    }
}

const COND_LIMIT: f64 = 1e8;
const SV_CUTOFF: f64 = 1e-12;

/// One slice's fitted coefficients for one scalar target; evaluable as a
/// function of the state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum FitCoef {
    Poly {
        mean: Vec<f64>,
        std: Vec<f64>,
        kept: Vec<usize>,
        coef: Vec<f64>,
        degree: usize,
        dim: usize,
    },
    Tab {
        lo: Vec<f64>,
        hi: Vec<f64>,
        resolution: usize,
        cells: Vec<f64>,
        global: f64,
        dim: usize,
    },
    /// Terminal slice: the exact terminal cost.
    Terminal { h: TerminalCost },
}

/// State-feedback function for one slice, with the ensemble hull recorded so
/// evaluations outside it can be flagged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceDecoder {
    pub coef: FitCoef,
    pub hull_lo: Vec<f64>,
    pub hull_hi: Vec<f64>,
}

impl SliceDecoder {
    /// Value and an extrapolation flag (true when `state` leaves the hull of
    /// the fitting ensemble).
    pub fn eval(&self, state: &DVector<f64>) -> (f64, bool) {
        let outside = state
            .iter()
            .zip(self.hull_lo.iter().zip(&self.hull_hi))
            .any(|(s, (lo, hi))| s < lo || s > hi);
        let v = match &self.coef {
            FitCoef::Terminal { h } => h.eval(state),
            FitCoef::Poly {
                mean,
                std,
                kept,
                coef,
                degree,
                dim,
            } => {
                let raw = raw_features(state.as_slice(), *dim, *degree);
                let mut v = coef[0];
                for (slot, &fi) in kept.iter().enumerate() {
                    v += coef[slot + 1] * (raw[fi] - mean[slot]) / std[slot];
                }
                v
            }
            FitCoef::Tab {
                lo,
                hi,
                resolution,
                cells,
                global,
                ..
            } => {
                let idx = tab_cell(state.as_slice(), lo, hi, *resolution);
                let c = cells[idx];
                if c.is_nan() {
                    *global
                } else {
                    c
                }
            }
        };
        (v, outside)
    }
}

/// Monomials of the state up to `degree` (intercept excluded).
fn raw_features(s: &[f64], dim: usize, degree: usize) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(&s[..dim]);
    if degree >= 2 {
        for i in 0..dim {
            for j in i..dim {
                out.push(s[i] * s[j]);
            }
        }
    }
    if degree >= 3 {
        for i in 0..dim {
            for j in i..dim {
                for k in j..dim {
                    out.push(s[i] * s[j] * s[k]);
                }
            }
        }
    }
    out
}

fn tab_cell(s: &[f64], lo: &[f64], hi: &[f64], resolution: usize) -> usize {
    let mut idx = 0usize;
    for d in 0..s.len() {
        let span = (hi[d] - lo[d]).max(1e-300);
        let mut c = ((s[d] - lo[d]) / span * resolution as f64).floor() as isize;
        c = c.clamp(0, resolution as isize - 1);
        idx = idx * resolution + c as usize;
    }
    idx
}

/// Per-slice regression context shared by all targets of that slice.
pub(crate) enum SliceRegressor {
    Poly {
        phi: DMatrix<f64>,
        pinv: DMatrix<f64>,
        mean: Vec<f64>,
        std: Vec<f64>,
        kept: Vec<usize>,
        cond: f64,
        degree: usize,
        dim: usize,
    },
    Tab {
        assign: Vec<usize>,
        n_cells: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
        resolution: usize,
        dim: usize,
    },
}

impl SliceRegressor {
    /// Build from the slice state matrix (dim × n_paths).
    pub(crate) fn new(basis: &RegressionBasis, state: &DMatrix<f64>) -> Result<Self> {
        let dim = state.nrows();
        let n_paths = state.ncols();
        match basis.kind {
            BasisKind::Polynomial { degree } => {
                let n_raw = raw_features(state.column(0).as_slice(), dim, degree).len();
                let mut raw = DMatrix::zeros(n_paths, n_raw);
                for p in 0..n_paths {
                    let feats = raw_features(state.column(p).as_slice(), dim, degree);
                    for (j, f) in feats.into_iter().enumerate() {
                        raw[(p, j)] = f;
                    }
                }
                // Standardize and drop degenerate columns; a deterministic
                // slice keeps only the intercept.
                let mut kept = Vec::new();
                let mut means = Vec::new();
                let mut stds = Vec::new();
                for j in 0..n_raw {
                    let col = raw.column(j);
                    let m = col.sum() / n_paths as f64;
                    let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                        / (n_paths.max(2) - 1) as f64;
                    let sd = var.sqrt();
                    if sd > 1e-12 * (1.0 + m.abs()) {
                        kept.push(j);
                        means.push(m);
                        stds.push(sd);
                    }
                }
                let p = kept.len() + 1;
                let mut phi = DMatrix::zeros(n_paths, p);
                for r in 0..n_paths {
                    phi[(r, 0)] = 1.0;
                }
                for (slot, &j) in kept.iter().enumerate() {
                    for r in 0..n_paths {
                        phi[(r, slot + 1)] = (raw[(r, j)] - means[slot]) / stds[slot];
                    }
                }
                let gram = phi.transpose() * &phi;
                let svd = gram.svd(true, true);
                let smax = svd.singular_values.max();
                let smin = svd.singular_values.min();
                let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
                if cond > COND_LIMIT {
                    return Err(CoreError::SingularRegression { cond });
                }
                let pinv = svd
                    .pseudo_inverse(SV_CUTOFF * smax.max(1e-300))
                    .map_err(|_| CoreError::SingularRegression { cond })?;
                Ok(SliceRegressor::Poly {
                    phi,
                    pinv,
                    mean: means,
                    std: stds,
                    kept,
                    cond,
                    degree,
                    dim,
                })
            }
            BasisKind::TabulatedGrid { resolution } => {
                let mut lo = vec![f64::INFINITY; dim];
                let mut hi = vec![f64::NEG_INFINITY; dim];
                for p in 0..n_paths {
                    for d in 0..dim {
                        lo[d] = lo[d].min(state[(d, p)]);
                        hi[d] = hi[d].max(state[(d, p)]);
                    }
                }
                for d in 0..dim {
                    if hi[d] - lo[d] < 1e-12 {
                        hi[d] = lo[d] + 1e-12;
                    }
                }
                let assign: Vec<usize> = (0..n_paths)
                    .map(|p| tab_cell(state.column(p).as_slice(), &lo, &hi, resolution))
                    .collect();
                Ok(SliceRegressor::Tab {
                    assign,
                    n_cells: resolution.pow(dim as u32),
                    lo,
                    hi,
                    resolution,
                    dim,
                })
            }
        }
    }

    pub(crate) fn cond(&self) -> f64 {
        match self {
            SliceRegressor::Poly { cond, .. } => *cond,
            SliceRegressor::Tab { .. } => 1.0,
        }
    }

    /// Least-squares fit of one target; returns fitted values and the
    /// decoder coefficients.
    pub(crate) fn fit(&self, target: &DVector<f64>) -> (DVector<f64>, FitCoef) {
        match self {
            SliceRegressor::Poly {
                phi,
                pinv,
                mean,
                std,
                kept,
                degree,
                dim,
                ..
            } => {
                let rhs = phi.transpose() * target;
                let coef = pinv * rhs;
                let fitted = phi * &coef;
                (
                    fitted,
                    FitCoef::Poly {
                        mean: mean.clone(),
                        std: std.clone(),
                        kept: kept.clone(),
                        coef: coef.iter().copied().collect(),
                        degree: *degree,
                        dim: *dim,
                    },
                )
            }
            SliceRegressor::Tab {
                assign,
                n_cells,
                lo,
                hi,
                resolution,
                dim,
            } => {
                let mut sums = vec![0.0f64; *n_cells];
                let mut counts = vec![0usize; *n_cells];
                for (p, &c) in assign.iter().enumerate() {
                    sums[c] += target[p];
                    counts[c] += 1;
                }
                let global = target.sum() / target.len().max(1) as f64;
                let cells: Vec<f64> = sums
                    .iter()
                    .zip(&counts)
                    .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
                    .collect();
                let fitted = DVector::from_fn(target.len(), |p, _| {
                    let v = cells[assign[p]];
                    if v.is_nan() {
                        global
                    } else {
                        v
                    }
                });
                (
                    fitted,
                    FitCoef::Tab {
                        lo: lo.clone(),
                        hi: hi.clone(),
                        resolution: *resolution,
                        cells,
                        global,
                        dim: *dim,
                    },
                )
            }
        }
    }
}

fn hull_of(state: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let dim = state.nrows();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in 0..state.ncols() {
        for d in 0..dim {
            lo[d] = lo[d].min(state[(d, p)]);
            hi[d] = hi[d].max(state[(d, p)]);
        }
    }
    (lo, hi)
}

/// Per-slice fitted functions of one batch.
pub struct FieldDecoders {
    /// n_steps + 1 decoders; the last slice is the exact terminal cost.
    pub y: Vec<SliceDecoder>,
    /// n_steps slices × d_x components.
    pub z: Vec<Vec<SliceDecoder>>,
    pub xi: Option<Vec<Vec<SliceDecoder>>>,
    /// n_steps slices × m1 marks.
    pub u: Vec<Vec<SliceDecoder>>,
    pub theta: Option<Vec<Vec<SliceDecoder>>>,
}

/// Solved fields of one batch. Slice vectors are indexed by time, matrix
/// columns by path.
pub struct BatchSolution {
    pub y0: f64,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub xi: Option<Vec<DMatrix<f64>>>,
    pub u: Vec<DMatrix<f64>>,
    pub theta: Option<Vec<DMatrix<f64>>>,
    pub psi: Vec<DVector<f64>>,
    pub max_condition: f64,
    pub decoders: FieldDecoders,
    pub ensemble: Ensemble,
}

/// Per-slice ensemble summary for dumps.
#[derive(Clone, Debug, Serialize)]
pub struct SliceStat {
    pub t: f64,
    pub y_mean: f64,
    pub y_sd: f64,
    pub z_norm: f64,
    pub xi_norm: f64,
    pub u_norm: f64,
    pub theta_norm: f64,
}

/// Aggregated solution across batches.
pub struct BsdeSolution {
    pub y0: f64,
    /// Standard error of y0 from the batch spread.
    pub y0_se: f64,
    pub batch_y0: Vec<f64>,
    /// Largest within-batch spread of the time-0 values across paths.
    pub y0_spread: f64,
    pub slices: Vec<SliceStat>,
    pub max_condition: f64,
    /// (L_z + L_ζ/√ε + L_u + L_θ/ε) · dt when a certificate was supplied.
    pub picard_bound: Option<f64>,
    pub warnings: Vec<String>,
    /// Number of λ evaluations clamped to the cache box (reduced solves).
    pub lambda_clamped: usize,
    pub batches: Vec<BatchSolution>,
}

/// Solver knobs.
#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub basis: RegressionBasis,
    pub picard_iters: usize,
    pub n_batches: usize,
    pub keep_batches: bool,
    pub stiffness_bound: f64,
    pub certificate: Option<DriverCertificate>,
    /// Distinguishes the fast-noise stream of coupled runs at different ε.
    pub eps_tag: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            basis: RegressionBasis::default(),
            picard_iters: 3,
            n_batches: 8,
            keep_batches: false,
            stiffness_bound: DEFAULT_STIFFNESS_BOUND,
            certificate: None,
            eps_tag: 0,
        }
    }
}

struct TargetSet<'a> {
    /// Increment slice (dim × paths); the fitted integrand for component d
    /// regresses `cv · (incr[d] − shift[d]) · scale[d]`.
    incr: &'a DMatrix<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

/// Backward induction over one ensemble with the full driver
/// ψ(X, Q, Z, Ξ/√ε, U, Θ/ε).
pub fn solve_full_on(
    spec: &ModelSpec,
    grid: &GridSpec,
    ensemble: Ensemble,
    driver: &Driver,
    basis: &RegressionBasis,
    picard_iters: usize,
) -> Result<BatchSolution> {
    backward_kernel(spec, grid, ensemble, basis, picard_iters, true, &mut |input| {
        Ok(driver.eval(spec, input))
    })
}

/// Backward induction on the slow space only, with the reduced driver
/// λ(x, z, u) supplied as a closure.
pub fn solve_reduced_on(
    spec: &ModelSpec,
    grid: &GridSpec,
    ensemble: Ensemble,
    lambda: &mut dyn FnMut(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<f64>,
    basis: &RegressionBasis,
) -> Result<BatchSolution> {
    backward_kernel(spec, grid, ensemble, basis, 1, false, &mut |input| {
        lambda(&input.x, &input.z, &input.u)
    })
}

fn backward_kernel(
    spec: &ModelSpec,
    grid: &GridSpec,
    ensemble: Ensemble,
    basis: &RegressionBasis,
    picard_iters: usize,
    with_fast: bool,
    driver_eval: &mut dyn FnMut(&DriverInput) -> Result<f64>,
) -> Result<BatchSolution> {
    let dims = spec.dims();
    let n = grid.n_steps;
    let dt = grid.dt();
    let eps = spec.epsilon();
    let sqrt_eps = eps.sqrt();
    let n_paths = ensemble.n_paths;
    let xs = ensemble
        .x
        .as_ref()
        .ok_or_else(|| CoreError::Invalid("ensemble lacks slow states".into()))?;
    let qs = if with_fast {
        Some(
            ensemble
                .q
                .as_ref()
                .ok_or_else(|| CoreError::Invalid("ensemble lacks fast states".into()))?,
        )
    } else {
        None
    };
    let dw1 = ensemble
        .dw1
        .as_ref()
        .ok_or_else(|| CoreError::Invalid("ensemble lacks W1 increments".into()))?;
    let n1 = ensemble
        .n1
        .as_ref()
        .ok_or_else(|| CoreError::Invalid("ensemble lacks N1 counts".into()))?;

    let mut y: Vec<DVector<f64>> = vec![DVector::zeros(n_paths); n + 1];
    let mut z: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut xi: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut u: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut theta: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut psi_store: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut dec_y: Vec<SliceDecoder> = Vec::with_capacity(n + 1);
    let mut dec_z: Vec<Vec<SliceDecoder>> = Vec::with_capacity(n);
    let mut dec_xi: Vec<Vec<SliceDecoder>> = Vec::with_capacity(n);
    let mut dec_u: Vec<Vec<SliceDecoder>> = Vec::with_capacity(n);
    let mut dec_theta: Vec<Vec<SliceDecoder>> = Vec::with_capacity(n);
    let mut max_cond = 1.0f64;

    // Terminal condition, exact per path.
    for p in 0..n_paths {
        y[n][p] = spec.coeffs().h.eval(&xs[n].column(p).into_owned());
    }

    let state_dim = dims.d_x + if with_fast { dims.d_q } else { 0 };
    let mut state = DMatrix::zeros(state_dim, n_paths);
    let mut input = DriverInput::zeros(spec);
    let lam1: Vec<f64> = spec.nu1().intensities.clone();
    let lam2: Vec<f64> = spec.nu2().intensities.clone();

    for k in (0..n).rev() {
        for p in 0..n_paths {
            for d in 0..dims.d_x {
                state[(d, p)] = xs[k][(d, p)];
            }
            if let Some(qs) = qs {
                for d in 0..dims.d_q {
                    state[(dims.d_x + d, p)] = qs[k][(d, p)];
                }
            }
        }
        let reg = SliceRegressor::new(basis, &state)?;
        max_cond = max_cond.max(reg.cond());
        let (m_hat, m_coef) = reg.fit(&y[k + 1]);

        let w1_set = TargetSet {
            incr: &dw1[k],
            scale: vec![1.0 / dt; dims.d_x],
            shift: vec![0.0; dims.d_x],
        };
        let jump1_set = TargetSet {
            incr: &n1[k],
            scale: lam1.iter().map(|l| 1.0 / (l * dt)).collect(),
            shift: lam1.iter().map(|l| l * dt).collect(),
        };
        let (w2_set, jump2_set) = if with_fast {
            let dw2s = ensemble
                .dw2
                .as_ref()
                .ok_or_else(|| CoreError::Invalid("ensemble lacks W2 increments".into()))?;
            let n2s = ensemble
                .n2
                .as_ref()
                .ok_or_else(|| CoreError::Invalid("ensemble lacks N2 counts".into()))?;
            (
                Some(TargetSet {
                    incr: &dw2s[k],
                    scale: vec![1.0 / dt; dims.d_w],
                    shift: vec![0.0; dims.d_w],
                }),
                Some(TargetSet {
                    incr: &n2s[k],
                    scale: lam2.iter().map(|l| eps / (l * dt)).collect(),
                    shift: lam2.iter().map(|l| l / eps * dt).collect(),
                }),
            )
        } else {
            (None, None)
        };

        let mut y_curr = m_hat.clone();
        let mut z_k = DMatrix::zeros(dims.d_x, n_paths);
        let mut xi_k = DMatrix::zeros(dims.d_w, n_paths);
        let mut u_k = DMatrix::zeros(dims.m1, n_paths);
        let mut theta_k = DMatrix::zeros(dims.m2, n_paths);
        let mut z_coefs = Vec::new();
        let mut xi_coefs = Vec::new();
        let mut u_coefs = Vec::new();
        let mut theta_coefs = Vec::new();
        let mut psi_vals = DVector::zeros(n_paths);

        for _sweep in 0..picard_iters.max(1) {
            let cv = &y[k + 1] - &y_curr;

            let fit_set = |set: &TargetSet, out: &mut DMatrix<f64>, coefs: &mut Vec<FitCoef>| {
                coefs.clear();
                for d in 0..out.nrows() {
                    let target = DVector::from_fn(n_paths, |p, _| {
                        cv[p] * (set.incr[(d, p)] - set.shift[d]) * set.scale[d]
                    });
                    let (fitted, coef) = reg.fit(&target);
                    for p in 0..n_paths {
                        out[(d, p)] = fitted[p];
                    }
                    coefs.push(coef);
                }
            };

            fit_set(&w1_set, &mut z_k, &mut z_coefs);
            if let Some(set) = &w2_set {
                fit_set(set, &mut xi_k, &mut xi_coefs);
            }
            fit_set(&jump1_set, &mut u_k, &mut u_coefs);
            if let Some(set) = &jump2_set {
                fit_set(set, &mut theta_k, &mut theta_coefs);
            }

            for p in 0..n_paths {
                input.x.copy_from(&xs[k].column(p));
                if let Some(qs) = qs {
                    input.q.copy_from(&qs[k].column(p));
                }
                input.z.copy_from(&z_k.column(p));
                for d in 0..dims.d_w {
                    input.zeta[d] = xi_k[(d, p)] / sqrt_eps;
                }
                input.u.copy_from(&u_k.column(p));
                for j in 0..dims.m2 {
                    input.theta[j] = theta_k[(j, p)] / eps;
                }
                psi_vals[p] = driver_eval(&input)?;
            }
            for p in 0..n_paths {
                y_curr[p] = m_hat[p] + psi_vals[p] * dt;
            }
        }

        y[k] = y_curr;
        let (hl, hh) = hull_of(&state);
        dec_y.push(SliceDecoder {
            coef: m_coef,
            hull_lo: hl.clone(),
            hull_hi: hh.clone(),
        });
        let wrap = |coefs: Vec<FitCoef>| -> Vec<SliceDecoder> {
            coefs
                .into_iter()
                .map(|c| SliceDecoder {
                    coef: c,
                    hull_lo: hl.clone(),
                    hull_hi: hh.clone(),
                })
                .collect()
        };
        dec_z.push(wrap(z_coefs));
        if with_fast {
            dec_xi.push(wrap(xi_coefs));
            dec_theta.push(wrap(theta_coefs));
        }
        dec_u.push(wrap(u_coefs));
        z.push(z_k);
        if with_fast {
            xi.push(xi_k);
            theta.push(theta_k);
        }
        u.push(u_k);
        psi_store.push(psi_vals);
    }

    // Backward loops pushed in reverse time order.
    z.reverse();
    xi.reverse();
    u.reverse();
    theta.reverse();
    psi_store.reverse();
    dec_z.reverse();
    dec_xi.reverse();
    dec_u.reverse();
    dec_theta.reverse();
    dec_y.reverse();
    let (hl, hh) = hull_of(xs.last().expect("states"));
    dec_y.push(SliceDecoder {
        coef: FitCoef::Terminal {
            h: spec.coeffs().h.clone(),
        },
        hull_lo: hl,
        hull_hi: hh,
    });

    let y0 = y[0].sum() / n_paths as f64;
    Ok(BatchSolution {
        y0,
        y,
        z,
        xi: if with_fast { Some(xi) } else { None },
        u,
        theta: if with_fast { Some(theta) } else { None },
        psi: psi_store,
        max_condition: max_cond,
        decoders: FieldDecoders {
            y: dec_y,
            z: dec_z,
            xi: if with_fast { Some(dec_xi) } else { None },
            u: dec_u,
            theta: if with_fast { Some(dec_theta) } else { None },
        },
        ensemble,
    })
}

fn batch_sizes(n_paths: usize, n_batches: usize) -> Vec<usize> {
    let b = n_batches.max(1).min(n_paths.max(1));
    let base = n_paths / b;
    let rem = n_paths % b;
    (0..b).map(|i| base + usize::from(i < rem)).collect()
}

fn aggregate(
    spec: &ModelSpec,
    grid: &GridSpec,
    batches: Vec<BatchSolution>,
    opts: &SolveOptions,
    lambda_clamped: usize,
) -> BsdeSolution {
    let n = grid.n_steps;
    let dt = grid.dt();
    let eps = spec.epsilon();
    let batch_y0: Vec<f64> = batches.iter().map(|b| b.y0).collect();
    let (y0, y0_se) = util::mean_se(&batch_y0);
    let y0_spread = batches
        .iter()
        .map(|b| b.y[0].max() - b.y[0].min())
        .fold(0.0f64, f64::max);
    let max_condition = batches
        .iter()
        .map(|b| b.max_condition)
        .fold(1.0f64, f64::max);

    let mut slices = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut zn = 0.0;
        let mut xin = 0.0;
        let mut un = 0.0;
        let mut thn = 0.0;
        for b in &batches {
            for p in 0..b.y[k].len() {
                let v = b.y[k][p];
                sum += v;
                sumsq += v * v;
                count += 1;
                if k < n {
                    zn += b.z[k].column(p).norm();
                    if let Some(xi) = &b.xi {
                        xin += xi[k].column(p).norm();
                    }
                    un += b.u[k].column(p).norm();
                    if let Some(th) = &b.theta {
                        thn += th[k].column(p).norm();
                    }
                }
            }
        }
        let mean = sum / count.max(1) as f64;
        let var = (sumsq / count.max(1) as f64 - mean * mean).max(0.0);
        slices.push(SliceStat {
            t: grid.time(k),
            y_mean: mean,
            y_sd: var.sqrt(),
            z_norm: zn / count.max(1) as f64,
            xi_norm: xin / count.max(1) as f64,
            u_norm: un / count.max(1) as f64,
            theta_norm: thn / count.max(1) as f64,
        });
    }

    let mut warnings = Vec::new();
    let picard_bound = opts
        .certificate
        .as_ref()
        .map(|c| (c.l_z + c.l_zeta / eps.sqrt() + c.l_u + c.l_theta / eps) * dt);
    if let Some(b) = picard_bound {
        if b >= 1.0 {
            let msg = format!(
                "Picard contraction bound violated: (L_z + L_zeta/sqrt(eps) + L_u + L_theta/eps)*dt = {b:.3} >= 1"
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    BsdeSolution {
        y0,
        y0_se,
        batch_y0,
        y0_spread,
        slices,
        max_condition,
        picard_bound,
        warnings,
        lambda_clamped,
        batches: if opts.keep_batches { batches } else { Vec::new() },
    }
}

/// Solve the full backward equation on a fresh ensemble of `n_paths` forward
/// paths split into `opts.n_batches` independent batches.
pub fn solve_full_bsde(
    spec: &ModelSpec,
    grid: &GridSpec,
    driver: &Driver,
    n_paths: usize,
    master_seed: u64,
    opts: &SolveOptions,
) -> Result<BsdeSolution> {
    let sizes = batch_sizes(n_paths, opts.n_batches);
    let mut offset = 0usize;
    let mut batches = Vec::with_capacity(sizes.len());
    for sz in sizes {
        let ens = simulate_ensemble(
            spec,
            grid,
            master_seed,
            offset,
            sz,
            true,
            opts.eps_tag,
            opts.stiffness_bound,
        )?;
        batches.push(solve_full_on(
            spec,
            grid,
            ens,
            driver,
            &opts.basis,
            opts.picard_iters,
        )?);
        offset += sz;
    }
    Ok(aggregate(spec, grid, batches, opts, 0))
}

/// Solve the reduced backward equation (slow space only) against a λ map.
pub fn solve_reduced_bsde(
    spec: &ModelSpec,
    grid: &GridSpec,
    lambda: &crate::ergodic::LambdaMap,
    n_paths: usize,
    master_seed: u64,
    opts: &SolveOptions,
) -> Result<BsdeSolution> {
    let sizes = batch_sizes(n_paths, opts.n_batches);
    let mut offset = 0usize;
    let mut batches = Vec::with_capacity(sizes.len());
    let mut clamped = 0usize;
    for sz in sizes {
        let ens = simulate_ensemble(
            spec,
            grid,
            master_seed,
            offset,
            sz,
            false,
            opts.eps_tag,
            opts.stiffness_bound,
        )?;
        let mut local_clamped = 0usize;
        let sol = {
            let mut eval = |x: &DVector<f64>, z: &DVector<f64>, u: &DVector<f64>| {
                let (v, was_clamped) = lambda.eval(x, z, u)?;
                if was_clamped {
                    local_clamped += 1;
                }
                Ok(v)
            };
            solve_reduced_on(spec, grid, ens, &mut eval, &opts.basis)?
        };
        clamped += local_clamped;
        batches.push(sol);
        offset += sz;
    }
    let mut out = aggregate(spec, grid, batches, opts, clamped);
    if clamped > 0 {
        out.warnings.push(format!(
            "lambda cache box did not cover the visited region: {clamped} clamped evaluations"
        ));
    }
    Ok(out)
}

/// The fitted per-slice state-feedback functions of a batch (the Markovian
/// decoder). At the terminal slice the value decoder is the exact terminal
/// cost.
pub fn markovian_decoder(batch: &BatchSolution) -> &FieldDecoders {
    &batch.decoders
}
