//! Noise sampling and simulation of the slow equation, the ε-scaled fast
//! equation, and the ε-free frozen fast equation.
//!
//! Both equations use an exponential integrator: the linear part is applied
//! through the exact semigroup factor `e^{A·dt}` (resp. `e^{B·dt/ε}`), which
//! stays stable as ε → 0 for dissipative generators and reproduces the
//! pathwise contraction rate of the linear flow to machine precision. Jumps
//! arriving inside a step are aggregated at the step boundary while the
//! compensator drift is applied continuously.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{LevyMeasure, ModelSpec};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Accuracy guard on the fast step h = dt/ε.
pub const DEFAULT_STIFFNESS_BOUND: f64 = 0.25;

/// Uniform time grid on [0, horizon].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_steps: usize,
    pub horizon: f64,
}

impl GridSpec {
    pub fn new(n_steps: usize, horizon: f64) -> Self {
        assert!(n_steps >= 1 && horizon > 0.0);
        GridSpec { n_steps, horizon }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt() * k as f64
    }
}

/// One Poisson event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub time: f64,
    pub mark_index: usize,
    /// 1 for ν₁ events, 2 for ν₂ events.
    pub measure_id: u8,
}

/// Sampled Wiener increments and jump records for one path.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    /// d_x × n_steps, each entry N(0, dt).
    pub dw1: DMatrix<f64>,
    /// d_w × n_steps.
    pub dw2: DMatrix<f64>,
    pub jumps1: Vec<JumpRecord>,
    /// Events of the time-rescaled measure: per-unit-time intensity λ_i/ε.
    pub jumps2: Vec<JumpRecord>,
    /// m1 × n_steps per-mark event counts, jumps in (t_k, t_{k+1}] at column k.
    pub counts1: DMatrix<f64>,
    /// m2 × n_steps.
    pub counts2: DMatrix<f64>,
    pub slow_seed: u64,
    pub fast_seed: u64,
}

/// Exponential interarrival sampling of a compound Poisson measure with
/// per-mark rates `rate_scale · λ_i`; marks chosen with probability λ_i/Σλ_j.
pub fn sample_compound_poisson(
    nu: &LevyMeasure,
    rate_scale: f64,
    horizon: f64,
    seed: u64,
    measure_id: u8,
) -> Vec<JumpRecord> {
    let mut rng = stream_rng(seed, Stream::Generic, measure_id as u64);
    sample_compound_poisson_with(nu, rate_scale, horizon, &mut rng, measure_id)
}

fn sample_compound_poisson_with(
    nu: &LevyMeasure,
    rate_scale: f64,
    horizon: f64,
    rng: &mut ChaCha12Rng,
    measure_id: u8,
) -> Vec<JumpRecord> {
    let total = nu.total_rate() * rate_scale;
    let mut out = Vec::new();
    if total <= 0.0 || nu.n_marks() == 0 {
        return out;
    }
    let probs: Vec<f64> = nu.intensities.iter().map(|l| l / nu.total_rate()).collect();
    let mut t = 0.0;
    loop {
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        t -= u.ln() / total;
        if t > horizon {
            break;
        }
        let v: f64 = rng.gen();
        let mut acc = 0.0;
        let mut mark_index = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if v < acc {
                mark_index = i;
                break;
            }
        }
        out.push(JumpRecord {
            time: t,
            mark_index,
            measure_id,
        });
    }
    out
}

fn counts_from(jumps: &[JumpRecord], n_marks: usize, grid: &GridSpec) -> DMatrix<f64> {
    let mut counts = DMatrix::zeros(n_marks, grid.n_steps);
    let dt = grid.dt();
    for j in jumps {
        // Events in (t_k, t_{k+1}] belong to step k.
        let k = ((j.time / dt).ceil() as usize).saturating_sub(1).min(grid.n_steps - 1);
        counts[(j.mark_index, k)] += 1.0;
    }
    counts
}

fn gaussian_increments(rng: &mut ChaCha12Rng, dim: usize, n: usize, dt: f64) -> DMatrix<f64> {
    let s = dt.sqrt();
    DMatrix::from_fn(dim, n, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        s * g
    })
}

/// Sample all noise for one path. The slow sources (W¹, N₁) come from
/// `slow_seed` and the fast sources (W², N₂^ε) from `fast_seed`, so coupled
/// runs can share the slow randomness while the fast randomness varies.
pub fn sample_noise(
    spec: &ModelSpec,
    grid: &GridSpec,
    slow_seed: u64,
    fast_seed: u64,
) -> NoisePath {
    sample_noise_with_eps(spec, grid, slow_seed, fast_seed, spec.epsilon())
}

/// As [`sample_noise`] with an explicit ε for the N₂ rate (the frozen fast
/// equation uses ε = 1).
pub fn sample_noise_with_eps(
    spec: &ModelSpec,
    grid: &GridSpec,
    slow_seed: u64,
    fast_seed: u64,
    eps: f64,
) -> NoisePath {
    let dims = spec.dims();
    let mut slow_rng = stream_rng(slow_seed, Stream::SlowNoise, 0);
    let mut fast_rng = stream_rng(fast_seed, Stream::FastNoise, 0);
    let dw1 = gaussian_increments(&mut slow_rng, dims.d_x, grid.n_steps, grid.dt());
    let jumps1 = sample_compound_poisson_with(spec.nu1(), 1.0, grid.horizon, &mut slow_rng, 1);
    let dw2 = gaussian_increments(&mut fast_rng, dims.d_w, grid.n_steps, grid.dt());
    let jumps2 =
        sample_compound_poisson_with(spec.nu2(), 1.0 / eps, grid.horizon, &mut fast_rng, 2);
    let counts1 = counts_from(&jumps1, dims.m1, grid);
    let counts2 = counts_from(&jumps2, dims.m2, grid);
    NoisePath {
        dw1,
        dw2,
        jumps1,
        jumps2,
        counts1,
        counts2,
        slow_seed,
        fast_seed,
    }
}

fn marks_matrix(nu: &LevyMeasure, dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, nu.n_marks());
    for (i, w) in nu.marks.iter().enumerate() {
        m.set_column(i, w);
    }
    m
}

/// Precomputed one-step propagator of the slow equation.
pub struct SlowStepper {
    exp_a_dt: DMatrix<f64>,
    r: DMatrix<f64>,
    marks1: DMatrix<f64>,
    comp_dt: DVector<f64>,
    d_x: usize,
    n_steps: usize,
}

impl SlowStepper {
    pub fn new(spec: &ModelSpec, grid: &GridSpec) -> Self {
        let dims = spec.dims();
        let dt = grid.dt();
        SlowStepper {
            exp_a_dt: (spec.ops().a.clone() * dt).exp(),
            r: spec.ops().r.clone(),
            marks1: marks_matrix(spec.nu1(), dims.d_x),
            comp_dt: spec.nu1().mean_jump(dims.d_x) * dt,
            d_x: dims.d_x,
            n_steps: grid.n_steps,
        }
    }

    /// Exponential-Euler trajectory, d_x × (n_steps + 1).
    pub fn simulate(&self, x0: &DVector<f64>, noise: &NoisePath) -> Result<DMatrix<f64>> {
        let mut traj = DMatrix::zeros(self.d_x, self.n_steps + 1);
        traj.set_column(0, x0);
        let mut acc = DVector::zeros(self.d_x);
        let mut next = DVector::zeros(self.d_x);
        for k in 0..self.n_steps {
            acc.copy_from(&traj.column(k).into_owned());
            acc.gemv(1.0, &self.r, &noise.dw1.column(k).into_owned(), 1.0);
            if self.marks1.ncols() > 0 {
                acc.gemv(1.0, &self.marks1, &noise.counts1.column(k).into_owned(), 1.0);
            }
            acc -= &self.comp_dt;
            next.gemv(1.0, &self.exp_a_dt, &acc, 0.0);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(CoreError::Overflow("slow trajectory".into()));
            }
            traj.set_column(k + 1, &next);
        }
        Ok(traj)
    }
}

/// Precomputed one-step propagator of the fast equation at scale ε.
pub struct FastStepper {
    exp_b_h: DMatrix<f64>,
    g_scaled: DMatrix<f64>,
    marks2: DMatrix<f64>,
    comp_h: DVector<f64>,
    h: f64,
    d_q: usize,
    n_steps: usize,
}

impl FastStepper {
    pub fn new(spec: &ModelSpec, grid: &GridSpec, stiffness_bound: f64) -> Result<Self> {
        Self::with_eps(spec, grid, spec.epsilon(), stiffness_bound)
    }

    pub fn with_eps(
        spec: &ModelSpec,
        grid: &GridSpec,
        eps: f64,
        stiffness_bound: f64,
    ) -> Result<Self> {
        let dims = spec.dims();
        let h = grid.dt() / eps;
        if h > stiffness_bound {
            return Err(CoreError::StepSizeRejected {
                ratio: h,
                bound: stiffness_bound,
            });
        }
        Ok(FastStepper {
            exp_b_h: (spec.ops().b.clone() * h).exp(),
            g_scaled: spec.ops().g.clone() / eps.sqrt(),
            marks2: marks_matrix(spec.nu2(), dims.d_q),
            comp_h: spec.nu2().mean_jump(dims.d_q) * h,
            h,
            d_q: dims.d_q,
            n_steps: grid.n_steps,
        })
    }

    /// Trajectory of the fast state driven by `noise`, reading the slow state
    /// per step from `x_at` (pass a constant for the frozen equation).
    pub fn simulate(
        &self,
        spec: &ModelSpec,
        q0: &DVector<f64>,
        x_at: impl Fn(usize) -> DVector<f64>,
        noise: &NoisePath,
    ) -> Result<DMatrix<f64>> {
        let mut traj = DMatrix::zeros(self.d_q, self.n_steps + 1);
        traj.set_column(0, q0);
        let mut acc = DVector::zeros(self.d_q);
        let mut fval = DVector::zeros(self.d_q);
        let mut next = DVector::zeros(self.d_q);
        for k in 0..self.n_steps {
            let x_k = x_at(k);
            let q_k = traj.column(k).into_owned();
            spec.coeffs().f.eval_into(&x_k, &q_k, &mut fval);
            acc.copy_from(&q_k);
            acc.axpy(self.h, &fval, 1.0);
            acc.gemv(1.0, &self.g_scaled, &noise.dw2.column(k).into_owned(), 1.0);
            if self.marks2.ncols() > 0 {
                acc.gemv(1.0, &self.marks2, &noise.counts2.column(k).into_owned(), 1.0);
            }
            acc -= &self.comp_h;
            next.gemv(1.0, &self.exp_b_h, &acc, 0.0);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(CoreError::Overflow("fast trajectory".into()));
            }
            traj.set_column(k + 1, &next);
        }
        Ok(traj)
    }
}

/// Slow trajectory for one noise path.
pub fn simulate_slow(spec: &ModelSpec, grid: &GridSpec, noise: &NoisePath) -> Result<DMatrix<f64>> {
    SlowStepper::new(spec, grid).simulate(spec.x0(), noise)
}

/// Fast trajectory coupled to a given slow trajectory.
pub fn simulate_fast(
    spec: &ModelSpec,
    grid: &GridSpec,
    noise: &NoisePath,
    x_path: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let stepper = FastStepper::new(spec, grid, DEFAULT_STIFFNESS_BOUND)?;
    let x_path = x_path.clone();
    stepper.simulate(spec, spec.q0(), move |k| x_path.column(k).into_owned(), noise)
}

/// Frozen fast equation on its own clock (ε-free): noise at the unscaled ν₂
/// rate, slow argument held at `frozen_x`, initial point `q_init`.
pub fn simulate_frozen_fast(
    spec: &ModelSpec,
    frozen_x: &DVector<f64>,
    q_init: &DVector<f64>,
    grid: &GridSpec,
    seed: u64,
) -> Result<(DMatrix<f64>, NoisePath)> {
    let noise = sample_noise_with_eps(spec, grid, seed, seed, 1.0);
    let stepper = FastStepper::with_eps(spec, grid, 1.0, DEFAULT_STIFFNESS_BOUND)?;
    let x = frozen_x.clone();
    let traj = stepper.simulate(spec, q_init, move |_| x.clone(), &noise)?;
    Ok((traj, noise))
}

/// Couple two frozen fast trajectories started at `q` and `q_prime` through
/// one common noise path; return the worst ratio
/// |ΔQ̂_t| / (e^{−μ t} |q − q′|) over the grid.
pub fn contraction_check(
    spec: &ModelSpec,
    q: &DVector<f64>,
    q_prime: &DVector<f64>,
    frozen_x: &DVector<f64>,
    grid: &GridSpec,
    seed: u64,
    mu: f64,
) -> Result<f64> {
    let noise = sample_noise_with_eps(spec, grid, seed, seed, 1.0);
    let stepper = FastStepper::with_eps(spec, grid, 1.0, DEFAULT_STIFFNESS_BOUND)?;
    let x = frozen_x.clone();
    let xc = x.clone();
    let a = stepper.simulate(spec, q, move |_| x.clone(), &noise)?;
    let b = stepper.simulate(spec, q_prime, move |_| xc.clone(), &noise)?;
    let d0 = (q - q_prime).norm();
    if d0 == 0.0 {
        let max_gap = (0..=grid.n_steps)
            .map(|k| (a.column(k) - b.column(k)).norm())
            .fold(0.0f64, f64::max);
        return Ok(if max_gap == 0.0 { 0.0 } else { f64::INFINITY });
    }
    let mut worst: f64 = 0.0;
    for k in 0..=grid.n_steps {
        let gap = (a.column(k) - b.column(k)).norm();
        let bound = (-mu * grid.time(k)).exp() * d0;
        worst = worst.max(gap / bound);
    }
    Ok(worst)
}

/// Smallest κ̂ with |Q_T − Q′_T| ≤ κ̂ ∫₀^T e^{−μ(T−s)} |Γ_s − Γ′_s| ds at all
/// grid times, for two frozen-clock runs driven by the input trajectories
/// Γ, Γ′ (d_x × (n_steps + 1)) under common noise.
pub fn estimate_kappa(
    spec: &ModelSpec,
    gamma_path: &DMatrix<f64>,
    gamma_prime_path: &DMatrix<f64>,
    grid: &GridSpec,
    seed: u64,
    mu: f64,
) -> Result<f64> {
    let noise = sample_noise_with_eps(spec, grid, seed, seed, 1.0);
    let stepper = FastStepper::with_eps(spec, grid, 1.0, DEFAULT_STIFFNESS_BOUND)?;
    let g1 = gamma_path.clone();
    let g2 = gamma_prime_path.clone();
    let a = stepper.simulate(spec, spec.q0(), move |k| g1.column(k).into_owned(), &noise)?;
    let b = stepper.simulate(spec, spec.q0(), move |k| g2.column(k).into_owned(), &noise)?;
    let dt = grid.dt();
    let mut kappa: f64 = 0.0;
    for n in 1..=grid.n_steps {
        let num = (a.column(n) - b.column(n)).norm();
        let t_n = grid.time(n);
        let mut denom = 0.0;
        for k in 0..n {
            let dg = (gamma_path.column(k) - gamma_prime_path.column(k)).norm();
            denom += (-mu * (t_n - grid.time(k))).exp() * dg * dt;
        }
        if denom > 1e-14 {
            kappa = kappa.max(num / denom);
        }
    }
    Ok(kappa)
}

/// Per-slice ensemble layout used by the regression solvers: slice `k` holds
/// a (dim × n_paths) matrix.
pub struct Ensemble {
    pub grid: GridSpec,
    pub n_paths: usize,
    /// Slow states, n_steps + 1 slices.
    pub x: Option<Vec<DMatrix<f64>>>,
    /// Fast states, n_steps + 1 slices.
    pub q: Option<Vec<DMatrix<f64>>>,
    /// W¹ increments, n_steps slices.
    pub dw1: Option<Vec<DMatrix<f64>>>,
    pub dw2: Option<Vec<DMatrix<f64>>>,
    /// ν₁ jump counts per mark, n_steps slices.
    pub n1: Option<Vec<DMatrix<f64>>>,
    pub n2: Option<Vec<DMatrix<f64>>>,
}

fn to_slices(paths: &[DMatrix<f64>], n_cols: usize) -> Vec<DMatrix<f64>> {
    let dim = paths[0].nrows();
    (0..n_cols)
        .map(|k| {
            let mut m = DMatrix::zeros(dim, paths.len());
            for (p, traj) in paths.iter().enumerate() {
                m.set_column(p, &traj.column(k));
            }
            m
        })
        .collect()
}

/// Simulate a batch of forward paths under the reference measure.
///
/// Slow noise seeds depend only on the global path index, so runs at
/// different ε (distinguished by `eps_tag`) share slow randomness.
pub fn simulate_ensemble(
    spec: &ModelSpec,
    grid: &GridSpec,
    master_seed: u64,
    path_offset: usize,
    n_paths: usize,
    with_fast: bool,
    eps_tag: u64,
    stiffness_bound: f64,
) -> Result<Ensemble> {
    let fast_stepper = if with_fast {
        Some(FastStepper::new(spec, grid, stiffness_bound)?)
    } else {
        None
    };
    let slow_stepper = SlowStepper::new(spec, grid);

    struct PathOut {
        x: DMatrix<f64>,
        q: Option<DMatrix<f64>>,
        noise: NoisePath,
    }

    let results: Vec<Result<PathOut>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let idx = (path_offset + p) as u64;
            let slow_seed = derive_seed(master_seed, Stream::SlowNoise, idx);
            let fast_seed =
                derive_seed(master_seed, Stream::FastNoise, idx.wrapping_add(eps_tag << 40));
            let noise = sample_noise(spec, grid, slow_seed, fast_seed);
            let x = slow_stepper.simulate(spec.x0(), &noise)?;
            let q = match &fast_stepper {
                Some(st) => {
                    let xv = x.clone();
                    Some(st.simulate(spec, spec.q0(), move |k| xv.column(k).into_owned(), &noise)?)
                }
                None => None,
            };
            Ok(PathOut { x, q, noise })
        })
        .collect();

    let mut xs = Vec::with_capacity(n_paths);
    let mut qs = Vec::with_capacity(n_paths);
    let mut dw1s = Vec::with_capacity(n_paths);
    let mut dw2s = Vec::with_capacity(n_paths);
    let mut n1s = Vec::with_capacity(n_paths);
    let mut n2s = Vec::with_capacity(n_paths);
    for r in results {
        let out = r?;
        xs.push(out.x);
        dw1s.push(out.noise.dw1);
        n1s.push(out.noise.counts1);
        if with_fast {
            qs.push(out.q.expect("fast trajectory present"));
            dw2s.push(out.noise.dw2);
            n2s.push(out.noise.counts2);
        }
    }

    Ok(Ensemble {
        grid: *grid,
        n_paths,
        x: Some(to_slices(&xs, grid.n_steps + 1)),
        q: if with_fast {
            Some(to_slices(&qs, grid.n_steps + 1))
        } else {
            None
        },
        dw1: Some(to_slices(&dw1s, grid.n_steps)),
        dw2: if with_fast {
            Some(to_slices(&dw2s, grid.n_steps))
        } else {
            None
        },
        n1: Some(to_slices(&n1s, grid.n_steps)),
        n2: if with_fast {
            Some(to_slices(&n2s, grid.n_steps))
        } else {
            None
        },
    })
}

/// Simulate a batch of frozen fast paths (ε-free clock) from dispersed
/// initial points, for the ergodic solver. Only fast fields are populated.
pub fn simulate_frozen_ensemble(
    spec: &ModelSpec,
    frozen_x: &DVector<f64>,
    q_inits: &[DVector<f64>],
    grid: &GridSpec,
    master_seed: u64,
    path_offset: usize,
) -> Result<Ensemble> {
    let stepper = FastStepper::with_eps(spec, grid, 1.0, DEFAULT_STIFFNESS_BOUND)?;
    let n_paths = q_inits.len();

    let results: Vec<Result<(DMatrix<f64>, NoisePath)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let idx = (path_offset + p) as u64;
            let seed = derive_seed(master_seed, Stream::Ergodic, idx);
            let noise = sample_noise_with_eps(spec, grid, seed, seed, 1.0);
            let x = frozen_x.clone();
            let q = stepper.simulate(spec, &q_inits[p], move |_| x.clone(), &noise)?;
            Ok((q, noise))
        })
        .collect();

    let mut qs = Vec::with_capacity(n_paths);
    let mut dw2s = Vec::with_capacity(n_paths);
    let mut n2s = Vec::with_capacity(n_paths);
    for r in results {
        let (q, noise) = r?;
        qs.push(q);
        dw2s.push(noise.dw2);
        n2s.push(noise.counts2);
    }

    Ok(Ensemble {
        grid: *grid,
        n_paths,
        x: None,
        q: Some(to_slices(&qs, grid.n_steps + 1)),
        dw1: None,
        dw2: Some(to_slices(&dw2s, grid.n_steps)),
        n1: None,
        n2: Some(to_slices(&n2s, grid.n_steps)),
    })
}

#[cfg(test)]
mod tests;
