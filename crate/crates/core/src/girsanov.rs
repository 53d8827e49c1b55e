//! Doléans-Dade exponentials and measure-change reweighting.
//!
//! For uniformly bounded Wiener integrands β and positive jump multipliers Γ,
//! the log-weight over one path is
//!
//! ```text
//! log 𝓔_T = Σ β·ΔW − ½ Σ |β|² dt + Σ (1 − Γ) ν dt + Σ_{jumps} log Γ
//! ```
//!
//! evaluated predictably (left step endpoint) and with the simulation's own
//! increments, which makes the discrete weight an exact martingale: each
//! Gaussian factor has unit conditional mean, and conditional on the state
//! the per-step jump factor is E[Γ^N]·e^{(1−Γ)λdt} = 1.

use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::forward::{Ensemble, GridSpec, NoisePath};
use crate::model::ModelSpec;
use crate::util;

/// Predictable Wiener integrand: (t, x, q) → covector entries.
pub type StateFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// Predictable jump-intensity multiplier: (t, x, q, mark) → positive scalar.
pub type MarkFn = Arc<dyn Fn(f64, &[f64], &[f64], usize) -> f64 + Send + Sync>;
/// Feedback policy: (t, x, q) → control index.
pub type PolicyFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> usize + Send + Sync>;

/// Declared sup-bounds of a tilt, used by the integrability check.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TiltBounds {
    pub beta1_sup: f64,
    pub beta2_sup: f64,
    /// Per-mark max |Γ − 1| on ν₁.
    pub gamma1_dev: Vec<f64>,
    pub gamma1_min: f64,
    pub gamma2_dev: Vec<f64>,
    pub gamma2_min: f64,
}

impl TiltBounds {
    fn identity(m1: usize, m2: usize) -> Self {
        TiltBounds {
            beta1_sup: 0.0,
            beta2_sup: 0.0,
            gamma1_dev: vec![0.0; m1],
            gamma1_min: 1.0,
            gamma2_dev: vec![0.0; m2],
            gamma2_min: 1.0,
        }
    }
}

/// A measure change acting on any subset of (W¹, W², N₁, N₂^ε).
#[derive(Clone)]
pub struct GirsanovSpec {
    pub beta1: Option<StateFn>,
    pub beta2: Option<StateFn>,
    pub gamma1: Option<MarkFn>,
    pub gamma2: Option<MarkFn>,
    pub bounds: TiltBounds,
}

impl GirsanovSpec {
    pub fn identity(spec: &ModelSpec) -> Self {
        let d = spec.dims();
        GirsanovSpec {
            beta1: None,
            beta2: None,
            gamma1: None,
            gamma2: None,
            bounds: TiltBounds::identity(d.m1, d.m2),
        }
    }

    pub fn with_beta1_const(mut self, v: DVector<f64>) -> Self {
        self.bounds.beta1_sup = v.norm();
        let vv: Vec<f64> = v.iter().copied().collect();
        self.beta1 = Some(Arc::new(move |_, _, _| vv.clone()));
        self
    }

    pub fn with_beta2_const(mut self, v: DVector<f64>) -> Self {
        self.bounds.beta2_sup = v.norm();
        let vv: Vec<f64> = v.iter().copied().collect();
        self.beta2 = Some(Arc::new(move |_, _, _| vv.clone()));
        self
    }

    pub fn with_gamma1_const(mut self, g: f64) -> Self {
        for d in self.bounds.gamma1_dev.iter_mut() {
            *d = (g - 1.0).abs();
        }
        self.bounds.gamma1_min = g;
        self.gamma1 = Some(Arc::new(move |_, _, _, _| g));
        self
    }

    pub fn with_gamma2_const(mut self, g: f64) -> Self {
        for d in self.bounds.gamma2_dev.iter_mut() {
            *d = (g - 1.0).abs();
        }
        self.bounds.gamma2_min = g;
        self.gamma2 = Some(Arc::new(move |_, _, _, _| g));
        self
    }

    /// Per-mark multipliers on ν₁.
    pub fn with_gamma1_marks(mut self, gs: Vec<f64>) -> Self {
        self.bounds.gamma1_dev = gs.iter().map(|g| (g - 1.0).abs()).collect();
        self.bounds.gamma1_min = gs.iter().copied().fold(f64::INFINITY, f64::min);
        self.gamma1 = Some(Arc::new(move |_, _, _, mark| gs[mark]));
        self
    }
}

/// Per-jump multiplicative record of a weight path.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct JumpFactor {
    pub step: usize,
    pub measure_id: u8,
    pub mark_index: usize,
    pub count: u64,
    pub factor: f64,
}

/// log 𝓔_t trajectory plus the jump record.
#[derive(Clone, Debug)]
pub struct WeightPath {
    pub log_weight: Vec<f64>,
    pub jump_factors: Vec<JumpFactor>,
    pub min_jump_factor: f64,
}

impl WeightPath {
    pub fn terminal(&self) -> f64 {
        self.log_weight.last().copied().unwrap_or(0.0)
    }
}

struct StepTerms<'a> {
    spec: &'a ModelSpec,
    tilt: &'a GirsanovSpec,
    dt: f64,
    eps: f64,
}

impl StepTerms<'_> {
    /// Log-weight increment over step k given the left-endpoint state and the
    /// step's increments; optionally records jump factors.
    #[allow(clippy::too_many_arguments)]
    fn increment(
        &self,
        k: usize,
        t: f64,
        x: &[f64],
        q: &[f64],
        dw1: Option<&[f64]>,
        dw2: Option<&[f64]>,
        counts1: &[f64],
        counts2: &[f64],
        factors: Option<&mut Vec<JumpFactor>>,
        min_factor: &mut f64,
    ) -> Result<f64> {
        let mut inc = 0.0;
        if let (Some(beta), Some(dw)) = (&self.tilt.beta1, dw1) {
            let b = beta(t, x, q);
            for (bi, dwi) in b.iter().zip(dw) {
                inc += bi * dwi - 0.5 * bi * bi * self.dt;
            }
        }
        if let (Some(beta), Some(dw)) = (&self.tilt.beta2, dw2) {
            let b = beta(t, x, q);
            for (bi, dwi) in b.iter().zip(dw) {
                inc += bi * dwi - 0.5 * bi * bi * self.dt;
            }
        }
        let mut local_factors: Vec<JumpFactor> = Vec::new();
        if let Some(gamma) = &self.tilt.gamma1 {
            for (i, lam) in self.spec.nu1().intensities.iter().enumerate() {
                let g = gamma(t, x, q, i);
                if g <= 0.0 {
                    return Err(CoreError::NonpositiveJumpTilt(g));
                }
                inc += (1.0 - g) * lam * self.dt;
                let c = counts1[i];
                if c > 0.0 {
                    inc += c * g.ln();
                    *min_factor = min_factor.min(g);
                    local_factors.push(JumpFactor {
                        step: k,
                        measure_id: 1,
                        mark_index: i,
                        count: c as u64,
                        factor: g,
                    });
                }
            }
        }
        if let Some(gamma) = &self.tilt.gamma2 {
            for (j, lam) in self.spec.nu2().intensities.iter().enumerate() {
                let g = gamma(t, x, q, j);
                if g <= 0.0 {
                    return Err(CoreError::NonpositiveJumpTilt(g));
                }
                inc += (1.0 - g) * lam / self.eps * self.dt;
                let c = counts2[j];
                if c > 0.0 {
                    inc += c * g.ln();
                    *min_factor = min_factor.min(g);
                    local_factors.push(JumpFactor {
                        step: k,
                        measure_id: 2,
                        mark_index: j,
                        count: c as u64,
                        factor: g,
                    });
                }
            }
        }
        if let Some(fs) = factors {
            fs.extend(local_factors);
        }
        Ok(inc)
    }
}

/// Full Doléans-Dade trajectory for one path. `x_path`/`q_path` are the
/// simulated states (left endpoints feed the predictable integrands) and the
/// continuous part reuses the path's own Wiener increments verbatim.
pub fn doleans_dade(
    spec: &ModelSpec,
    tilt: &GirsanovSpec,
    grid: &GridSpec,
    x_path: &nalgebra::DMatrix<f64>,
    q_path: Option<&nalgebra::DMatrix<f64>>,
    noise: &NoisePath,
) -> Result<WeightPath> {
    let terms = StepTerms {
        spec,
        tilt,
        dt: grid.dt(),
        eps: spec.epsilon(),
    };
    let mut log_weight = Vec::with_capacity(grid.n_steps + 1);
    log_weight.push(0.0);
    let mut factors = Vec::new();
    let mut min_factor = f64::INFINITY;
    let empty: Vec<f64> = Vec::new();
    for k in 0..grid.n_steps {
        let x = x_path.column(k);
        let q_col;
        let q: &[f64] = match q_path {
            Some(qp) => {
                q_col = qp.column(k);
                q_col.as_slice()
            }
            None => &empty,
        };
        let inc = terms.increment(
            k,
            grid.time(k),
            x.as_slice(),
            q,
            Some(noise.dw1.column(k).as_slice()),
            Some(noise.dw2.column(k).as_slice()),
            noise.counts1.column(k).as_slice(),
            noise.counts2.column(k).as_slice(),
            Some(&mut factors),
            &mut min_factor,
        )?;
        log_weight.push(log_weight[k] + inc);
    }
    Ok(WeightPath {
        log_weight,
        jump_factors: factors,
        min_jump_factor: if min_factor.is_finite() {
            min_factor
        } else {
            1.0
        },
    })
}

/// Terminal log-weights for every path of an ensemble.
pub fn terminal_log_weights(
    spec: &ModelSpec,
    tilt: &GirsanovSpec,
    ensemble: &Ensemble,
) -> Result<Vec<f64>> {
    let grid = &ensemble.grid;
    let terms = StepTerms {
        spec,
        tilt,
        dt: grid.dt(),
        eps: spec.epsilon(),
    };
    let xs = ensemble
        .x
        .as_ref()
        .ok_or_else(|| CoreError::Invalid("ensemble lacks slow states".into()))?;
    let n1 = ensemble
        .n1
        .as_ref()
        .ok_or_else(|| CoreError::Invalid("ensemble lacks N1 counts".into()))?;
    let dims = spec.dims();
    let needs_fast_states = tilt.beta2.is_some() || tilt.gamma2.is_some();
    let mut out = vec![0.0f64; ensemble.n_paths];
    let empty: Vec<f64> = Vec::new();
    let zero_counts2 = vec![0.0f64; dims.m2];
    for p in 0..ensemble.n_paths {
        let mut acc = 0.0;
        let mut min_factor = f64::INFINITY;
        for k in 0..grid.n_steps {
            let x = xs[k].column(p);
            let q_col;
            let q: &[f64] = match &ensemble.q {
                Some(qs) => {
                    q_col = qs[k].column(p);
                    q_col.as_slice()
                }
                None => {
                    if needs_fast_states {
                        return Err(CoreError::Invalid(
                            "tilt reads fast sources but the ensemble has none".into(),
                        ));
                    }
                    &empty
                }
            };
            let dw1_col = ensemble.dw1.as_ref().map(|d| d[k].column(p));
            let dw2_col = ensemble.dw2.as_ref().map(|d| d[k].column(p));
            let c2_col;
            let counts2: &[f64] = match &ensemble.n2 {
                Some(n2) => {
                    c2_col = n2[k].column(p);
                    c2_col.as_slice()
                }
                None => &zero_counts2,
            };
            // Column views of col-major matrices are contiguous.
            let counts1_col = n1[k].column(p);
            acc += terms.increment(
                k,
                grid.time(k),
                x.as_slice(),
                q,
                dw1_col.as_ref().map(|c| c.as_slice()),
                dw2_col.as_ref().map(|c| c.as_slice()),
                counts1_col.as_slice(),
                counts2,
                None,
                &mut min_factor,
            )?;
        }
        out[p] = acc;
    }
    Ok(out)
}

/// Weighted Monte Carlo mean E[𝓔_T · f].
#[derive(Clone, Debug, Serialize)]
pub struct Reweighted {
    pub estimate: f64,
    pub se: f64,
    /// Effective sample size (Σw)²/Σw².
    pub ess: f64,
    pub ess_warning: bool,
}

/// Estimate the tilted expectation of a path functional over an ensemble
/// simulated under the reference measure.
pub fn reweighted_mean(
    spec: &ModelSpec,
    tilt: &GirsanovSpec,
    ensemble: &Ensemble,
    f: &dyn Fn(usize) -> f64,
) -> Result<Reweighted> {
    let logw = terminal_log_weights(spec, tilt, ensemble)?;
    let weights: Vec<f64> = logw.iter().map(|l| l.exp()).collect();
    let prods: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(p, w)| w * f(p))
        .collect();
    let (estimate, se) = util::mean_se(&prods);
    let sw: f64 = weights.iter().sum();
    let sw2: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };
    let ess_warning = ess < 0.1 * ensemble.n_paths as f64;
    if ess_warning {
        log::warn!(
            "effective sample size {:.1} below 10% of {} paths",
            ess,
            ensemble.n_paths
        );
    }
    Ok(Reweighted {
        estimate,
        se,
        ess,
        ess_warning,
    })
}

/// Integrability certificate of Corollary-style exponent
/// ½‖β‖²_∞·T + ‖Γ−1‖_{L²(ν)}·T per source; passes when finite and the jump
/// multipliers stay away from zero.
#[derive(Clone, Debug, Serialize)]
pub struct UiReport {
    pub exponent: f64,
    pub gamma_min: f64,
    pub pass: bool,
}

pub fn check_uniform_integrability(
    spec: &ModelSpec,
    bounds: &TiltBounds,
    horizon: f64,
) -> UiReport {
    let eps = spec.epsilon();
    let beta_sq = 0.5 * (bounds.beta1_sup.powi(2) + bounds.beta2_sup.powi(2)) * horizon;
    let jump1: f64 = bounds
        .gamma1_dev
        .iter()
        .zip(&spec.nu1().intensities)
        .map(|(d, l)| d * d * l)
        .sum::<f64>()
        .sqrt()
        * horizon;
    let jump2: f64 = bounds
        .gamma2_dev
        .iter()
        .zip(&spec.nu2().intensities)
        .map(|(d, l)| d * d * l / eps)
        .sum::<f64>()
        .sqrt()
        * horizon;
    let exponent = beta_sq + jump1 + jump2;
    let gamma_min = bounds.gamma1_min.min(bounds.gamma2_min);
    UiReport {
        exponent,
        gamma_min,
        pass: exponent.is_finite() && gamma_min > 0.0,
    }
}

/// The control-induced measure change: β₁ = R⁻¹b, Γ₁ = r, β₂ = ρ/√ε, Γ₂ = γ
/// along the path under the feedback `policy`.
pub fn control_measure(spec: &ModelSpec, policy: PolicyFn, epsilon: f64) -> GirsanovSpec {
    let dims = spec.dims();
    let s1 = Arc::new(spec.clone());
    let s2 = s1.clone();
    let s3 = s1.clone();
    let s4 = s1.clone();
    let p1 = policy.clone();
    let p2 = policy.clone();
    let p3 = policy.clone();
    let p4 = policy;
    let sqrt_eps = epsilon.sqrt();

    let beta1: StateFn = Arc::new(move |t, x, q| {
        let a = p1(t, x, q);
        let xv = DVector::from_row_slice(x);
        let qv = DVector::from_row_slice(q);
        let b = s1.coeffs().b_drift.eval(&xv, &qv, a, s1.dims().d_x);
        (s1.r_inv() * b).iter().copied().collect()
    });
    let beta2: StateFn = Arc::new(move |t, x, q| {
        let a = p2(t, x, q);
        let rho = s2.coeffs().rho.eval(a, s2.dims().d_w);
        rho.iter().map(|v| v / sqrt_eps).collect()
    });
    let gamma1: MarkFn = Arc::new(move |t, x, q, mark| {
        let a = p3(t, x, q);
        let xv = DVector::from_row_slice(x);
        s3.coeffs().r_intensity.eval(&xv, a, mark)
    });
    let gamma2: MarkFn = Arc::new(move |t, x, q, mark| {
        let a = p4(t, x, q);
        let xv = DVector::from_row_slice(x);
        s4.coeffs().gamma_intensity.eval(&xv, a, mark)
    });

    let b = &spec.coeffs().bounds;
    let bounds = TiltBounds {
        beta1_sup: spec.r_inv().norm() * b.m_prime,
        beta2_sup: b.m_prime / sqrt_eps,
        gamma1_dev: vec![(b.c_r - 1.0).max(1.0 - b.eta); dims.m1],
        gamma1_min: b.eta,
        gamma2_dev: vec![(b.c_gamma - 1.0).max(1.0 - b.eta_prime); dims.m2],
        gamma2_min: b.eta_prime,
    };

    GirsanovSpec {
        beta1: Some(beta1),
        beta2: Some(beta2),
        gamma1: Some(gamma1),
        gamma2: Some(gamma2),
        bounds,
    }
}

/// Dual-style tilt: piecewise-constant (p, v) schedules over `cells` equal
/// time cells; W¹ drifts by −p and N₁'s compensator becomes v·ν₁.
pub fn dual_tilt(
    spec: &ModelSpec,
    p_cells: Vec<DVector<f64>>,
    v_cells: Vec<Vec<f64>>,
    horizon: f64,
) -> GirsanovSpec {
    let dims = spec.dims();
    let n_cells = p_cells.len().max(1);
    let cell_len = horizon / n_cells as f64;
    let beta1_sup = p_cells.iter().map(|p| p.norm()).fold(0.0f64, f64::max);
    let mut gamma1_dev = vec![0.0f64; dims.m1];
    let mut gamma1_min = f64::INFINITY;
    for vc in &v_cells {
        for (i, v) in vc.iter().enumerate() {
            gamma1_dev[i] = gamma1_dev[i].max((v - 1.0).abs());
            gamma1_min = gamma1_min.min(*v);
        }
    }
    if !gamma1_min.is_finite() {
        gamma1_min = 1.0;
    }
    let pc = p_cells;
    let vc = v_cells;
    let beta1: StateFn = Arc::new(move |t, _, _| {
        let c = ((t / cell_len).floor() as usize).min(pc.len() - 1);
        pc[c].iter().map(|v| -v).collect()
    });
    let gamma1: Option<MarkFn> = if vc.is_empty() {
        None
    } else {
        let cl = cell_len;
        Some(Arc::new(move |t, _, _, mark| {
            let c = ((t / cl).floor() as usize).min(vc.len() - 1);
            vc[c][mark]
        }))
    };
    GirsanovSpec {
        beta1: Some(beta1),
        beta2: None,
        gamma1,
        gamma2: None,
        bounds: TiltBounds {
            beta1_sup,
            beta2_sup: 0.0,
            gamma1_dev,
            gamma1_min,
            gamma2_dev: vec![0.0; dims.m2],
            gamma2_min: 1.0,
        },
    }
}
