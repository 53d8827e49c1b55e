//! Empirical checkers for the structural assumptions: dissipativity of the
//! fast drift and the declared Lipschitz/bound constants. Both are pure given
//! a seed.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{AssumptionReport, ModelSpec};
use crate::rng::{stream_rng, Stream};

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        scale * g
    })
}

/// Sample triples (x, q, q′) and report the worst dissipativity ratio
/// −⟨BΔq + F(x,q) − F(x,q′), Δq⟩ / |Δq|².
///
/// `mu_hat` is the minimum over samples; a nonpositive ratio counts as a
/// violation.
pub fn check_dissipativity(spec: &ModelSpec, n_samples: usize, rng_seed: u64) -> AssumptionReport {
    let dims = spec.dims();
    let b = &spec.ops().b;
    let mut rng = stream_rng(rng_seed, Stream::Checker, 0);
    let mut mu_hat = f64::INFINITY;
    let mut violations = 0usize;
    let mut fq = DVector::zeros(dims.d_q);
    let mut fq2 = DVector::zeros(dims.d_q);
    for _ in 0..n_samples {
        let x = gaussian_vec(&mut rng, dims.d_x, 2.0);
        let q = gaussian_vec(&mut rng, dims.d_q, 2.0);
        let mut dq = gaussian_vec(&mut rng, dims.d_q, 1.0);
        if dq.norm() < 1e-12 {
            dq[0] += 1.0;
        }
        let q2 = &q + &dq;
        spec.coeffs().f.eval_into(&x, &q, &mut fq);
        spec.coeffs().f.eval_into(&x, &q2, &mut fq2);
        // Δdrift paired with Δq = q − q2 = −dq; dissipativity asks
        // ⟨Δdrift, Δq⟩ ≤ −μ|Δq|².
        let drift_diff = b * &q + &fq - (b * &q2 + &fq2);
        let value = drift_diff.dot(&dq) / dq.norm_squared();
        if value <= 0.0 {
            violations += 1;
        }
        if value < mu_hat {
            mu_hat = value;
        }
    }
    AssumptionReport {
        mu_hat,
        lipschitz_violations: 0,
        bound_violations: violations,
        samples_used: n_samples,
    }
}

/// Dense 1-D scan of the dissipativity ratio over a grid of (q, q′) pairs;
/// oracle companion to the sampled checker for d_q = 1.
pub fn dissipativity_scan_1d(spec: &ModelSpec, lo: f64, hi: f64, n_grid: usize) -> f64 {
    assert_eq!(spec.dims().d_q, 1, "dense scan requires d_q = 1");
    let b = spec.ops().b[(0, 0)];
    let x = spec.x0().clone();
    let mut worst = f64::INFINITY;
    let mut fq = DVector::zeros(1);
    let mut fq2 = DVector::zeros(1);
    for i in 0..n_grid {
        for j in 0..n_grid {
            if i == j {
                continue;
            }
            let q = lo + (hi - lo) * i as f64 / (n_grid - 1) as f64;
            let q2 = lo + (hi - lo) * j as f64 / (n_grid - 1) as f64;
            spec.coeffs().f.eval_into(&x, &DVector::from_element(1, q), &mut fq);
            spec.coeffs()
                .f
                .eval_into(&x, &DVector::from_element(1, q2), &mut fq2);
            let num = (b * q + fq[0] - b * q2 - fq2[0]) * (q - q2);
            let ratio = -num / ((q - q2) * (q - q2));
            if ratio < worst {
                worst = ratio;
            }
        }
    }
    worst
}

/// Verify the declared Lipschitz constants and bounds on sampled pairs.
pub fn check_lipschitz_bounds(
    spec: &ModelSpec,
    n_samples: usize,
    rng_seed: u64,
) -> AssumptionReport {
    let dims = spec.dims();
    let c = spec.coeffs();
    let bounds = &c.bounds;
    let mut rng = stream_rng(rng_seed, Stream::Checker, 1);
    let mut lip = 0usize;
    let mut bnd = 0usize;
    let slack = 1e-9;

    let n_controls = dims.n_controls.max(1);
    let mut f1 = DVector::zeros(dims.d_q);
    let mut f2 = DVector::zeros(dims.d_q);
    for _ in 0..n_samples {
        let x = gaussian_vec(&mut rng, dims.d_x, 2.0);
        let x2 = gaussian_vec(&mut rng, dims.d_x, 2.0);
        let q = gaussian_vec(&mut rng, dims.d_q, 2.0);
        let q2 = gaussian_vec(&mut rng, dims.d_q, 2.0);
        let denom = (&x - &x2).norm() + (&q - &q2).norm();
        let a_idx = rng.gen_range(0..n_controls).min(dims.n_controls.saturating_sub(1));

        // (HF): |F(x,q) − F(x′,q′)| ≤ L_F (|x−x′| + |q−q′|).
        c.f.eval_into(&x, &q, &mut f1);
        c.f.eval_into(&x2, &q2, &mut f2);
        if denom > 1e-12 && (&f1 - &f2).norm() > bounds.lip_f * denom + slack {
            lip += 1;
        }

        if dims.n_controls > 0 {
            let b1 = c.b_drift.eval(&x, &q, a_idx, dims.d_x);
            let b2 = c.b_drift.eval(&x2, &q2, a_idx, dims.d_x);
            if denom > 1e-12 && (&b1 - &b2).norm() > bounds.lip_b * denom + slack {
                lip += 1;
            }
            if b1.norm() > bounds.m_prime + slack {
                bnd += 1;
            }
            let rho = c.rho.eval(a_idx, dims.d_w);
            if rho.norm() > bounds.m_prime + slack {
                bnd += 1;
            }

            for mark in 0..dims.m1.max(1) {
                let mark_idx = mark.min(dims.m1.saturating_sub(1));
                let r1 = c.r_intensity.eval(&x, a_idx, mark_idx);
                let r2 = c.r_intensity.eval(&x2, a_idx, mark_idx);
                if r1 < bounds.eta - slack || r1 > bounds.c_r + slack {
                    bnd += 1;
                }
                if denom > 1e-12 && (r1 - r2).abs() > bounds.lip_r * denom + slack {
                    lip += 1;
                }
                if dims.m1 == 0 {
                    break;
                }
            }
            for mark in 0..dims.m2 {
                let g1 = c.gamma_intensity.eval(&x, a_idx, mark);
                if g1 < bounds.eta_prime - slack || g1 > bounds.c_gamma + slack {
                    bnd += 1;
                }
            }

            let l1 = c.l.eval(&x, &q, a_idx);
            let l2 = c.l.eval(&x2, &q2, a_idx);
            if denom > 1e-12 && (l1 - l2).abs() > bounds.lip_l * denom + slack {
                lip += 1;
            }
            if l1.abs() > bounds.m_l + slack {
                bnd += 1;
            }
        }

        let h1 = c.h.eval(&x);
        let h2 = c.h.eval(&x2);
        let dx = (&x - &x2).norm();
        if dx > 1e-12 && (h1 - h2).abs() > bounds.lip_h * dx + slack {
            lip += 1;
        }
        if h1.abs() > bounds.m_h + slack {
            bnd += 1;
        }
    }

    AssumptionReport {
        mu_hat: f64::NAN,
        lipschitz_violations: lip,
        bound_violations: bnd,
        samples_used: n_samples,
    }
}
