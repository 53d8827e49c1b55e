//! Drivers of the backward equations.
//!
//! The control Hamiltonian is the pointwise minimum over the finite control
//! set of running cost plus control-induced drift and intensity terms. The
//! affine family covers the closed-form test problems (constant drivers,
//! linear z-terms, |z|-terms, fast-state monomials) while still satisfying
//! the structural hypotheses when its jump coefficients stay above −1.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::ModelSpec;
use crate::rng::{stream_rng, Stream};

/// Arguments of the driver ψ(x, q, z, ζ, u(·), θ(·)). With finite-support
/// Lévy measures the function arguments u(·), θ(·) are mark-indexed vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverInput {
    pub x: DVector<f64>,
    pub q: DVector<f64>,
    /// Integrand against W¹, dimension d_x.
    pub z: DVector<f64>,
    /// Integrand against W², dimension d_w.
    pub zeta: DVector<f64>,
    /// Integrand against Ñ₁, one entry per ν₁ mark.
    pub u: DVector<f64>,
    /// Integrand against Ñ₂, one entry per ν₂ mark.
    pub theta: DVector<f64>,
}

impl DriverInput {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.dims();
        DriverInput {
            x: DVector::zeros(d.d_x),
            q: DVector::zeros(d.d_q),
            z: DVector::zeros(d.d_x),
            zeta: DVector::zeros(d.d_w),
            u: DVector::zeros(d.m1),
            theta: DVector::zeros(d.m2),
        }
    }
}

/// Closed-form driver: constant + linear terms + |q|² + c·|z|. The jump
/// coefficients act through the ν-integrals, so the u-term contributes
/// Σ_i u_i · u_coef_i · λ₁_i.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineDriver {
    pub constant: f64,
    pub x_coef: Vec<f64>,
    pub q_coef: Vec<f64>,
    /// Coefficient on |q|².
    pub q_sq: f64,
    pub z_coef: Vec<f64>,
    pub zeta_coef: Vec<f64>,
    /// Per-mark multipliers on ν₁; each must exceed −1 for the selector
    /// bounds to hold.
    pub u_coef: Vec<f64>,
    /// Per-mark multipliers on ν₂.
    pub theta_coef: Vec<f64>,
    /// Coefficient on |z| (negative gives a concave driver).
    pub z_abs: f64,
}

impl AffineDriver {
    pub fn constant(c: f64) -> Self {
        AffineDriver {
            constant: c,
            ..Default::default()
        }
    }

    fn eval(&self, spec: &ModelSpec, input: &DriverInput) -> f64 {
        let mut v = self.constant;
        for (c, xi) in self.x_coef.iter().zip(input.x.iter()) {
            v += c * xi;
        }
        for (c, qi) in self.q_coef.iter().zip(input.q.iter()) {
            v += c * qi;
        }
        v += self.q_sq * input.q.norm_squared();
        for (c, zi) in self.z_coef.iter().zip(input.z.iter()) {
            v += c * zi;
        }
        for (c, zi) in self.zeta_coef.iter().zip(input.zeta.iter()) {
            v += c * zi;
        }
        for ((c, ui), lam) in self
            .u_coef
            .iter()
            .zip(input.u.iter())
            .zip(&spec.nu1().intensities)
        {
            v += c * ui * lam;
        }
        for ((c, ti), lam) in self
            .theta_coef
            .iter()
            .zip(input.theta.iter())
            .zip(&spec.nu2().intensities)
        {
            v += c * ti * lam;
        }
        v += self.z_abs * input.z.norm();
        v
    }

    fn uses_q(&self) -> bool {
        self.q_sq != 0.0 || self.q_coef.iter().any(|&c| c != 0.0)
    }

    fn uses_zeta_theta(&self) -> bool {
        self.zeta_coef.iter().any(|&c| c != 0.0) || self.theta_coef.iter().any(|&c| c != 0.0)
    }
}

/// Driver selector: the control Hamiltonian built from the model
/// coefficients, or a member of the affine family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum Driver {
    Hamiltonian,
    Affine(AffineDriver),
}

impl Driver {
    /// ψ value; for the Hamiltonian also the argmin control index
    /// (deterministic tie-break to the lowest index).
    pub fn eval_with_argmin(&self, spec: &ModelSpec, input: &DriverInput) -> (f64, Option<usize>) {
        match self {
            Driver::Affine(a) => (a.eval(spec, input), None),
            Driver::Hamiltonian => {
                let (v, idx) = eval_control_hamiltonian(spec, input);
                (v, Some(idx))
            }
        }
    }

    pub fn eval(&self, spec: &ModelSpec, input: &DriverInput) -> f64 {
        self.eval_with_argmin(spec, input).0
    }

    /// Whether ψ reads the fast state.
    pub fn uses_q(&self, spec: &ModelSpec) -> bool {
        match self {
            Driver::Affine(a) => a.uses_q(),
            Driver::Hamiltonian => {
                let c = spec.coeffs();
                // Conservative: any coefficient that can vary with (x, q)
                // makes the Hamiltonian state-dependent in q.
                !matches!(c.l, crate::model::RunningCost::Zero
                        | crate::model::RunningCost::Constant { .. }
                        | crate::model::RunningCost::PerControl { .. })
                    || !matches!(c.b_drift, crate::model::ControlDrift::Zero
                        | crate::model::ControlDrift::Constant { .. }
                        | crate::model::ControlDrift::PerControl { .. })
                    || c.r_intensity.depends_on_state()
            }
        }
    }

    /// Whether ψ reads (ζ, θ); the time-average oracle refuses such drivers.
    pub fn uses_zeta_theta(&self, spec: &ModelSpec) -> bool {
        match self {
            Driver::Affine(a) => a.uses_zeta_theta(),
            Driver::Hamiltonian => {
                let c = spec.coeffs();
                let rho_zero = matches!(c.rho, crate::model::ControlShift::Zero);
                let gamma_one = matches!(c.gamma_intensity, crate::model::IntensityFactor::One);
                !(rho_zero && gamma_one)
            }
        }
    }
}

/// ψ = inf over the control set of
/// l + z·R⁻¹b + ζ·ρ + Σ_i u_i (r − 1) λ₁_i + Σ_j θ_j (γ − 1) λ₂_j,
/// with exact minimization and lowest-index tie-break.
pub fn eval_control_hamiltonian(spec: &ModelSpec, input: &DriverInput) -> (f64, usize) {
    let dims = spec.dims();
    let c = spec.coeffs();
    assert!(dims.n_controls > 0, "control set must be nonempty");
    let mut best = f64::INFINITY;
    let mut best_idx = 0usize;
    for a_idx in 0..dims.n_controls {
        let mut v = c.l.eval(&input.x, &input.q, a_idx);
        let b = c.b_drift.eval(&input.x, &input.q, a_idx, dims.d_x);
        v += input.z.dot(&(spec.r_inv() * b));
        let rho = c.rho.eval(a_idx, dims.d_w);
        v += input.zeta.dot(&rho);
        for (i, lam) in spec.nu1().intensities.iter().enumerate() {
            v += input.u[i] * (c.r_intensity.eval(&input.x, a_idx, i) - 1.0) * lam;
        }
        for (j, lam) in spec.nu2().intensities.iter().enumerate() {
            v += input.theta[j] * (c.gamma_intensity.eval(&input.x, a_idx, j) - 1.0) * lam;
        }
        if v < best {
            best = v;
            best_idx = a_idx;
        }
    }
    (best, best_idx)
}

/// The selector functions of the jump-monotonicity hypothesis:
/// γ₁(w) = sup_a (r − 1) on {u ≥ u′} and inf_a (r − 1) on {u < u′}, and
/// symmetrically γ₂ from γ(a, w) − 1 with (θ, θ′).
pub fn gamma_selectors(
    spec: &ModelSpec,
    input: &DriverInput,
    u_prime: &DVector<f64>,
    theta_prime: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let dims = spec.dims();
    let c = spec.coeffs();
    let gamma1 = DVector::from_fn(dims.m1, |i, _| {
        let mut sup = f64::NEG_INFINITY;
        let mut inf = f64::INFINITY;
        for a_idx in 0..dims.n_controls {
            let v = c.r_intensity.eval(&input.x, a_idx, i) - 1.0;
            sup = sup.max(v);
            inf = inf.min(v);
        }
        // Half-open split: equality goes with the sup branch.
        if input.u[i] >= u_prime[i] {
            sup
        } else {
            inf
        }
    });
    let gamma2 = DVector::from_fn(dims.m2, |j, _| {
        let mut sup = f64::NEG_INFINITY;
        let mut inf = f64::INFINITY;
        for a_idx in 0..dims.n_controls {
            let v = c.gamma_intensity.eval(&input.x, a_idx, j) - 1.0;
            sup = sup.max(v);
            inf = inf.min(v);
        }
        if input.theta[j] >= theta_prime[j] {
            sup
        } else {
            inf
        }
    });
    (gamma1, gamma2)
}

/// Structural constants of a driver, estimated from sampled difference
/// quotients and finite-difference gradients.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DriverCertificate {
    pub m_psi: f64,
    pub l_x: f64,
    pub l_q: f64,
    pub l_z: f64,
    pub l_zeta: f64,
    pub l_u: f64,
    pub l_theta: f64,
    pub c1: f64,
    pub c2: f64,
    pub c1_bar: f64,
    pub c2_bar: f64,
    /// False when quotients at rescaled (z, u) exceed the weighted form.
    pub weighted_form_ok: bool,
    pub samples_used: usize,
}

fn random_input<R: Rng>(spec: &ModelSpec, rng: &mut R, scale: f64) -> DriverInput {
    let d = spec.dims();
    let mut g = |n: usize| {
        DVector::from_fn(n, |_, _| {
            let v: f64 = rng.sample(StandardNormal);
            scale * v
        })
    };
    DriverInput {
        x: g(d.d_x),
        q: g(d.d_q),
        z: g(d.d_x),
        zeta: g(d.d_w),
        u: g(d.m1),
        theta: g(d.m2),
    }
}

fn weight_of(spec: &ModelSpec, input: &DriverInput) -> f64 {
    let u_norm = input
        .u
        .iter()
        .zip(&spec.nu1().intensities)
        .map(|(ui, lam)| ui * ui * lam)
        .sum::<f64>()
        .sqrt();
    1.0 + input.z.norm() + u_norm
}

/// Estimate the structural constants of `driver` on `n_samples` random
/// evaluation points.
pub fn certify_driver(
    spec: &ModelSpec,
    driver: &Driver,
    n_samples: usize,
    seed: u64,
) -> DriverCertificate {
    let mut rng = stream_rng(seed, Stream::Checker, 2);
    let d = spec.dims();
    let fd = 1e-5;
    let mut cert = DriverCertificate {
        m_psi: f64::NEG_INFINITY,
        l_x: 0.0,
        l_q: 0.0,
        l_z: 0.0,
        l_zeta: 0.0,
        l_u: 0.0,
        l_theta: 0.0,
        c1: 0.0,
        c2: 0.0,
        c1_bar: 0.0,
        c2_bar: 0.0,
        weighted_form_ok: true,
        samples_used: n_samples,
    };
    let mut scaled_quotients: Vec<f64> = Vec::new();

    for s in 0..n_samples {
        let scale = if s % 3 == 2 { 5.0 } else { 1.5 };
        let mut input = random_input(spec, &mut rng, scale);

        // M_ψ: driver at vanishing (z, ζ, u, θ).
        let mut at_zero = input.clone();
        at_zero.z.fill(0.0);
        at_zero.zeta.fill(0.0);
        at_zero.u.fill(0.0);
        at_zero.theta.fill(0.0);
        cert.m_psi = cert.m_psi.max(driver.eval(spec, &at_zero));

        let base = driver.eval(spec, &input);

        // Gradient norms along the linear arguments.
        let grad_norm = |field: usize, dim: usize, weights: Option<&[f64]>| -> f64 {
            let mut sq = 0.0;
            for i in 0..dim {
                let bump = |inp: &mut DriverInput, delta: f64| match field {
                    0 => inp.z[i] += delta,
                    1 => inp.zeta[i] += delta,
                    2 => inp.u[i] += delta,
                    _ => inp.theta[i] += delta,
                };
                let mut up = input.clone();
                bump(&mut up, fd);
                let mut dn = input.clone();
                bump(&mut dn, -fd);
                let g = (driver.eval(spec, &up) - driver.eval(spec, &dn)) / (2.0 * fd);
                match weights {
                    // Dual norm of the weighted ℓ² geometry: Σ g_i² / λ_i.
                    Some(lams) => sq += g * g / lams[i].max(1e-300),
                    None => sq += g * g,
                }
            }
            sq.sqrt()
        };
        cert.l_z = cert.l_z.max(grad_norm(0, d.d_x, None));
        cert.l_zeta = cert.l_zeta.max(grad_norm(1, d.d_w, None));
        cert.l_u = cert.l_u.max(grad_norm(2, d.m1, Some(&spec.nu1().intensities)));
        cert.l_theta = cert
            .l_theta
            .max(grad_norm(3, d.m2, Some(&spec.nu2().intensities)));

        // Weighted x/q difference quotients.
        let w = weight_of(spec, &input);
        let dx = random_input(spec, &mut rng, 1.0).x;
        if dx.norm() > 1e-9 {
            let mut moved = input.clone();
            moved.x += &dx;
            let q = (driver.eval(spec, &moved) - base).abs() / (w * dx.norm());
            cert.l_x = cert.l_x.max(q);
        }
        let dq = random_input(spec, &mut rng, 1.0).q;
        if dq.norm() > 1e-9 {
            let mut moved = input.clone();
            moved.q += &dq;
            let q = (driver.eval(spec, &moved) - base).abs() / (w * dq.norm());
            cert.l_q = cert.l_q.max(q);
        }

        // Selector bounds, normalized by (1 ∧ |w|).
        let u_prime = random_input(spec, &mut rng, 1.5).u;
        let theta_prime = random_input(spec, &mut rng, 1.5).theta;
        let (g1, g2) = selector_for_driver(spec, driver, &input, &u_prime, &theta_prime);
        for (i, w_mark) in spec.nu1().marks.iter().enumerate() {
            let norm = w_mark.norm().min(1.0);
            cert.c2 = cert.c2.max(g1[i].max(0.0) / norm);
            cert.c1 = cert.c1.min(g1[i].min(0.0) / norm);
        }
        for (j, w_mark) in spec.nu2().marks.iter().enumerate() {
            let norm = w_mark.norm().min(1.0);
            cert.c2_bar = cert.c2_bar.max(g2[j].max(0.0) / norm);
            cert.c1_bar = cert.c1_bar.min(g2[j].min(0.0) / norm);
        }

        // Weighted-form sanity: scale (z, u) up and record the x quotient.
        if s % 16 == 0 && d.d_x > 0 {
            input.z *= 10.0;
            input.u *= 10.0;
            let w_big = weight_of(spec, &input);
            let base_big = driver.eval(spec, &input);
            let dx = DVector::from_fn(d.d_x, |_, _| {
                let v: f64 = rng.sample(StandardNormal);
                v
            });
            if dx.norm() > 1e-9 {
                let mut moved = input.clone();
                moved.x += &dx;
                let q = (driver.eval(spec, &moved) - base_big).abs() / (w_big * dx.norm());
                scaled_quotients.push(q);
            }
        }
    }

    if cert.m_psi == f64::NEG_INFINITY {
        cert.m_psi = 0.0;
    }
    let worst_scaled = scaled_quotients.iter().copied().fold(0.0f64, f64::max);
    if worst_scaled > 1.05 * cert.l_x.max(1e-12) && worst_scaled > cert.l_x + 1e-9 {
        cert.weighted_form_ok = false;
    }
    cert
}

/// Selector functions for a generic driver: the Hamiltonian uses the exact
/// sup/inf construction over controls; the affine family is linear in (u, θ)
/// so its coefficients are the selectors.
pub fn selector_for_driver(
    spec: &ModelSpec,
    driver: &Driver,
    input: &DriverInput,
    u_prime: &DVector<f64>,
    theta_prime: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    match driver {
        Driver::Hamiltonian => gamma_selectors(spec, input, u_prime, theta_prime),
        Driver::Affine(a) => {
            let d = spec.dims();
            let g1 = DVector::from_fn(d.m1, |i, _| a.u_coef.get(i).copied().unwrap_or(0.0));
            let g2 = DVector::from_fn(d.m2, |j, _| a.theta_coef.get(j).copied().unwrap_or(0.0));
            (g1, g2)
        }
    }
}

#[cfg(test)]
mod tests;
