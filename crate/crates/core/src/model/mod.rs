//! Problem description: operators, coefficient functions, Lévy measures,
//! initial data, time-scale ratio, and empirical checkers for the structural
//! assumptions (dissipativity, Lipschitz bands, coefficient bounds).
//!
//! Everything is finite-dimensional. The slow state lives in `R^{d_x}`, the
//! fast state in `R^{d_q}`, the two Wiener processes in `R^{d_x}` (the slow
//! one, since the slow diffusion matrix is square invertible) and `R^{d_w}`.
//! Both jump measures are compound Poisson with finitely many marks, so all
//! `L²(ν)` objects are mark-indexed vectors.

mod builtins;
mod checks;

pub use builtins::{
    ControlDrift, ControlShift, FastDrift, IntensityFactor, RunningCost, TerminalCost,
};
pub use checks::{check_dissipativity, check_lipschitz_bounds, dissipativity_scan_1d};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub(crate) mod serde_mat {
    use nalgebra::DMatrix;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        serde::Serialize::serialize(&rows, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Deserialize::deserialize(d)?;
        if rows.is_empty() {
            return Err(D::Error::custom("empty matrix"));
        }
        let ncols = rows[0].len();
        if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged or empty matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

pub(crate) mod serde_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        serde::Serialize::serialize(v.as_slice(), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Deserialize::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

pub(crate) mod serde_vec_list {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        v: &[DVector<f64>],
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        serde::Serialize::serialize(&rows, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<DVector<f64>>, D::Error> {
        let rows: Vec<Vec<f64>> = Deserialize::deserialize(d)?;
        Ok(rows.into_iter().map(DVector::from_vec).collect())
    }
}

/// Compound Poisson measure: finitely many marks with positive rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasure {
    /// Jump sizes in the relevant state space.
    #[serde(with = "serde_vec_list")]
    pub marks: Vec<DVector<f64>>,
    /// Events per unit time for each mark.
    pub intensities: Vec<f64>,
}

impl LevyMeasure {
    pub fn empty() -> Self {
        LevyMeasure {
            marks: Vec::new(),
            intensities: Vec::new(),
        }
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    /// Total event rate Σ λ_i.
    pub fn total_rate(&self) -> f64 {
        self.intensities.iter().sum()
    }

    /// Compensator drift Σ λ_i w_i.
    pub fn mean_jump(&self, dim: usize) -> DVector<f64> {
        let mut m = DVector::zeros(dim);
        for (w, &lam) in self.marks.iter().zip(&self.intensities) {
            m += w * lam;
        }
        m
    }

    /// Σ λ_i |w_i|², the square-integrability functional.
    pub fn second_moment(&self) -> f64 {
        self.marks
            .iter()
            .zip(&self.intensities)
            .map(|(w, &lam)| lam * w.norm_squared())
            .sum()
    }

    fn validate(&self, dim: usize, label: &str) -> Result<()> {
        if self.marks.len() != self.intensities.len() {
            return Err(CoreError::Dimension(format!(
                "{label}: {} marks vs {} intensities",
                self.marks.len(),
                self.intensities.len()
            )));
        }
        if self.intensities.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(CoreError::NonpositiveIntensity);
        }
        for w in &self.marks {
            if w.len() != dim {
                return Err(CoreError::Dimension(format!(
                    "{label}: mark of dimension {} in space of dimension {dim}",
                    w.len()
                )));
            }
            if w.norm() == 0.0 {
                return Err(CoreError::InvalidModel(format!("{label}: zero mark")));
            }
        }
        Ok(())
    }
}

/// Linear operators of the state equations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    /// Slow drift generator, d_x × d_x.
    #[serde(with = "serde_mat")]
    pub a: DMatrix<f64>,
    /// Fast drift generator, d_q × d_q.
    #[serde(with = "serde_mat")]
    pub b: DMatrix<f64>,
    /// Slow diffusion, d_x × d_x invertible.
    #[serde(with = "serde_mat")]
    pub r: DMatrix<f64>,
    /// Fast diffusion, d_q × d_w.
    #[serde(with = "serde_mat")]
    pub g: DMatrix<f64>,
}

/// Declared structural constants; the checkers verify them by sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeclaredBounds {
    pub lip_f: f64,
    pub lip_b: f64,
    pub lip_r: f64,
    pub lip_l: f64,
    pub lip_h: f64,
    /// Bound on |b| and |ρ|.
    pub m_prime: f64,
    /// Bound on |l|.
    pub m_l: f64,
    /// Bound on |h|.
    pub m_h: f64,
    /// Lower edge of the r band.
    pub eta: f64,
    /// Upper edge of the r band.
    pub c_r: f64,
    /// Lower edge of the γ band.
    pub eta_prime: f64,
    /// Upper edge of the γ band.
    pub c_gamma: f64,
}

impl Default for DeclaredBounds {
    fn default() -> Self {
        DeclaredBounds {
            lip_f: 10.0,
            lip_b: 10.0,
            lip_r: 10.0,
            lip_l: 10.0,
            lip_h: 10.0,
            m_prime: 100.0,
            m_l: 100.0,
            m_h: 100.0,
            eta: 1e-6,
            c_r: 100.0,
            eta_prime: 1e-6,
            c_gamma: 100.0,
        }
    }
}

/// The nonlinear coefficient set, drawn from the registered builtin library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSpec {
    /// F(x, q): fast reaction term, values in R^{d_q}.
    pub f: FastDrift,
    /// b(x, q, a): controlled slow drift, values in R^{d_x}.
    pub b_drift: ControlDrift,
    /// ρ(a): controlled fast Wiener shift, values in R^{d_w}.
    pub rho: ControlShift,
    /// r(x, q, a, w): controlled intensity multiplier on ν₁, positive scalar.
    pub r_intensity: IntensityFactor,
    /// γ(a, w): controlled intensity multiplier on ν₂, positive scalar.
    pub gamma_intensity: IntensityFactor,
    /// l(x, q, a): running cost.
    pub l: RunningCost,
    /// h(x): terminal cost.
    pub h: TerminalCost,
    /// Finite control set U.
    #[serde(with = "serde_vec_list")]
    pub control_set: Vec<DVector<f64>>,
    #[serde(default)]
    pub bounds: DeclaredBounds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Initial {
    #[serde(with = "serde_vec")]
    pub x0: DVector<f64>,
    #[serde(with = "serde_vec")]
    pub q0: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    /// Time-scale ratio ε ∈ (0, 1].
    pub epsilon: f64,
    /// Terminal time of the backward horizon (1 for the main experiments).
    pub horizon: f64,
}

/// The six config sections, exactly in their serialized shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub operators: OperatorSpec,
    pub coefficients: CoefficientSpec,
    pub levy1: LevyMeasure,
    pub levy2: LevyMeasure,
    pub initial: Initial,
    pub scales: Scales,
}

/// Dimensions implied by the operator shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d_x: usize,
    pub d_q: usize,
    /// Fast Wiener dimension (columns of G). The slow Wiener dimension is d_x.
    pub d_w: usize,
    /// Number of ν₁ marks.
    pub m1: usize,
    /// Number of ν₂ marks.
    pub m2: usize,
    pub n_controls: usize,
}

/// Validated model: the config plus the derived inverse of R and dimensions.
///
/// Immutable after load; safe to share across worker threads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    config: ModelConfig,
    r_inv: DMatrix<f64>,
    dims: Dims,
}

/// Outcome of an assumption checker run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Empirical dissipativity constant (NaN when the run did not assess it).
    pub mu_hat: f64,
    pub lipschitz_violations: usize,
    pub bound_violations: usize,
    pub samples_used: usize,
}

impl ModelSpec {
    /// Validate a parsed config into a usable model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let d_x = config.operators.a.nrows();
        let d_q = config.operators.b.nrows();
        let d_w = config.operators.g.ncols();
        if config.operators.a.ncols() != d_x {
            return Err(CoreError::Dimension("A must be square".into()));
        }
        if config.operators.b.ncols() != d_q {
            return Err(CoreError::Dimension("B must be square".into()));
        }
        if config.operators.r.nrows() != d_x || config.operators.r.ncols() != d_x {
            return Err(CoreError::Dimension("R must be d_x × d_x".into()));
        }
        if config.operators.g.nrows() != d_q {
            return Err(CoreError::Dimension("G must have d_q rows".into()));
        }
        let r_inv = config
            .operators
            .r
            .clone()
            .try_inverse()
            .ok_or(CoreError::SingularR)?;
        let resid = (&config.operators.r * &r_inv - DMatrix::<f64>::identity(d_x, d_x)).norm();
        if !resid.is_finite() || resid > 1e-10 * (1.0 + config.operators.r.norm()) {
            return Err(CoreError::SingularR);
        }

        config.levy1.validate(d_x, "levy1")?;
        config.levy2.validate(d_q, "levy2")?;

        if config.initial.x0.len() != d_x {
            return Err(CoreError::Dimension("x0 has wrong dimension".into()));
        }
        if config.initial.q0.len() != d_q {
            return Err(CoreError::Dimension("q0 has wrong dimension".into()));
        }
        if !(config.scales.epsilon > 0.0 && config.scales.epsilon <= 1.0) {
            return Err(CoreError::InvalidModel(
                "epsilon must lie in (0, 1]".into(),
            ));
        }
        if !(config.scales.horizon > 0.0) {
            return Err(CoreError::InvalidModel("horizon must be positive".into()));
        }

        let dims = Dims {
            d_x,
            d_q,
            d_w,
            m1: config.levy1.n_marks(),
            m2: config.levy2.n_marks(),
            n_controls: config.coefficients.control_set.len(),
        };
        config.coefficients.validate(&dims)?;

        Ok(ModelSpec {
            config,
            r_inv,
            dims,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn ops(&self) -> &OperatorSpec {
        &self.config.operators
    }

    pub fn coeffs(&self) -> &CoefficientSpec {
        &self.config.coefficients
    }

    pub fn nu1(&self) -> &LevyMeasure {
        &self.config.levy1
    }

    pub fn nu2(&self) -> &LevyMeasure {
        &self.config.levy2
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.config.initial.x0
    }

    pub fn q0(&self) -> &DVector<f64> {
        &self.config.initial.q0
    }

    pub fn epsilon(&self) -> f64 {
        self.config.scales.epsilon
    }

    pub fn horizon(&self) -> f64 {
        self.config.scales.horizon
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same model with a different time-scale ratio.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<ModelSpec> {
        let mut config = self.config.clone();
        config.scales.epsilon = epsilon;
        ModelSpec::new(config)
    }

    /// Same model with different initial data.
    pub fn with_initial(&self, x0: DVector<f64>, q0: DVector<f64>) -> Result<ModelSpec> {
        let mut config = self.config.clone();
        config.initial.x0 = x0;
        config.initial.q0 = q0;
        ModelSpec::new(config)
    }
}

/// Parse the model sections of a config document.
pub fn load_model(text: &str) -> Result<ModelSpec> {
    let config: ModelConfig =
        toml::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))?;
    ModelSpec::new(config)
}

/// Serialize a model back to config text. `load_model ∘ serialize_model` is
/// the identity on `ModelSpec`.
pub fn serialize_model(spec: &ModelSpec) -> String {
    toml::to_string_pretty(&spec.config).expect("model config serializes")
}

#[cfg(test)]
pub(crate) mod tests;
