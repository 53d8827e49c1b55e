//! Registered coefficient library. Configs reference functions by name with
//! parameters; nothing here is user scripting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{serde_mat, serde_vec, serde_vec_list, Dims};
use crate::error::{CoreError, Result};

fn one() -> f64 {
    1.0
}

pub(crate) mod serde_opt_mat {
    use nalgebra::DMatrix;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &Option<DMatrix<f64>>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match m {
            Some(m) => super::serde_mat::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<DMatrix<f64>>, D::Error> {
        super::serde_mat::deserialize(d).map(Some)
    }
}

/// F(x, q) → R^{d_q}, the fast reaction term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum FastDrift {
    Zero,
    Constant {
        #[serde(with = "serde_vec")]
        value: DVector<f64>,
    },
    Linear {
        #[serde(default, with = "serde_opt_mat", skip_serializing_if = "Option::is_none")]
        on_x: Option<DMatrix<f64>>,
        #[serde(default, with = "serde_opt_mat", skip_serializing_if = "Option::is_none")]
        on_q: Option<DMatrix<f64>>,
    },
    /// Componentwise amp · sin(freq · q_i); bounded with Lipschitz constant
    /// |amp · freq|.
    SinQ {
        amp: f64,
        #[serde(default = "one")]
        freq: f64,
    },
}

impl FastDrift {
    pub fn eval_into(&self, x: &DVector<f64>, q: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            FastDrift::Zero => out.fill(0.0),
            FastDrift::Constant { value } => out.copy_from(value),
            FastDrift::Linear { on_x, on_q } => {
                out.fill(0.0);
                if let Some(m) = on_x {
                    out.gemv(1.0, m, x, 1.0);
                }
                if let Some(m) = on_q {
                    out.gemv(1.0, m, q, 1.0);
                }
            }
            FastDrift::SinQ { amp, freq } => {
                for i in 0..out.len() {
                    out[i] = amp * (freq * q[i]).sin();
                }
            }
        }
    }

    pub fn eval(&self, x: &DVector<f64>, q: &DVector<f64>, d_q: usize) -> DVector<f64> {
        let mut out = DVector::zeros(d_q);
        self.eval_into(x, q, &mut out);
        out
    }

    fn validate(&self, dims: &Dims) -> Result<()> {
        match self {
            FastDrift::Zero => Ok(()),
            FastDrift::Constant { value } => check_len(value.len(), dims.d_q, "F constant"),
            FastDrift::Linear { on_x, on_q } => {
                if let Some(m) = on_x {
                    check_shape(m, dims.d_q, dims.d_x, "F.on_x")?;
                }
                if let Some(m) = on_q {
                    check_shape(m, dims.d_q, dims.d_q, "F.on_q")?;
                }
                Ok(())
            }
            FastDrift::SinQ { .. } => Ok(()),
        }
    }
}

/// b(x, q, a) → R^{d_x}, the controlled slow drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum ControlDrift {
    Zero,
    Constant {
        #[serde(with = "serde_vec")]
        value: DVector<f64>,
    },
    /// One drift vector per control point.
    PerControl {
        #[serde(with = "serde_vec_list")]
        values: Vec<DVector<f64>>,
    },
    Linear {
        #[serde(default, with = "serde_opt_mat", skip_serializing_if = "Option::is_none")]
        on_x: Option<DMatrix<f64>>,
        #[serde(default, with = "serde_opt_mat", skip_serializing_if = "Option::is_none")]
        on_q: Option<DMatrix<f64>>,
    },
}

impl ControlDrift {
    pub fn eval(
        &self,
        x: &DVector<f64>,
        q: &DVector<f64>,
        control_idx: usize,
        d_x: usize,
    ) -> DVector<f64> {
        match self {
            ControlDrift::Zero => DVector::zeros(d_x),
            ControlDrift::Constant { value } => value.clone(),
            ControlDrift::PerControl { values } => values[control_idx].clone(),
            ControlDrift::Linear { on_x, on_q } => {
                let mut out = DVector::zeros(d_x);
                if let Some(m) = on_x {
                    out.gemv(1.0, m, x, 1.0);
                }
                if let Some(m) = on_q {
                    out.gemv(1.0, m, q, 1.0);
                }
                out
            }
        }
    }

    fn validate(&self, dims: &Dims) -> Result<()> {
        match self {
            ControlDrift::Zero => Ok(()),
            ControlDrift::Constant { value } => check_len(value.len(), dims.d_x, "b constant"),
            ControlDrift::PerControl { values } => {
                check_len(values.len(), dims.n_controls, "b per-control table")?;
                for v in values {
                    check_len(v.len(), dims.d_x, "b per-control value")?;
                }
                Ok(())
            }
            ControlDrift::Linear { on_x, on_q } => {
                if let Some(m) = on_x {
                    check_shape(m, dims.d_x, dims.d_x, "b.on_x")?;
                }
                if let Some(m) = on_q {
                    check_shape(m, dims.d_x, dims.d_q, "b.on_q")?;
                }
                Ok(())
            }
        }
    }
}

/// ρ(a) → R^{d_w}, the controlled Wiener shift in the fast equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum ControlShift {
    Zero,
    Constant {
        #[serde(with = "serde_vec")]
        value: DVector<f64>,
    },
    PerControl {
        #[serde(with = "serde_vec_list")]
        values: Vec<DVector<f64>>,
    },
}

impl ControlShift {
    pub fn eval(&self, control_idx: usize, d_w: usize) -> DVector<f64> {
        match self {
            ControlShift::Zero => DVector::zeros(d_w),
            ControlShift::Constant { value } => value.clone(),
            ControlShift::PerControl { values } => values[control_idx].clone(),
        }
    }

    fn validate(&self, dims: &Dims) -> Result<()> {
        match self {
            ControlShift::Zero => Ok(()),
            ControlShift::Constant { value } => check_len(value.len(), dims.d_w, "rho constant"),
            ControlShift::PerControl { values } => {
                check_len(values.len(), dims.n_controls, "rho per-control table")?;
                for v in values {
                    check_len(v.len(), dims.d_w, "rho per-control value")?;
                }
                Ok(())
            }
        }
    }
}

/// Positive intensity multiplier: r(x, q, a, w) on ν₁ or γ(a, w) on ν₂.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum IntensityFactor {
    One,
    Constant { value: f64 },
    /// One multiplier per control point, shared across marks.
    PerControl { values: Vec<f64> },
    /// rows[control][mark].
    PerControlMark { rows: Vec<Vec<f64>> },
    /// base + amp · sin(freq · x_1); bounded band [base − |amp|, base + |amp|].
    SinX {
        base: f64,
        amp: f64,
        #[serde(default = "one")]
        freq: f64,
    },
}

impl IntensityFactor {
    pub fn eval(&self, x: &DVector<f64>, control_idx: usize, mark_idx: usize) -> f64 {
        match self {
            IntensityFactor::One => 1.0,
            IntensityFactor::Constant { value } => *value,
            IntensityFactor::PerControl { values } => values[control_idx],
            IntensityFactor::PerControlMark { rows } => rows[control_idx][mark_idx],
            IntensityFactor::SinX { base, amp, freq } => base + amp * (freq * x[0]).sin(),
        }
    }

    pub fn depends_on_state(&self) -> bool {
        matches!(self, IntensityFactor::SinX { .. })
    }

    fn validate(&self, dims: &Dims, n_marks: usize, label: &str) -> Result<()> {
        match self {
            IntensityFactor::One => Ok(()),
            IntensityFactor::Constant { value } => {
                if *value > 0.0 {
                    Ok(())
                } else {
                    Err(CoreError::InvalidModel(format!("{label}: nonpositive value")))
                }
            }
            IntensityFactor::PerControl { values } => {
                check_len(values.len(), dims.n_controls, label)?;
                if values.iter().any(|&v| v <= 0.0) {
                    return Err(CoreError::InvalidModel(format!("{label}: nonpositive value")));
                }
                Ok(())
            }
            IntensityFactor::PerControlMark { rows } => {
                check_len(rows.len(), dims.n_controls, label)?;
                for r in rows {
                    check_len(r.len(), n_marks, label)?;
                    if r.iter().any(|&v| v <= 0.0) {
                        return Err(CoreError::InvalidModel(format!(
                            "{label}: nonpositive value"
                        )));
                    }
                }
                Ok(())
            }
            IntensityFactor::SinX { base, amp, .. } => {
                if base - amp.abs() > 0.0 {
                    Ok(())
                } else {
                    Err(CoreError::InvalidModel(format!(
                        "{label}: band reaches zero (base − |amp| ≤ 0)"
                    )))
                }
            }
        }
    }
}

/// l(x, q, a), the running cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum RunningCost {
    Zero,
    Constant { value: f64 },
    PerControl { values: Vec<f64> },
    Linear {
        #[serde(default)]
        on_x: Vec<f64>,
        #[serde(default)]
        on_q: Vec<f64>,
    },
    SinX {
        amp: f64,
        #[serde(default = "one")]
        freq: f64,
    },
}

impl RunningCost {
    pub fn eval(&self, x: &DVector<f64>, q: &DVector<f64>, control_idx: usize) -> f64 {
        match self {
            RunningCost::Zero => 0.0,
            RunningCost::Constant { value } => *value,
            RunningCost::PerControl { values } => values[control_idx],
            RunningCost::Linear { on_x, on_q } => {
                let mut s = 0.0;
                for (c, xi) in on_x.iter().zip(x.iter()) {
                    s += c * xi;
                }
                for (c, qi) in on_q.iter().zip(q.iter()) {
                    s += c * qi;
                }
                s
            }
            RunningCost::SinX { amp, freq } => amp * (freq * x[0]).sin(),
        }
    }

    fn validate(&self, dims: &Dims) -> Result<()> {
        match self {
            RunningCost::PerControl { values } => {
                check_len(values.len(), dims.n_controls, "l per-control table")
            }
            RunningCost::Linear { on_x, on_q } => {
                if !on_x.is_empty() {
                    check_len(on_x.len(), dims.d_x, "l.on_x")?;
                }
                if !on_q.is_empty() {
                    check_len(on_q.len(), dims.d_q, "l.on_q")?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// h(x), the terminal cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum TerminalCost {
    Zero,
    Constant { value: f64 },
    Linear { coef: Vec<f64> },
    /// amp · sin(freq · x_1), bounded with Lipschitz constant |amp · freq|.
    Sin {
        amp: f64,
        #[serde(default = "one")]
        freq: f64,
    },
}

impl TerminalCost {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            TerminalCost::Zero => 0.0,
            TerminalCost::Constant { value } => *value,
            TerminalCost::Linear { coef } => coef.iter().zip(x.iter()).map(|(c, v)| c * v).sum(),
            TerminalCost::Sin { amp, freq } => amp * (freq * x[0]).sin(),
        }
    }

    fn validate(&self, dims: &Dims) -> Result<()> {
        match self {
            TerminalCost::Linear { coef } => check_len(coef.len(), dims.d_x, "h.coef"),
            _ => Ok(()),
        }
    }
}

impl super::CoefficientSpec {
    pub(crate) fn validate(&self, dims: &Dims) -> Result<()> {
        self.f.validate(dims)?;
        self.b_drift.validate(dims)?;
        self.rho.validate(dims)?;
        self.r_intensity.validate(dims, dims.m1, "r_intensity")?;
        self.gamma_intensity
            .validate(dims, dims.m2, "gamma_intensity")?;
        if self.gamma_intensity.depends_on_state() {
            return Err(CoreError::InvalidModel(
                "gamma_intensity must not depend on the state".into(),
            ));
        }
        self.l.validate(dims)?;
        self.h.validate(dims)?;
        if self.bounds.eta <= 0.0 || self.bounds.eta_prime <= 0.0 {
            return Err(CoreError::InvalidModel(
                "intensity band lower edges must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_len(got: usize, want: usize, label: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(CoreError::Dimension(format!(
            "{label}: length {got}, expected {want}"
        )))
    }
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, label: &str) -> Result<()> {
    if m.nrows() == rows && m.ncols() == cols {
        Ok(())
    } else {
        Err(CoreError::Dimension(format!(
            "{label}: shape {}×{}, expected {rows}×{cols}",
            m.nrows(),
            m.ncols()
        )))
    }
}
