//! Whole-document config: the model sections plus optional per-tool sections
//! used by the batch front end.

use serde::{Deserialize, Serialize};

use crate::bsde::RegressionBasis;
use crate::ergodic::{Axis, LambdaBox};
use crate::error::{CoreError, Result};
use crate::hamiltonian::Driver;
use crate::model::{ModelConfig, ModelSpec};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_batches: usize,
    pub picard_iters: usize,
    pub basis: RegressionBasis,
    pub stiffness_bound: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            n_paths: 10_000,
            n_steps: 200,
            n_batches: 8,
            picard_iters: 3,
            basis: RegressionBasis::default(),
            stiffness_bound: crate::forward::DEFAULT_STIFFNESS_BOUND,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    pub tol_abs: f64,
    pub stiffness_target: f64,
    pub partition_n: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            epsilons: vec![1.0, 0.5, 0.25, 0.1, 0.05],
            tol_abs: 1e-2,
            stiffness_target: 0.02,
            partition_n: 4,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySection {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ErgodicSection {
    pub alpha: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub n_batches: usize,
    pub cache_tol: f64,
    pub query: QuerySection,
    pub bounds: Option<LambdaBox>,
}

impl Default for ErgodicSection {
    fn default() -> Self {
        ErgodicSection {
            alpha: 0.2,
            horizon: 25.0,
            n_steps: 2500,
            n_paths: 2000,
            n_batches: 8,
            cache_tol: 0.05,
            query: QuerySection::default(),
            bounds: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DualSection {
    pub p_res: usize,
    pub v_res: usize,
    pub time_cells: usize,
    /// Lipschitz radii of the dual ball; when absent they come from the λ
    /// map's certificates.
    pub l_z: Option<f64>,
    pub l_u: Option<f64>,
    pub zu_z: Vec<Axis>,
    pub zu_u: Vec<Axis>,
    pub tol: f64,
}

impl Default for DualSection {
    fn default() -> Self {
        DualSection {
            p_res: 3,
            v_res: 3,
            time_cells: 4,
            l_z: None,
            l_u: None,
            zu_z: Vec::new(),
            zu_u: Vec::new(),
            tol: 2e-2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsSection {
    pub n_list: Vec<usize>,
    pub eps_list: Vec<f64>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            n_list: vec![2, 3, 4, 5, 6],
            eps_list: vec![0.25, 0.1, 0.05],
        }
    }
}

/// λ source for the reduced layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReducedSection {
    /// Exact λ from a q-independent affine driver (defaults to [driver]).
    Analytic,
    /// Tabulate λ over [ergodic].bounds and interpolate.
    Cached,
    /// Solve λ per evaluation point.
    Pointwise,
}

/// One parsed config document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub driver: Option<Driver>,
    pub reduced: Option<ReducedSection>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub ergodic: ErgodicSection,
    #[serde(default)]
    pub dual: DualSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

impl LabConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.model.clone())
    }

    pub fn driver(&self) -> Result<Driver> {
        self.driver
            .clone()
            .ok_or_else(|| CoreError::Parse("config has no [driver] section".into()))
    }
}

/// Parse a whole config document.
pub fn load_lab_config(text: &str) -> Result<LabConfig> {
    toml::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))
}
