//! Run configuration read from a TOML file.
//!
//! ```toml
//! [systems]
//! kind = "miso"            # or "additive"
//! intersample = "zoh"      # or "foh"
//! sampling_period = 0.02
//!
//! [[systems.submodel]]
//! num = [2.0]              # true system, descending powers
//! den = [0.25, 0.25, 1.0]
//! init_num = [1.7]         # optional start for identification
//! init_den = [0.1, 0.27, 1.0]
//!
//! [[systems.submodel]]
//! n = 2                    # orders may be given instead of (or in addition to) a system
//! m = 0
//!
//! [signals]
//! samples = 2000
//! noise_variance = 0.25
//! input = "white"          # or "sine" with sine_frequency in rad/s
//!
//! [estimator]              # any EstimatorConfig field
//! inner_method = "srivc"
//!
//! [experiment]
//! mc_runs = 50
//! sample_sizes = [2000, 10000, 50000]
//! ```

use std::path::Path;

use ctident::{
    EstimatorConfig, Intersample, ModelSetup, ModelStructure, SetupKind, TransferFunction,
};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub systems: Option<SystemsConfig>,
    pub signals: Option<SignalsConfig>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemsConfig {
    pub kind: SetupKind,
    #[serde(default)]
    pub intersample: Intersample,
    pub sampling_period: Option<f64>,
    pub submodel: Vec<SubmodelConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmodelConfig {
    pub num: Option<Vec<f64>>,
    pub den: Option<Vec<f64>>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub init_num: Option<Vec<f64>>,
    pub init_den: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    White,
    Sine,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalsConfig {
    pub samples: usize,
    pub noise_variance: f64,
    #[serde(default = "default_input")]
    pub input: InputKind,
    pub sine_frequency: Option<f64>,
    pub seed: Option<u64>,
}

fn default_input() -> InputKind {
    InputKind::White
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mc_runs: Option<usize>,
    pub sample_sizes: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

/// A submodel after validation.
#[derive(Debug, Clone)]
pub struct Submodel {
    pub structure: ModelStructure,
    pub truth: Option<TransferFunction>,
    pub init: Option<TransferFunction>,
}

fn tf(
    num: &Option<Vec<f64>>,
    den: &Option<Vec<f64>>,
    what: &str,
    i: usize,
) -> Result<Option<TransferFunction>, CliError> {
    match (num, den) {
        (None, None) => Ok(None),
        (Some(n), Some(d)) => TransferFunction::from_descending(n, d)
            .map(Some)
            .map_err(|e| CliError::Validation(format!("systems.submodel[{}] {}: {}", i, what, e))),
        (Some(_), None) => Err(CliError::Validation(format!(
            "systems.submodel[{}]: {}_den is missing",
            i, what
        ))),
        (None, Some(_)) => Err(CliError::Validation(format!(
            "systems.submodel[{}]: {}_num is missing",
            i, what
        ))),
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Io(format!("cannot read config {}: {}", p.display(), e))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("config {}: {}", p.display(), e)))?
            }
        };
        cfg.estimator
            .validate()
            .map_err(|e| CliError::Validation(format!("[estimator]: {}", e)))?;
        Ok(cfg)
    }

    pub fn systems(&self) -> Result<&SystemsConfig, CliError> {
        self.systems
            .as_ref()
            .ok_or_else(|| CliError::Validation("missing config section [systems]".into()))
    }

    pub fn signals(&self) -> Result<&SignalsConfig, CliError> {
        self.signals
            .as_ref()
            .ok_or_else(|| CliError::Validation("missing config section [signals]".into()))
    }

    /// Validated submodels and the setup they form.
    pub fn submodels(&self) -> Result<(ModelSetup, Vec<Submodel>), CliError> {
        let sys = self.systems()?;
        if sys.submodel.is_empty() {
            return Err(CliError::Validation(
                "systems.submodel: at least one submodel is required".into(),
            ));
        }
        let mut out = Vec::new();
        for (i, s) in sys.submodel.iter().enumerate() {
            let truth = tf(&s.num, &s.den, "num/den", i)?;
            let init = tf(&s.init_num, &s.init_den, "init", i)?;
            let from_tf = truth.as_ref().or(init.as_ref()).map(|g| g.structure());
            let structure = match (s.n, s.m, from_tf) {
                (Some(n), Some(m), _) => ModelStructure::new(n, m)
                    .map_err(|e| CliError::Validation(format!("systems.submodel[{}]: {}", i, e)))?,
                (None, None, Some(st)) => st,
                (Some(_), None, _) => {
                    return Err(CliError::Validation(format!(
                        "systems.submodel[{}]: key m is missing",
                        i
                    )))
                }
                (None, Some(_), _) => {
                    return Err(CliError::Validation(format!(
                        "systems.submodel[{}]: key n is missing",
                        i
                    )))
                }
                (None, None, None) => {
                    return Err(CliError::Validation(format!(
                        "systems.submodel[{}]: give n and m, or num and den",
                        i
                    )))
                }
            };
            for (g, what) in [(&truth, "num/den"), (&init, "init")] {
                if let Some(g) = g {
                    g.parameters(structure).map_err(|e| {
                        CliError::Validation(format!(
                            "systems.submodel[{}] {} does not fit (n, m): {}",
                            i, what, e
                        ))
                    })?;
                }
            }
            out.push(Submodel {
                structure,
                truth,
                init,
            });
        }
        let setup = ModelSetup::new(sys.kind, out.iter().map(|s| s.structure).collect())
            .map_err(|e| CliError::Validation(format!("[systems]: {}", e)))?;
        Ok((setup, out))
    }
}
