//! Experiment configuration read from TOML.
//!
//! Every section and field has a default, so an empty file is a valid
//! configuration for the uncontrolled Test-1 setup (`N = 50`, `d = 2`,
//! `gamma = 0.1`, `T = 10`, `dt = 0.01`, all coordinates in `[0, 1]`).
//!
//! ```toml
//! method = "mdpc"
//! seeds = [0, 1, 2]
//! out_dir = "runs/mdpc"
//!
//! [sim]
//! n_agents = 50
//! velocity_box = { lo = -1.0, hi = 1.0 }
//!
//! [mdpc]
//! delta_tol = 0.1
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{Integrator, SimParams};
use crate::mdpc::{BoundParams, MdpcConfig};
use crate::pmp::GradientSolverConfig;
use crate::surrogate::{Activation, LabelerKind, ModelKind, SampleBox, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Uncontrolled,
    Pmp,
    SdreMpc,
    Mdpc,
    LearnedU,
    LearnedV,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Uncontrolled => "uncontrolled",
            Method::Pmp => "pmp",
            Method::SdreMpc => "sdre-mpc",
            Method::Mdpc => "mdpc",
            Method::LearnedU => "learned-u",
            Method::LearnedV => "learned-v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    pub n_agents: usize,
    pub dim: usize,
    pub gamma: f64,
    pub horizon: f64,
    pub dt: f64,
    pub kernel_gain: f64,
    pub kernel_exponent: f64,
    pub integrator: Integrator,
    pub position_box: SampleBox,
    pub velocity_box: SampleBox,
}

impl Default for SimSection {
    fn default() -> Self {
        let p = SimParams::default();
        Self {
            n_agents: 50,
            dim: 2,
            gamma: p.gamma,
            horizon: p.horizon,
            dt: p.dt,
            kernel_gain: p.kernel_gain,
            kernel_exponent: p.kernel_exponent,
            integrator: p.integrator,
            position_box: SampleBox::UNIT,
            velocity_box: SampleBox::UNIT,
        }
    }
}

impl SimSection {
    pub fn params(&self) -> SimParams {
        SimParams {
            kernel_gain: self.kernel_gain,
            kernel_exponent: self.kernel_exponent,
            gamma: self.gamma,
            horizon: self.horizon,
            dt: self.dt,
            target_velocity: None,
            integrator: self.integrator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdpcSection {
    pub delta_tol: f64,
    /// Linearization constant; defaults to the kernel value at zero.
    pub pbar: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MdpcSection {
    fn default() -> Self {
        let b = BoundParams::default();
        Self {
            delta_tol: 1.0,
            pbar: None,
            alpha: b.alpha,
            beta: b.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdreSection {
    /// Steps between Riccati re-solves.
    pub refresh_steps: usize,
}

impl Default for SdreSection {
    fn default() -> Self {
        Self { refresh_steps: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LearnedSection {
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub labeler: LabelerKind,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            labeler: LabelerKind::Sdre,
            train_samples: 10_000,
            test_samples: 1_000,
            seed: 1,
        }
    }
}

/// One learned model of the Test-1 comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub labeler: LabelerKind,
    pub kind: ModelKind,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Test1Section {
    pub sdre_train_samples: usize,
    pub sdre_test_samples: usize,
    pub pmp_train_samples: usize,
    pub pmp_test_samples: usize,
    pub data_seed: u64,
    pub rollout_seeds: Vec<u64>,
    pub variants: Vec<VariantConfig>,
}

fn variant(name: &str, labeler: LabelerKind, kind: ModelKind, widths: Vec<usize>, act: Activation, mu: f64, epochs: usize) -> VariantConfig {
    VariantConfig {
        name: name.into(),
        labeler,
        kind,
        hidden_widths: widths,
        activation: act,
        train: TrainConfig {
            mu,
            learning_rate: 3e-3,
            lr_decay: 0.97,
            epochs,
            ..TrainConfig::default()
        },
    }
}

impl Default for Test1Section {
    /// Sample counts and (except for `v-sdre`) widths are reduced to fit a
    /// single desktop core; layer counts, activations and `mu` follow the
    /// reference architectures.
    fn default() -> Self {
        use Activation::*;
        use LabelerKind::*;
        use ModelKind::*;
        Self {
            sdre_train_samples: 10_000,
            sdre_test_samples: 1_000,
            pmp_train_samples: 48,
            pmp_test_samples: 16,
            data_seed: 1,
            rollout_seeds: (100..110).collect(),
            variants: vec![
                variant("u-sdre", Sdre, Control, vec![128], Tanh, 0.0, 40),
                variant("u-pmp", Pmp, Control, vec![64, 64, 64], Sigmoid, 0.0, 400),
                variant("v-sdre", Sdre, Value, vec![200, 100], Sigmoid, 0.07, 30),
                variant("v-pmp", Pmp, Value, vec![96], Sigmoid, 0.1, 400),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Test2Section {
    pub tolerances: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Relative slack of the variance sandwich check.
    pub sandwich_slack: f64,
}

impl Default for Test2Section {
    fn default() -> Self {
        Self {
            tolerances: vec![1.0, 0.1],
            seeds: (0..10).collect(),
            sandwich_slack: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub sim: SimSection,
    pub mdpc: MdpcSection,
    pub sdre: SdreSection,
    pub pmp: GradientSolverConfig,
    pub learned: LearnedSection,
    pub data: DataSection,
    pub test1: Test1Section,
    pub test2: Test2Section,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            sim: SimSection::default(),
            mdpc: MdpcSection::default(),
            sdre: SdreSection::default(),
            pmp: GradientSolverConfig::default(),
            learned: LearnedSection::default(),
            data: DataSection::default(),
            test1: Test1Section::default(),
            test2: Test2Section::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn params(&self) -> SimParams {
        self.sim.params()
    }

    pub fn mdpc_config(&self) -> MdpcConfig {
        let params = self.params();
        MdpcConfig {
            pbar: self.mdpc.pbar.unwrap_or(params.kernel_gain),
            delta_tol: self.mdpc.delta_tol,
            bounds: BoundParams {
                alpha: self.mdpc.alpha,
                beta: self.mdpc.beta,
            },
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        self.sim.position_box.validate()?;
        self.sim.velocity_box.validate()?;
        if self.sim.n_agents == 0 || self.sim.dim == 0 {
            return Err(Error::InvalidInput("n_agents and dim must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput("at least one seed is required".into()));
        }
        match self.method {
            Method::Mdpc if !(self.mdpc.delta_tol > 0.0) => {
                return Err(Error::InvalidInput("mdpc needs delta_tol > 0".into()))
            }
            Method::SdreMpc if self.sdre.refresh_steps == 0 => {
                return Err(Error::InvalidInput("sdre-mpc needs refresh_steps >= 1".into()))
            }
            Method::Pmp => self.pmp.validate()?,
            Method::LearnedU | Method::LearnedV if self.learned.model.is_none() => {
                return Err(Error::InvalidInput(format!("{} needs a model path", self.method.name())))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn expected_model_kind(&self) -> Option<ModelKind> {
        match self.method {
            Method::LearnedU => Some(ModelKind::Control),
            Method::LearnedV => Some(ModelKind::Value),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.params(), SimParams::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_and_round_trip() {
        let text = r#"
            method = "mdpc"
            seeds = [3, 4]
            [sim]
            n_agents = 20
            velocity_box = { lo = -1.0, hi = 1.0 }
            [mdpc]
            delta_tol = 0.1
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.method, Method::Mdpc);
        assert_eq!(cfg.sim.n_agents, 20);
        assert_eq!(cfg.sim.velocity_box, SampleBox::SYMMETRIC);
        assert_eq!(cfg.mdpc_config().delta_tol, 0.1);
        assert_eq!(cfg.mdpc_config().pbar, 1.0);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn method_specific_validation() {
        let mut cfg = ExperimentConfig {
            method: Method::LearnedU,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.learned.model = Some("m.json".into());
        cfg.validate().unwrap();
        cfg.method = Method::Mdpc;
        cfg.mdpc.delta_tol = 0.0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"bogus\"").is_err());
    }
}
