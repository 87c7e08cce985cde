//! Experiment configuration: one flat TOML document with a model block,
//! an engine block and a run block. Unknown keys are rejected, and every
//! run stamps its artifacts with a hash of the canonical serialization so
//! outputs can be traced back to the exact inputs.

use crate::environment::{PotentialKind, PotentialLaw};
use crate::lattice::{simple_walk, StepDistribution};
use crate::partition::PolymerModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_dimension() -> usize {
    2
}
fn default_beta() -> f64 {
    1.0
}
fn default_law() -> String {
    "traps".into()
}
fn default_h() -> Vec<f64> {
    vec![2.0, 0.0]
}
fn default_p_inf() -> Option<f64> {
    Some(0.2)
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// One of "traps", "two-point", "exponential", "bounded".
    #[serde(default = "default_law")]
    pub law: String,
    #[serde(default = "default_p_inf", skip_serializing_if = "Option::is_none")]
    pub p_inf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_h")]
    pub h: Vec<f64>,
    /// Killing rate; subcommands that need one and find none estimate it
    /// from the annealed ladder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            dimension: default_dimension(),
            law: default_law(),
            p_inf: default_p_inf(),
            v0: None,
            v1: None,
            p: None,
            rate: None,
            beta: default_beta(),
            h: default_h(),
            lambda: None,
        }
    }
}

fn default_cap() -> u64 {
    1 << 26
}
fn default_n_max() -> usize {
    12
}
fn default_m_cap() -> usize {
    6
}
fn default_tolerance() -> f64 {
    1e-10
}
fn default_directions() -> usize {
    128
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EngineBlock {
    /// Node budget for exhaustive annealed walks.
    #[serde(default = "default_cap")]
    pub cap: u64,
    /// Horizon in lattice steps.
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    /// Duration cap of the truncated irreducible kernel.
    #[serde(default = "default_m_cap")]
    pub m_cap: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Angular resolution of direction tables.
    #[serde(default = "default_directions")]
    pub directions: usize,
}

impl Default for EngineBlock {
    fn default() -> Self {
        EngineBlock {
            cap: default_cap(),
            n_max: default_n_max(),
            m_cap: default_m_cap(),
            tolerance: default_tolerance(),
            directions: default_directions(),
        }
    }
}

fn default_seeds() -> usize {
    100
}
fn default_out() -> String {
    "out".into()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// 0 lets the worker pool pick its own width. Not part of the config
    /// hash: worker count must never change the science.
    #[serde(default, skip_serializing)]
    pub threads: usize,
    /// Output directory; also excluded from the hash.
    #[serde(default = "default_out", skip_serializing)]
    pub out: String,
}

impl Default for RunBlock {
    fn default() -> Self {
        RunBlock { seeds: default_seeds(), base_seed: 0, threads: 0, out: default_out() }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub engine: EngineBlock,
    #[serde(default)]
    pub run: RunBlock,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Named presets shipped with the binary.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let text = match name {
            // one-dimensional walk among half-density traps, no drift
            "traps-half" => {
                "[model]\ndimension = 1\nlaw = \"traps\"\np_inf = 0.5\nh = [0.0]\n"
            }
            // supercritical two-dimensional stretched polymer among traps
            "traps-d2" => {
                "[model]\ndimension = 2\nlaw = \"traps\"\np_inf = 0.2\nh = [2.0, 0.0]\n"
            }
            // denser traps where the quenched/annealed gap opens
            "traps-d2-strong" => {
                "[model]\ndimension = 2\nlaw = \"traps\"\np_inf = 0.4\nh = [2.0, 0.0]\n"
            }
            other => {
                return Err(ConfigError::Invalid(format!("unknown preset {other}")));
            }
        };
        Self::from_str(text)
    }

    /// Environment-variable overrides for the two knobs that vary between
    /// otherwise identical runs.
    pub fn apply_env(&mut self) {
        if let Ok(s) = std::env::var("POLYMER_LAB_SEED") {
            if let Ok(v) = s.parse() {
                self.run.base_seed = v;
            }
        }
        if let Ok(s) = std::env::var("POLYMER_LAB_OUT") {
            self.run.out = s;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=4).contains(&self.model.dimension) {
            return Err(ConfigError::Invalid(format!(
                "dimension {} out of range",
                self.model.dimension
            )));
        }
        if self.model.h.len() > 4 {
            return Err(ConfigError::Invalid("drift has more than 4 components".into()));
        }
        self.law().map(|_| ())
    }

    pub fn steps(&self) -> StepDistribution {
        simple_walk(self.model.dimension)
    }

    pub fn law(&self) -> Result<PotentialLaw, ConfigError> {
        let m = &self.model;
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| ConfigError::Invalid(format!("law {} needs `{name}`", m.law)))
        };
        let kind = match m.law.as_str() {
            "traps" => PotentialKind::BernoulliTrap { p_inf: need(m.p_inf, "p_inf")? },
            "two-point" => PotentialKind::TwoPoint {
                v0: need(m.v0, "v0")?,
                v1: need(m.v1, "v1")?,
                p: need(m.p, "p")?,
            },
            "exponential" => PotentialKind::Exponential { rate: need(m.rate, "rate")? },
            other => {
                return Err(ConfigError::Invalid(format!("unknown law {other}")));
            }
        };
        PotentialLaw::new(kind, m.beta)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn h4(&self) -> [f64; 4] {
        let mut h = [0.0; 4];
        for (slot, v) in h.iter_mut().zip(&self.model.h) {
            *slot = *v;
        }
        h
    }

    pub fn polymer_model(&self, lambda: f64) -> Result<PolymerModel, ConfigError> {
        PolymerModel::new(self.steps(), self.law()?, self.h4(), lambda)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Hash of the canonical serialization; embedded in every artifact.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
