//! Flat, versioned TOML experiment config. Every key has a default and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use exposure_dro::encoders::{Architecture, DEFAULT_CLICK_LEN, DEFAULT_DIM, DEFAULT_EXPOSURE_LEN, DEFAULT_LR};
use exposure_dro::evaluation::{DEFAULT_KS, DEFAULT_SNIPS_K};
use exposure_dro::exposure::DEFAULT_BETA;
use exposure_dro::pipeline::ExperimentSettings;
use exposure_dro::synthworld::{LoggingPolicy, PolicyKind, WorldConfig};
use exposure_dro::trainer::TrainSettings;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodName {
    #[serde(rename = "none")]
    Vanilla,
    #[serde(rename = "ips")]
    Ips,
    #[serde(rename = "ips_c")]
    IpsClipped,
    #[serde(rename = "relmf")]
    RelMf,
    #[serde(rename = "dro")]
    Dro,
}

impl MethodName {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "none",
            Self::Ips => "ips",
            Self::IpsClipped => "ips_c",
            Self::RelMf => "relmf",
            Self::Dro => "dro",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    /// Event log read instead of `<out>/events.tsv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,

    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub world_scale: f64,
    pub user_mean: f64,
    pub item_mean: f64,
    pub drift: f64,
    pub successors: usize,
    pub zipf: f64,
    pub policy: PolicyKind,
    pub slate: usize,
    pub rounds: usize,
    pub skew: f64,
    pub policy_dim: usize,
    pub policy_epochs: usize,

    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    /// Share of each user's exposures used to train the exposure simulator.
    pub expo_fraction: f64,

    pub backbone: Architecture,
    pub method: MethodName,
    pub a: f64,
    pub beta: f64,
    /// SNIPS exponent.
    pub k: f64,
    pub ks: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dim: usize,
    pub click_len: usize,
    pub exposure_len: usize,
    pub simulator_epochs: usize,
    pub identity_heads: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = ExperimentSettings::default();
        let (w, p) = (s.world, s.policy);
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            log_file: None,
            out_dir: None,
            n_users: w.n_users,
            n_items: w.n_items,
            latent_dim: w.dim,
            world_scale: w.scale,
            user_mean: w.user_mean,
            item_mean: w.item_mean,
            drift: w.drift,
            successors: w.successors,
            zipf: w.zipf,
            policy: p.kind,
            slate: p.slate,
            rounds: p.rounds,
            skew: p.skew,
            policy_dim: p.model_dim,
            policy_epochs: p.model_epochs,
            train_ratio: s.ratios.0,
            valid_ratio: s.ratios.1,
            test_ratio: s.ratios.2,
            expo_fraction: s.expo_fraction,
            backbone: Architecture::Attention,
            method: MethodName::Dro,
            a: 1.0,
            beta: DEFAULT_BETA,
            k: DEFAULT_SNIPS_K,
            ks: DEFAULT_KS.to_vec(),
            epochs: s.train.epochs,
            batch_size: s.train.batch_size,
            lr: DEFAULT_LR,
            dim: DEFAULT_DIM,
            click_len: DEFAULT_CLICK_LEN,
            exposure_len: DEFAULT_EXPOSURE_LEN,
            simulator_epochs: s.simulator_train.epochs,
            identity_heads: s.identity_heads,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Parses `path` and checks that every referenced input exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| CliError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if let Some(log) = &self.log_file {
            if !log.is_file() {
                return Err(CliError::MissingFile(log.clone()));
            }
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(CliError::Config("ks must list positive cutoffs".into()));
        }
        if !(self.a >= 0.0) {
            return Err(CliError::Config(format!("a = {} must be non-negative", self.a)));
        }
        if !(self.k >= 0.0 && self.k <= 1.0) {
            return Err(CliError::Config(format!("k = {} must lie in [0, 1]", self.k)));
        }
        Ok(())
    }

    pub fn settings(&self) -> ExperimentSettings {
        let train = TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            max_len: self.click_len,
            seed: self.seed,
        };
        ExperimentSettings {
            world: WorldConfig {
                n_users: self.n_users,
                n_items: self.n_items,
                dim: self.latent_dim,
                scale: self.world_scale,
                user_mean: self.user_mean,
                item_mean: self.item_mean,
                drift: self.drift,
                successors: self.successors,
                zipf: self.zipf,
            },
            policy: LoggingPolicy {
                kind: self.policy,
                slate: self.slate,
                rounds: self.rounds,
                skew: self.skew,
                model_dim: self.policy_dim,
                model_epochs: self.policy_epochs,
            },
            ratios: (self.train_ratio, self.valid_ratio, self.test_ratio),
            expo_fraction: self.expo_fraction,
            dim: self.dim,
            click_len: self.click_len,
            exposure_len: self.exposure_len,
            beta: self.beta,
            identity_heads: self.identity_heads,
            train,
            simulator_train: TrainSettings { epochs: self.simulator_epochs, ..train },
        }
    }

    /// Hash of everything except the seed and the paths, so repeated seeds
    /// of one experiment share it.
    pub fn config_hash(&self) -> Result<String> {
        let stripped = Self { seed: 0, log_file: None, out_dir: None, ..self.clone() };
        let digest = Sha256::digest(stripped.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// Short human label: backbone, method and `a` for DRO.
    pub fn label(&self) -> String {
        let arch = match self.backbone {
            Architecture::Attention => "attention",
            Architecture::Recurrent => "recurrent",
        };
        match self.method {
            MethodName::Dro => format!("{arch}/dro(a={})", self.a),
            m => format!("{arch}/{}", m.name()),
        }
    }
}
