//! Declarative run configuration loaded from TOML.
//!
//! Every key is optional; missing keys take the documented defaults.
//!
//! ```toml
//! backend = "toy"            # or "adapter:NAME"
//! k = 48                     # watermark length: 16, 32 or 48
//! alpha = 0.01
//! seed = 0
//! ecc = true                 # RSC-protect the identity payload
//! paper_compat = false       # pin 34/48 and 24/32 thresholds
//! inversion_steps = 5
//! hamming_floor = 4
//!
//! [paths]
//! backend = "artifacts/backend.lmk"
//! codec = "artifacts/codec.lmk"
//! registry = "artifacts/registry.json"
//! output = "out"
//!
//! [guidance]                 # scale, condition ("null" or class index), num_inference_steps
//! [toy]                      # toy backend training
//! [pretrain]                 # codec pretraining
//! [finetune]                 # decoder fine-tuning
//! [eval]                     # evaluation run
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::ThresholdPolicy;
use crate::diffusion::GuidanceConfig;
use crate::ecc::RscConfig;
use crate::error::{Error, Result};
use crate::eval::EvalRun;
use crate::registry::DEFAULT_HAMMING_FLOOR;
use crate::toy::ToyBackendConfig;
use crate::training::{FinetuneConfig, PretrainConfig};

/// Which diffusion backend a command runs against.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum BackendChoice {
    #[default]
    Toy,
    /// An externally provided backend registered under this name.
    Adapter(String),
}

impl FromStr for BackendChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendChoice::Toy),
            _ => match s.strip_prefix("adapter:") {
                Some(name) if !name.is_empty() => Ok(BackendChoice::Adapter(name.to_string())),
                _ => Err(Error::Config(format!("backend must be `toy` or `adapter:NAME`, got `{s}`"))),
            },
        }
    }
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendChoice::Toy => f.write_str("toy"),
            BackendChoice::Adapter(name) => write!(f, "adapter:{name}"),
        }
    }
}

impl From<BackendChoice> for String {
    fn from(b: BackendChoice) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for BackendChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub backend: PathBuf,
    pub codec: PathBuf,
    pub registry: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            backend: "artifacts/backend.lmk".into(),
            codec: "artifacts/codec.lmk".into(),
            registry: "artifacts/registry.json".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendChoice,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub ecc: bool,
    pub paper_compat: bool,
    pub inversion_steps: usize,
    pub hamming_floor: usize,
    pub paths: Paths,
    pub guidance: GuidanceConfig,
    pub toy: ToyBackendConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalRun,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Toy,
            k: 48,
            alpha: 0.01,
            seed: 0,
            ecc: true,
            paper_compat: false,
            inversion_steps: 5,
            hamming_floor: DEFAULT_HAMMING_FLOOR,
            paths: Paths::default(),
            guidance: GuidanceConfig::default(),
            toy: ToyBackendConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalRun::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| e.context(format!("loading {}", path.display())))?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.paths.backend,
                &mut cfg.paths.codec,
                &mut cfg.paths.registry,
                &mut cfg.paths.output,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.k, 16 | 32 | 48) {
            return Err(Error::Config(format!("k must be 16, 32 or 48, got {}", self.k)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.ecc {
            RscConfig::for_watermark_length(self.k)?;
        }
        Ok(())
    }

    pub fn policy(&self) -> ThresholdPolicy {
        if self.paper_compat {
            ThresholdPolicy::PaperCompat
        } else {
            ThresholdPolicy::Exact
        }
    }

    /// The RSC configuration matching `k`, when ECC is enabled.
    pub fn ecc_config(&self) -> Result<Option<RscConfig>> {
        if self.ecc {
            RscConfig::for_watermark_length(self.k).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Identity payload length: the ECC payload, or `k` without ECC.
    pub fn payload_length(&self) -> Result<usize> {
        Ok(self.ecc_config()?.map_or(self.k, |c| c.payload_length))
    }
}
