//! TOML run configuration.
//!
//! Every key has a default and unknown keys are rejected. Section seeds are not
//! read from the file: the model, simulator, scene and frame-sampler streams are
//! all derived from the top-level `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fields::ModelOptions;
use crate::flowlab::{FlowParams, KltParams};
use crate::optimizer::{Enhancer, TrainConfig};
use crate::oracle::{PromptPair, DEFAULT_TIMEOUT};
use crate::turbsim::TurbulenceParams;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Command line of an external oracle; `None` runs without one.
    pub command: Option<String>,
    pub env: BTreeMap<String, String>,
    pub timeout_secs: f64,
    pub prompts: PromptPair,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            command: None,
            env: BTreeMap::new(),
            timeout_secs: DEFAULT_TIMEOUT.as_secs_f64(),
            prompts: PromptPair::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoPaths {
    /// Observed video (PNG directory or `.fvid`).
    pub input: Option<PathBuf>,
    /// Supervision frames; defaults to the observed video.
    pub supervision: Option<PathBuf>,
    /// Disparity frames; a constant 0.5 map when absent.
    pub disparity: Option<PathBuf>,
    /// Clean reference for PSNR/SSIM.
    pub reference: Option<PathBuf>,
    /// Run directory.
    pub out: Option<PathBuf>,
}

/// Synthetic scene used by `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub flow: FlowParams,
    pub klt: KltParams,
    pub tv_bins: usize,
    /// Upper edge of the TV histogram; the lower edge is 0.
    pub tv_max: f64,
    /// Row for x–t slices; the middle row when absent.
    pub xt_row: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            klt: KltParams::default(),
            tv_bins: 20,
            tv_max: 2.0,
            xt_row: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreConfig {
    pub enhance: Enhancer,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub turbulence: TurbulenceParams,
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
    pub io: IoPaths,
    pub eval: EvalConfig,
    pub restore: RestoreConfig,
}

/// Seed of the named sub-stream of `seed`.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = name
        .bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    rng.set_stream(id);
    rng.next_u64()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.derive_seeds();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
    }

    /// Defaults with seeds derived.
    pub fn resolved_default() -> Self {
        let mut c = Self::default();
        c.derive_seeds();
        c
    }

    pub fn derive_seeds(&mut self) {
        self.turbulence.seed = stream_seed(self.seed, "simulator");
        self.train.seed = stream_seed(self.seed, "sampler");
    }

    pub fn model_seed(&self) -> u64 {
        stream_seed(self.seed, "model")
    }

    pub fn scene_seed(&self) -> u64 {
        stream_seed(self.seed, "scene")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.turbulence.validate().map_err(ConfigError::Invalid)?;
        if !(self.oracle.timeout_secs > 0.0) {
            return Err(ConfigError::Invalid("oracle.timeout_secs must be > 0".into()));
        }
        if self.eval.tv_bins == 0 || !(self.eval.tv_max > 0.0) {
            return Err(ConfigError::Invalid("eval.tv_bins ≥ 1 and eval.tv_max > 0 required".into()));
        }
        if self.eval.flow.window % 2 == 0 {
            return Err(ConfigError::Invalid("eval.flow.window must be odd".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::resolved_default());
        assert_eq!(c.train.iterations, 6000);
        assert_eq!(c.model.deform_grid_downscale, ModelOptions::default().deform_grid_downscale);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rte = 0.1").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_toml("seed = 7\n[train]\niterations = 12\n[train.weights]\nlambda_temp = 0.5\n").unwrap();
        assert_eq!(c.train.iterations, 12);
        assert_eq!(c.train.weights.lambda_temp, 0.5);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        let a = stream_seed(3, "model");
        assert_eq!(a, stream_seed(3, "model"));
        assert_ne!(a, stream_seed(3, "simulator"));
        assert_ne!(a, stream_seed(4, "model"));
    }
}
