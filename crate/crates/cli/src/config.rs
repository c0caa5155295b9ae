//! Run configuration file: plain-text `key = value` with dotted sections
//! (`synth.*`, `train.*`, `eval.*`), parsed as TOML. Unknown keys are hard
//! errors; missing keys fall back to the documented defaults.

use serde::{Deserialize, Serialize};
use voiceface_core::eval::EvalConfig;
use voiceface_core::synth::SynthConfig;
use voiceface_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub fn load_config(path: &std::path::Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Command-line and environment overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub keep_ratio: Option<f64>,
    pub disable_explicit: bool,
    pub disable_implicit: bool,
    pub disable_reweighting: bool,
}

pub const SEED_ENV: &str = "VF_SEED";
pub const THREADS_ENV: &str = "VF_THREADS";

pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

impl Overrides {
    /// Resolution order: file < command line < environment.
    pub fn apply(&self, config: &mut FileConfig) -> Result<(), CliError> {
        if let Some(r) = self.keep_ratio {
            config.train.keep_ratio = r;
        }
        config.train.disable_explicit |= self.disable_explicit;
        config.train.disable_implicit |= self.disable_implicit;
        config.train.disable_reweighting |= self.disable_reweighting;
        // the hardness signal is the implicit loss: dropping it drops
        // re-weighting too (the -I ablation implies -W)
        if config.train.disable_implicit {
            config.train.disable_reweighting = true;
        }
        let mut seed = self.seed;
        if let Some(env) = env_seed()? {
            seed = Some(env);
        }
        if let Some(s) = seed {
            config.train.seed = s;
            config.synth.seed = s;
        }
        Ok(())
    }
}
