//! The JSON run configuration. Command-line flags are applied on top of it.

use std::path::Path;

use fluiddiff::dataset::Split;
use fluiddiff::fluid::SimParams;
use fluiddiff::train::TrainConfig;
use fluiddiff::unet::UNetConfig;
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

/// Name of the resolved-config echo written into every output directory.
pub const ECHO_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub seed: u64,
    /// train:test scene ratio
    pub split_ratio: [u32; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 16,
            seed: 0,
            split_ratio: [4, 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl From<SplitName> for Split {
    fn from(s: SplitName) -> Self {
        match s {
            SplitName::Train => Split::Train,
            SplitName::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: SplitName,
    /// diffusion samples averaged per (scene, tau)
    pub samples_per_case: usize,
    pub seed: u64,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: SplitName::Test,
            samples_per_case: 1,
            seed: 0,
            bins: fluiddiff::metrics::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimParams,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub unet: UNetConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn echo(&self, dir: &Path) -> Result<(), Failure> {
        write_file(&dir.join(ECHO_FILE), self.to_json().as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fluiddiff::fdt::write_bytes(path, bytes).map_err(Failure::from)
}

pub fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}, "unet": {"base_channels": 8}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.unet.base_channels, 8);
        assert_eq!(c.sim, SimParams::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for bad in [
            r#"{"trian": {}}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"sim": {"viscosity": 0.1}}"#,
            r#"{"unet": {"depth": 2}}"#,
            r#"{"data": {"scene": 2}}"#,
            r#"{"eval": {"samples": 2}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = RunConfig::default();
        c.train.seed = 17;
        c.eval.split = SplitName::Train;
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
