//! JSON run configuration shared by the CLI subcommands.
//!
//! ```json
//! {
//!   "data":    { "H": 64, "W": 64, "n_phantoms": 40, "seed": 1 },
//!   "augment": { "n_normal": 20, "per_normal": 5, "rounds": 4, "seed": 77 },
//!   "model":   { "input_size": [64, 64], "seed": 3 },
//!   "train":   { "max_iter": 2000, "seed": 4 },
//!   "eval":    { "threshold": 0.5 }
//! }
//! ```
//!
//! Unknown keys are rejected and every seed is mandatory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::dataset::DataSpec;
use crate::error::{Error, Result};
use crate::segnet::{SegmentorConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { threshold: default_threshold() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSpec,
    #[serde(default)]
    pub augment: Option<AugmentSpec>,
    pub model: SegmentorConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.input_size != [self.data.height, self.data.width] {
            return Err(Error::InvalidConfig(format!(
                "model.input_size {:?} differs from the data size {}x{}",
                self.model.input_size, self.data.height, self.data.width
            )));
        }
        if let Some(a) = &self.augment {
            if a.n_normal < 1 || a.per_normal < 1 || a.rounds < 1 {
                return Err(Error::InvalidConfig("augment counts must be >= 1".into()));
            }
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::InvalidConfig("eval.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn augment_spec(&self) -> Result<&AugmentSpec> {
        self.augment.as_ref().ok_or_else(|| Error::InvalidConfig("configuration has no augment section".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "data": {"H": 32, "W": 32, "n_phantoms": 10, "seed": 1},
        "model": {"input_size": [32, 32], "seed": 2},
        "train": {"max_iter": 5, "seed": 3}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(GOOD).unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.eval.threshold, 0.5);
        assert!(cfg.augment.is_none());
        assert!(matches!(cfg.augment_spec(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_unknown_keys_missing_seeds_and_size_mismatch() {
        let unknown = GOOD.replace("\"n_phantoms\"", "\"bogus\": 1, \"n_phantoms\"");
        assert!(matches!(RunConfig::from_json(&unknown), Err(Error::InvalidConfig(_))));
        let no_seed = GOOD.replace(", \"seed\": 3", "");
        assert!(matches!(RunConfig::from_json(&no_seed), Err(Error::InvalidConfig(_))));
        let mismatch = GOOD.replace("[32, 32]", "[64, 64]");
        assert!(matches!(RunConfig::from_json(&mismatch), Err(Error::InvalidConfig(_))));
    }
}
