//! Strict TOML run configuration. Every section and key is optional; absent
//! keys take their defaults, unknown keys and type mismatches are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::PretrainConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding the binary archive; overridden by the environment
    /// and the command line.
    pub root: Option<PathBuf>,
    /// Stratified fraction of each split used by the labelling, CAM,
    /// training and evaluation stages.
    pub subset_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, subset_fraction: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub wgn_seed: u64,
    /// Images exported by `visualize` when no ids are given.
    pub visual_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { wgn_seed: 0, visual_count: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub classifiers: PretrainConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.subset_fraction > 0.0 && self.data.subset_fraction <= 1.0) {
            return Err(Error::Config(format!("data.subset_fraction {} outside (0, 1]", self.data.subset_fraction)));
        }
        let c = &self.classifiers;
        if !(c.train_fraction > 0.0 && c.train_fraction <= 1.0) || c.width == 0 || c.batch_size == 0 || !(c.learning_rate > 0.0) {
            return Err(Error::Config("classifiers: width, batch_size and learning_rate must be positive, train_fraction in (0, 1]".into()));
        }
        self.train.validate()?;
        crate::generator::build_generator::<f32>(&GeneratorConfig {
            encoder_widths: self.generator.encoder_widths.iter().map(|_| 1).collect(),
            ..self.generator.clone()
        })?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Read and validate a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Loss3Mode;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.batch_size, 50);
        assert_eq!(c.train.learning_rate, 1e-5);
        assert_eq!(c.train.weight_decay, 1e-3);
        assert_eq!((c.train.alpha, c.train.beta, c.train.flip_probability), (1.0, 1.0, 0.5));
        assert_eq!(c.generator.encoder_widths, vec![64, 128, 256]);
    }

    #[test]
    fn ablation_and_overrides() {
        let c = RunConfig::parse("[train]\nalpha = 0\nbeta = 0.0\nloss3_mode = \"signed\"\n[data]\nsubset_fraction = 0.1\n").unwrap();
        assert_eq!((c.train.alpha, c.train.beta), (0.0, 0.0));
        assert_eq!(c.train.loss3_mode, Loss3Mode::Signed);
        assert_eq!(c.data.subset_fraction, 0.1);
    }

    #[test]
    fn strict_parsing() {
        for bad in [
            "[train]\nlearning_rte = 1e-4\n",
            "[trian]\nepochs = 3\n",
            "[train]\nepochs = \"ten\"\n",
            "top_level = 1\n",
            "[data]\nsubset_fraction = 0\n",
            "[generator]\ndeconv_stride = 1\n",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.train.epochs = 7;
        c.data.root = Some("/data/cifar".into());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
