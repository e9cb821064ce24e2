//! Line-based `key = value` run configuration.
//!
//! Blank lines and `#` comments are allowed; unknown keys are rejected, and
//! every parse error names its line.

use std::path::{Path, PathBuf};

use sepconv_core::datapipe::{BlockMatchSettings, ExtractSettings};
use sepconv_core::model::{ModelConfig, Variant};

use crate::error::{CliError, CliResult};

/// Which feature extractor `finetune` uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorChoice {
    Identity,
    RandomPyramid,
    External(PathBuf),
}

/// Everything a run can configure, with desk-scale-friendly defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train_steps: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    pub lf_lr: f64,
    pub extractor: ExtractorChoice,
    /// Source patch side stored in datasets.
    pub data_patch: usize,
    /// Training crop side.
    pub data_crop: usize,
    pub data_max_shift: i32,
    pub data_stride: usize,
    pub data_shot_threshold: f64,
    pub data_texture_threshold: f64,
    pub data_target_count: usize,
    pub data_block: usize,
    pub data_radius: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train_steps: 1000,
            batch_size: 16,
            checkpoint_interval: 0,
            lf_lr: 1e-4,
            extractor: ExtractorChoice::RandomPyramid,
            data_patch: 150,
            data_crop: 128,
            data_max_shift: 6,
            data_stride: 25,
            data_shot_threshold: 0.25,
            data_texture_threshold: 0.02,
            data_target_count: 250_000,
            data_block: 8,
            data_radius: 24,
        }
    }
}

impl RunConfig {
    pub fn extract_settings(&self) -> ExtractSettings {
        ExtractSettings {
            patch: self.data_patch,
            stride: self.data_stride,
            shot_threshold: self.data_shot_threshold,
            texture_threshold: self.data_texture_threshold,
            flow: BlockMatchSettings {
                block: self.data_block,
                radius: self.data_radius,
                texture_threshold: self.data_texture_threshold,
            },
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = lineno + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {lineno}: expected `key = value`, got `{raw}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                CliError::Config(format!("line {lineno}: {key}: invalid {what} `{value}`"))
            };
            match key {
                "seed" => config.seed = value.parse().map_err(|_| bad("integer"))?,
                "model.levels" => config.model.levels = value.parse().map_err(|_| bad("integer"))?,
                "model.widths" => {
                    config.model.widths = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("width list"))?;
                }
                "model.convs_per_block" => {
                    config.model.convs_per_block = value.parse().map_err(|_| bad("integer"))?
                }
                "model.kernel_size" => {
                    config.model.kernel_size = value.parse().map_err(|_| bad("integer"))?
                }
                "model.variant" => {
                    config.model.variant = match value {
                        "kernel_prediction" => Variant::KernelPrediction,
                        "direct_synthesis" => Variant::DirectSynthesis,
                        _ => return Err(bad("variant")),
                    }
                }
                "model.width_scale" => {
                    config.model.width_scale = value.parse().map_err(|_| bad("integer"))?
                }
                "train.steps" => config.train_steps = value.parse().map_err(|_| bad("integer"))?,
                "train.batch_size" => {
                    config.batch_size = value.parse().map_err(|_| bad("integer"))?
                }
                "train.checkpoint_interval" => {
                    config.checkpoint_interval = value.parse().map_err(|_| bad("integer"))?
                }
                "train.lf_lr" => config.lf_lr = value.parse().map_err(|_| bad("number"))?,
                "train.extractor" => {
                    config.extractor = match value {
                        "identity" => ExtractorChoice::Identity,
                        "random_pyramid" => ExtractorChoice::RandomPyramid,
                        other => match other.strip_prefix("external:") {
                            Some(path) if !path.is_empty() => {
                                ExtractorChoice::External(PathBuf::from(path))
                            }
                            _ => return Err(bad("extractor")),
                        },
                    }
                }
                "data.patch" => config.data_patch = value.parse().map_err(|_| bad("integer"))?,
                "data.crop" => config.data_crop = value.parse().map_err(|_| bad("integer"))?,
                "data.max_shift" => {
                    config.data_max_shift = value.parse().map_err(|_| bad("integer"))?
                }
                "data.stride" => config.data_stride = value.parse().map_err(|_| bad("integer"))?,
                "data.shot_threshold" => {
                    config.data_shot_threshold = value.parse().map_err(|_| bad("number"))?
                }
                "data.texture_threshold" => {
                    config.data_texture_threshold = value.parse().map_err(|_| bad("number"))?
                }
                "data.target_count" => {
                    config.data_target_count = value.parse().map_err(|_| bad("integer"))?
                }
                "data.block" => config.data_block = value.parse().map_err(|_| bad("integer"))?,
                "data.radius" => config.data_radius = value.parse().map_err(|_| bad("integer"))?,
                unknown => {
                    return Err(CliError::Config(format!(
                        "line {lineno}: unknown key `{unknown}`"
                    )))
                }
            }
        }
        config.model.validate().map_err(CliError::from)?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn full_example_parses() {
        let text = "\
# toy run
seed = 42
model.levels = 3
model.widths = 8, 16, 32
model.kernel_size = 15
model.width_scale = 2
train.steps = 50
train.extractor = external:weights/phi.sepw
data.stride = 5
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.model.levels, 3);
        assert_eq!(c.model.widths, vec![8, 16, 32]);
        assert_eq!(c.model.kernel_size, 15);
        assert_eq!(c.train_steps, 50);
        assert_eq!(
            c.extractor,
            ExtractorChoice::External(PathBuf::from("weights/phi.sepw"))
        );
        assert_eq!(c.data_stride, 5);
    }

    #[test]
    fn unknown_key_names_its_line() {
        let err = RunConfig::parse("seed = 1\nbogus.key = 2\n").unwrap_err();
        match err {
            CliError::Config(m) => {
                assert!(m.contains("line 2"), "{m}");
                assert!(m.contains("bogus.key"), "{m}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_value_names_its_line() {
        let err = RunConfig::parse("\n\nseed = not-a-number\n").unwrap_err();
        match err {
            CliError::Config(m) => assert!(m.contains("line 3"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_equals_rejected() {
        let err = RunConfig::parse("seed 5\n").unwrap_err();
        match err {
            CliError::Config(m) => assert!(m.contains("line 1"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_model_rejected() {
        // widths length must match levels.
        let err = RunConfig::parse("model.levels = 2\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }
}
