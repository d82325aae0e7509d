//! Experiment configuration, read from TOML with a fixed schema.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pvm_core::autodiff::AdamConfig;
use pvm_core::datagen::{BrushGrid, MaskPolicy};
use pvm_core::models::{ClsConfig, DepthConfig, Variant};
use pvm_core::pvm::TokenPadding;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Overrides `out_dir` when set.
pub const OUT_DIR_ENV: &str = "PVM_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cls,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    /// Seed of the dataset and its masks; training seeds only change
    /// initialization and sample order.
    pub seed: u64,
    /// Sampled fraction of the sparse depth input.
    pub density: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 1000,
            test: 200,
            seed: 0,
            density: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// One run per variant and seed.
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub token_padding: Option<TokenPadding>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    /// Training and test masks of the classifier.
    #[serde(default)]
    pub mask: Option<MaskPolicy>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub cls: Option<ClsConfig>,
    #[serde(default)]
    pub depth: Option<DepthConfig>,
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Pvm, Variant::Vm]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_epochs() -> usize {
    1
}

fn default_batch() -> usize {
    16
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Model configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelConfig {
    Cls(ClsConfig),
    Depth(DepthConfig),
}

impl ModelConfig {
    pub fn variant(&self) -> Variant {
        match self {
            ModelConfig::Cls(c) => c.variant,
            ModelConfig::Depth(c) => c.variant,
        }
    }

    /// SHA-256 over the canonical JSON form; checkpoints carry it so a
    /// checkpoint can only be evaluated with the architecture it was
    /// trained with.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).context("invalid config")?;
        match cfg.task {
            Task::Cls if cfg.cls.is_none() => cfg.cls = Some(ClsConfig::default()),
            Task::Depth if cfg.depth.is_none() => cfg.depth = Some(DepthConfig::default()),
            _ => {}
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            cfg.out_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            bail!("variants and seeds must be non-empty");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            bail!("epochs and batch_size must be positive");
        }
        if self.data.train == 0 || self.data.test == 0 {
            bail!("data.train and data.test must be positive");
        }
        if !(self.optimizer.lr > 0.0) {
            bail!("optimizer.lr must be positive");
        }
        match self.task {
            Task::Cls => {
                if self.depth.is_some() {
                    bail!("[depth] section given for a cls task");
                }
                let m = self.cls.as_ref().expect("filled in by from_toml");
                m.validate()?;
                if let MaskPolicy::BrushGrid(b) = self.mask_policy() {
                    if !m.patch.is_multiple_of(b.patch) {
                        bail!("mask.patch {} does not divide model patch {}", b.patch, m.patch);
                    }
                }
            }
            Task::Depth => {
                if self.cls.is_some() || self.mask.is_some() {
                    bail!("[cls] and [mask] sections do not apply to a depth task");
                }
                self.depth.as_ref().expect("filled in by from_toml").validate()?;
                if !(self.data.density > 0.0 && self.data.density <= 1.0) {
                    bail!("data.density must lie in (0, 1]");
                }
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        match self.task {
            Task::Cls => self.cls.as_ref().map_or(32, |c| c.image_size),
            Task::Depth => self.depth.as_ref().map_or(64, |c| c.image_size),
        }
    }

    /// Classifier mask policy; defaults to a brush grid at the model's patch size.
    pub fn mask_policy(&self) -> MaskPolicy {
        self.mask.clone().unwrap_or_else(|| {
            MaskPolicy::BrushGrid(BrushGrid {
                patch: self.cls.as_ref().map_or(4, |c| c.patch),
                ..BrushGrid::default()
            })
        })
    }

    /// Model configuration of `variant`, with the padding override applied.
    pub fn model(&self, variant: Variant) -> ModelConfig {
        match self.task {
            Task::Cls => {
                let mut c = self.cls.clone().unwrap_or_default();
                c.variant = variant;
                if let Some(p) = self.token_padding {
                    c.token_padding = p;
                }
                ModelConfig::Cls(c)
            }
            Task::Depth => {
                let mut c = self.depth.clone().unwrap_or_default();
                c.variant = variant;
                if let Some(p) = self.token_padding {
                    c.token_padding = p;
                }
                ModelConfig::Depth(c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml("task = \"cls\"\n").unwrap();
        assert_eq!(c.variants, vec![Variant::Pvm, Variant::Vm]);
        assert_eq!(c.cls, Some(ClsConfig::default()));
        assert!(matches!(c.mask_policy(), MaskPolicy::BrushGrid(BrushGrid { patch: 4, .. })));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("task = \"cls\"\nlearning_rate = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("task = \"cls\"\n[cls]\nwidth = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("task = \"depth\"\n[depth]\nfeatures = 4\n[cls]\n").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
task = "depth"
variants = ["pvm"]
seeds = [1, 2]
token_padding = "mean"

[data]
train = 10
test = 2
density = 0.1

[depth]
image_size = 16
features = 4
dim = 8

[optimizer]
lr = 0.002
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        let ModelConfig::Depth(m) = c.model(Variant::Pvm) else { panic!() };
        assert_eq!((m.image_size, m.features, m.token_padding), (16, 4, TokenPadding::Mean));
        assert_eq!(c.optimizer.lr, 0.002);
    }

    #[test]
    fn hash_tracks_architecture() {
        let c = ExperimentConfig::from_toml("task = \"cls\"\n").unwrap();
        assert_eq!(c.model(Variant::Pvm).hash(), c.model(Variant::Pvm).hash());
        assert_ne!(c.model(Variant::Pvm).hash(), c.model(Variant::Vm).hash());
        assert_eq!(c.model(Variant::Pvm).hash().len(), 64);
    }
}
