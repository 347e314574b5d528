//! Experiment configuration: every stage's hyperparameters in one JSON
//! document. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::VaeConfig;
use crate::data::DataConfig;
use crate::diffusion::{CondKind, DiffusionConfig};
use crate::dino::DinoConfig;
use crate::error::{Error, Result};
use crate::vit::{ClassifierTrainConfig, VitConfig};

/// Which synthetic patches, if any, augment classifier training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Ssl,
    Class,
}

impl Augmentation {
    pub fn cond_kind(self) -> Option<CondKind> {
        match self {
            Augmentation::None => None,
            Augmentation::Ssl => Some(CondKind::Ssl),
            Augmentation::Class => Some(CondKind::Class),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Ssl => "ssl",
            Augmentation::Class => "class",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Synthetic patches per class. When absent, `synthetic_fraction` of the
    /// fold's real training patch count is used per class.
    pub count_per_class: Option<usize>,
    pub synthetic_fraction: f64,
    /// Compute FID between real training and synthetic patch features.
    pub fid: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { steps: 50, guidance_scale: 2.0, count_per_class: None, synthetic_fraction: 0.029, fid: true }
    }
}

impl SamplingConfig {
    pub fn per_class(&self, real_train: usize) -> usize {
        self.count_per_class.unwrap_or_else(|| (self.synthetic_fraction * real_train as f64).round() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub vit: VitConfig,
    pub train: ClassifierTrainConfig,
}

/// Caps on the number of real training patches fed to the generative
/// stages. `None` uses every training patch of the fold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBudget {
    pub ssl_patches: Option<usize>,
    pub vae_patches: Option<usize>,
    pub ldm_patches: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub val_fraction: f64,
    /// Slide threshold θ on the malignant patch fraction.
    pub threshold: f64,
    pub augmentation: Augmentation,
    pub data: DataConfig,
    pub ssl: DinoConfig,
    pub vae: VaeConfig,
    pub ldm: DiffusionConfig,
    pub sampling: SamplingConfig,
    pub classifier: ClassifierConfig,
    pub budget: StageBudget,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy-ssl".into(),
            data_seed: 7,
            seeds: vec![0, 1, 2],
            folds: 5,
            val_fraction: 0.2,
            threshold: 0.2,
            augmentation: Augmentation::Ssl,
            data: DataConfig::default(),
            ssl: DinoConfig::default(),
            vae: VaeConfig::default(),
            ldm: DiffusionConfig::default(),
            sampling: SamplingConfig::default(),
            classifier: ClassifierConfig { vit: VitConfig::default(), train: ClassifierTrainConfig::default() },
            budget: StageBudget::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced widths, epochs and patch budgets that keep a full 5-fold,
    /// 3-seed run within minutes on one core.
    pub fn ci() -> Self {
        let small_vit = VitConfig { image_side: 32, patch: 8, channels: 3, width: 32, depth: 2, heads: 4, mlp_ratio: 2 };
        Self {
            name: "ci-ssl".into(),
            ssl: DinoConfig {
                vit: small_vit.clone(),
                head_hidden: 64,
                n_local: 2,
                epochs: 4,
                batch_size: 32,
                teacher_momentum: 0.99,
                ..DinoConfig::default()
            },
            vae: VaeConfig { widths: vec![8, 16], epochs: 4, batch_size: 32, lr: 2e-3, ..VaeConfig::default() },
            ldm: DiffusionConfig {
                widths: (16, 32),
                time_dim: 16,
                epochs: 6,
                batch_size: 32,
                lr: 1e-3,
                ..DiffusionConfig::default()
            },
            sampling: SamplingConfig { count_per_class: Some(40), ..SamplingConfig::default() },
            classifier: ClassifierConfig {
                vit: small_vit,
                train: ClassifierTrainConfig { epochs: 6, lr: 0.05, momentum: 0.9, batch_size: 32, flip_augment: true },
            },
            budget: StageBudget { ssl_patches: Some(384), vae_patches: Some(384), ldm_patches: Some(768) },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "ci" => Ok(Self::ci()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `default` or `ci`)"))),
        }
    }

    pub fn with_augmentation(mut self, aug: Augmentation) -> Self {
        let base = self.name.rsplit_once('-').map_or(self.name.as_str(), |(b, _)| b).to_string();
        self.name = format!("{base}-{}", aug.as_str());
        self.augmentation = aug;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Diffusion settings with the derived latent and conditioning fields
    /// filled in for `kind`.
    pub fn ldm_for(&self, kind: CondKind) -> DiffusionConfig {
        DiffusionConfig {
            latent_side: self.vae.latent_side(),
            latent_channels: self.vae.latent_channels,
            cond: kind,
            cond_width: self.ssl.vit.width,
            num_classes: 2,
            ..self.ldm.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return cfg_err(format!("run name `{}` must be non-empty [A-Za-z0-9-_.]", self.name));
        }
        if self.seeds.is_empty() {
            return cfg_err("at least one seed is required".into());
        }
        if self.folds < 2 {
            return cfg_err(format!("need at least 2 folds, got {}", self.folds));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.threshold) {
            return cfg_err("val_fraction must be in [0, 1) and threshold in [0, 1]".into());
        }
        let side = self.data.patch_side;
        for (what, s) in [("ssl.vit", self.ssl.vit.image_side), ("vae", self.vae.image_side), ("classifier.vit", self.classifier.vit.image_side)] {
            if s != side {
                return cfg_err(format!("{what}.image_side {s} differs from data.patch_side {side}"));
            }
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.ldm.timesteps {
            return cfg_err(format!("sampling steps {} outside 1..={}", self.sampling.steps, self.ldm.timesteps));
        }
        let stage = |r: Result<()>, name: &str| r.map_err(|e| Error::Config(format!("{name}: {e}")));
        stage(self.ssl.validate(), "ssl")?;
        stage(self.vae.validate(), "vae")?;
        stage(self.classifier.vit.validate(), "classifier")?;
        stage(self.ldm_for(CondKind::Ssl).validate(), "ldm")?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}
