//! Run configuration: every hyperparameter of a pre-training run.
//!
//! Serialized as TOML. Unknown keys are rejected so a misspelled
//! hyperparameter never silently falls back to its default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Space in which masked patches are reconstructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconSpace {
    /// Distributions over in-batch text embeddings.
    Language,
    /// Raw RGB values of masked patches.
    Pixel,
    /// Distributions over a learnable prototype bank.
    Prototype,
    /// No reconstruction branch.
    None,
}

impl ReconSpace {
    pub const ALL: [ReconSpace; 4] = [
        ReconSpace::Language,
        ReconSpace::Pixel,
        ReconSpace::Prototype,
        ReconSpace::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReconSpace::Language => "language",
            ReconSpace::Pixel => "pixel",
            ReconSpace::Prototype => "prototype",
            ReconSpace::None => "none",
        }
    }
}

impl fmt::Display for ReconSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReconSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("loss.space", format!("unknown reconstruction space `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_depth: usize,
    pub vision_heads: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    /// Size of the learnable prototype bank (prototype space only).
    pub prototypes: usize,
    /// Initial contrastive temperature.
    pub sigma_init: f64,
    /// Upper bound on the inverse contrastive temperature.
    pub max_inv_sigma: f64,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            vision_width: 64,
            vision_depth: 2,
            vision_heads: 4,
            decoder_depth: 1,
            decoder_heads: 4,
            text_width: 64,
            text_depth: 2,
            text_heads: 4,
            embed_dim: 32,
            mlp_ratio: 4,
            max_len: 16,
            prototypes: 64,
            sigma_init: 0.07,
            max_inv_sigma: 100.0,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub space: ReconSpace,
    pub mask_ratio: f64,
    /// Temperature of the target distribution (full-image branch).
    pub tau_target: f64,
    /// Temperature of the prediction distribution (decoder branch).
    pub tau_pred: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Restrict reconstruction to correctly matched images.
    pub matched_filter: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            space: ReconSpace::Language,
            mask_ratio: 0.75,
            tau_target: 0.04,
            tau_pred: 0.1,
            lambda1: 1.0,
            lambda2: 0.5,
            matched_filter: true,
        }
    }
}

impl LossConfig {
    /// Whether the masked encoder and decoder run at all.
    pub fn reconstructs(&self) -> bool {
        self.space != ReconSpace::None && self.lambda2 != 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; disabled when absent.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            min_lr: 1e-5,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `manifest.tsv`; a synthetic corpus is generated in
    /// memory when absent.
    pub dir: Option<PathBuf>,
    pub n_pairs: usize,
    pub seed: u64,
    pub augment: bool,
    pub crop_scale: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            n_pairs: 4096,
            seed: 17,
            augment: true,
            crop_scale: (0.5, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables intermediate saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

fn check(ok: bool, field: &str, reason: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

impl RunConfig {
    /// Architecture and pre-training values at their published scale. Not
    /// runnable on a desk machine; kept for reference and for `--paper-scale`.
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig {
                image_size: 224,
                patch_size: 16,
                vision_width: 768,
                vision_depth: 12,
                vision_heads: 12,
                decoder_depth: 1,
                decoder_heads: 12,
                text_width: 512,
                text_depth: 12,
                text_heads: 8,
                embed_dim: 512,
                max_len: 77,
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            optim: OptimConfig {
                weight_decay: 0.5,
                ..OptimConfig::default()
            },
            data: DataConfig::default(),
            train: TrainConfig {
                batch_size: 4096,
                ..TrainConfig::default()
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_owned)
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().trim().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short content hash identifying the configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("model.image_size", m.image_size),
            ("model.channels", m.channels),
            ("model.patch_size", m.patch_size),
            ("model.vision_width", m.vision_width),
            ("model.vision_depth", m.vision_depth),
            ("model.vision_heads", m.vision_heads),
            ("model.decoder_heads", m.decoder_heads),
            ("model.text_width", m.text_width),
            ("model.text_depth", m.text_depth),
            ("model.text_heads", m.text_heads),
            ("model.embed_dim", m.embed_dim),
            ("model.mlp_ratio", m.mlp_ratio),
            ("model.prototypes", m.prototypes),
            ("train.batch_size", self.train.batch_size),
            ("train.steps", self.train.steps),
        ] {
            check(v > 0, name, "must be positive")?;
        }
        check(m.max_len >= 2, "model.max_len", "must hold SOT and EOT")?;
        check(
            m.image_size % m.patch_size == 0,
            "model.patch_size",
            format!("{} does not divide image size {}", m.patch_size, m.image_size),
        )?;
        check(m.vision_width % m.vision_heads == 0, "model.vision_heads", "must divide vision_width")?;
        check(m.vision_width % m.decoder_heads == 0, "model.decoder_heads", "must divide vision_width")?;
        check(m.text_width % m.text_heads == 0, "model.text_heads", "must divide text_width")?;
        check(m.sigma_init > 0.0, "model.sigma_init", "must be positive")?;
        check(m.max_inv_sigma > 0.0, "model.max_inv_sigma", "must be positive")?;
        check(m.init_std > 0.0, "model.init_std", "must be positive")?;
        check(m.ln_eps > 0.0, "model.ln_eps", "must be positive")?;

        let l = &self.loss;
        check((0.0..=1.0).contains(&l.mask_ratio), "loss.mask_ratio", "must be in [0, 1]")?;
        check(l.mask_ratio < 1.0, "loss.mask_ratio", "at least one patch must stay visible")?;
        check(l.tau_target > 0.0, "loss.tau_target", "must be positive")?;
        check(l.tau_pred > 0.0, "loss.tau_pred", "must be positive")?;
        check(l.lambda1 >= 0.0, "loss.lambda1", "must be non-negative")?;
        check(l.lambda2 >= 0.0, "loss.lambda2", "must be non-negative")?;

        let o = &self.optim;
        check(o.base_lr >= 0.0, "optim.base_lr", "must be non-negative")?;
        check(o.min_lr >= 0.0 && o.min_lr <= o.base_lr, "optim.min_lr", "must be in [0, base_lr]")?;
        check(
            o.warmup_steps < self.train.steps,
            "optim.warmup_steps",
            "must be smaller than train.steps",
        )?;
        check((0.0..1.0).contains(&o.beta1), "optim.beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&o.beta2), "optim.beta2", "must be in [0, 1)")?;
        check(o.eps > 0.0, "optim.eps", "must be positive")?;
        check(o.weight_decay >= 0.0, "optim.weight_decay", "must be non-negative")?;
        if let Some(c) = o.grad_clip {
            check(c > 0.0, "optim.grad_clip", "must be positive")?;
        }

        let d = &self.data;
        check(d.n_pairs > 0 || d.dir.is_some(), "data.n_pairs", "must be positive")?;
        let (lo, hi) = d.crop_scale;
        check(lo > 0.0 && lo <= hi && hi <= 1.0, "data.crop_scale", "must satisfy 0 < lo <= hi <= 1")?;
        Ok(())
    }
}
