//! Training configuration and the per-family task weighting table.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Result, VarError};

/// Flat training settings shared by every CLI command. Unknown keys in the
/// config file are hard errors.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// 1 = prior alignment (adapter + cross-attention), 2 = restorer.
    pub stage: u8,
    pub lr_init: f64,
    pub lr_final: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Square training crop edge; must cover the full latent footprint.
    pub crop: usize,
    /// Root seed; every module derives its own stream from it.
    pub seed: u64,
    pub use_skip: bool,
    pub use_adapter: bool,
    pub use_aft: bool,
    pub use_dae: bool,
    /// Weight of the feature-alignment term next to cross-entropy.
    pub align_weight: f64,
    /// Weight of the perceptual term next to the fidelity term.
    pub perceptual_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            lr_init: 1e-4,
            lr_final: 1e-6,
            steps: 200,
            batch_size: 2,
            crop: 64,
            seed: 7,
            use_skip: true,
            use_adapter: true,
            use_aft: true,
            use_dae: true,
            align_weight: 1.0,
            perceptual_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(VarError::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return Err(VarError::config("learning rates must be positive"));
        }
        if self.lr_final > self.lr_init {
            return Err(VarError::config(format!(
                "lr_final {} exceeds lr_init {}",
                self.lr_final, self.lr_init
            )));
        }
        if self.steps < 1 {
            return Err(VarError::config("steps must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(VarError::config("batch_size must be >= 1"));
        }
        if self.crop < 4 || self.crop % 4 != 0 {
            return Err(VarError::config("crop must be a positive multiple of 4"));
        }
        if !(self.align_weight.is_finite() && self.align_weight >= 0.0) {
            return Err(VarError::config("align_weight must be finite and >= 0"));
        }
        if !(self.perceptual_weight.is_finite() && self.perceptual_weight >= 0.0) {
            return Err(VarError::config("perceptual_weight must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| VarError::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VarError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Per-batch sampling weight of each degradation family.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWeighting {
    pub haze: f64,
    pub low_light: f64,
    pub rain: f64,
    pub gaussian_noise: f64,
    pub real_noise: f64,
    pub motion_blur: f64,
}

impl Default for TaskWeighting {
    fn default() -> Self {
        TaskWeighting {
            haze: 0.3,
            low_light: 0.1,
            rain: 0.2,
            gaussian_noise: 0.2,
            real_noise: 0.1,
            motion_blur: 0.1,
        }
    }
}

impl TaskWeighting {
    /// `(family, weight)` rows in fixed sampling order.
    pub fn pairs(&self) -> [(&'static str, f64); 6] {
        [
            ("haze", self.haze),
            ("low_light", self.low_light),
            ("rain", self.rain),
            ("gaussian_noise", self.gaussian_noise),
            ("real_noise", self.real_noise),
            ("motion_blur", self.motion_blur),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for (name, w) in self.pairs() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(VarError::config(format!(
                    "weight for {name} must be finite and >= 0, got {w}"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(VarError::config(format!("weights sum to {sum}, want 1")));
        }
        Ok(())
    }

    /// Inverse-CDF draw over the family table.
    pub fn sample_family(&self, rng: &mut ChaCha8Rng) -> &'static str {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let pairs = self.pairs();
        for (name, w) in pairs {
            acc += w;
            if u < acc {
                return name;
            }
        }
        pairs[pairs.len() - 1].0
    }
}
