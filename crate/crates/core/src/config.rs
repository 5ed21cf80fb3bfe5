//! Model hyperparameters, the two built-in profiles, and the run
//! configuration document consumed by the command line.

use crate::error::{Error, Result};
use crate::nn::BlockConfig;
use crate::scene;
use crate::train::TrainConfig;
use std::path::Path;

/// Everything that fixes the model architecture. The `paper` profile mirrors
/// the reference configuration (d_m=256, 8 heads, encoder depth 2, prior
/// depth 2, decoder depth 4, K=12); `small` is sized for desk-scale training.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_m: usize,
    pub heads: usize,
    /// Encoder depth, shared by the trajectory encoder and the map ViT.
    pub i_e: usize,
    /// Depth of the normalized decoder stack inside the mode prior.
    pub i_dd: usize,
    /// Depth of the norm-free decoder stack.
    pub i_dc: usize,
    /// Discrete intention modes per agent.
    pub k_modes: usize,
    /// Feedforward layers in the Gaussian output head.
    pub head_layers: usize,
    /// Observed steps before the current one (past length = tau + 1).
    pub tau: usize,
    /// Future steps to predict.
    pub horizon: usize,
    pub a_max: usize,
    /// Map patch edge, in feature-map cells.
    pub patch_m: usize,
    /// Map patch stride.
    pub patch_stride: usize,
    /// Width of each learnable prior query vector.
    pub prior_query_dim: usize,
    /// Scale attention scores by 1/sqrt(d_q).
    pub attn_scale: bool,
    /// Omit the residual on the first decoder self-attention sublayer.
    pub literal_eqs: bool,
    /// Feed the rasterized map context to the decoder stacks.
    pub use_map: bool,
    /// Allow cross-agent attention; false restricts every attention pattern
    /// that mixes agent-tagged tokens to block-diagonal (ablation).
    pub interaction: bool,
    /// Use raw pixel indices in the map channels instead of normalized ones.
    pub raw_map_indices: bool,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            d_m: 256,
            heads: 8,
            i_e: 2,
            i_dd: 2,
            i_dc: 4,
            k_modes: 12,
            head_layers: 2,
            tau: scene::TAU,
            horizon: scene::HORIZON,
            a_max: scene::A_MAX,
            patch_m: 8,
            patch_stride: 4,
            prior_query_dim: 16,
            attn_scale: true,
            literal_eqs: true,
            use_map: true,
            interaction: true,
            raw_map_indices: false,
        }
    }

    pub fn small() -> Self {
        ModelConfig {
            d_m: 64,
            heads: 4,
            i_e: 1,
            i_dd: 1,
            i_dc: 2,
            k_modes: 4,
            ..ModelConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config()?.validate()?;
        if self.i_e < 1 || self.i_dd < 1 || self.i_dc < 1 {
            return Err(Error::Config(
                "all block depths must be at least 1".into(),
            ));
        }
        if self.k_modes < 1 {
            return Err(Error::Config("mode count must be at least 1".into()));
        }
        if self.head_layers < 1 {
            return Err(Error::Config("head needs at least one layer".into()));
        }
        if self.tau < 1 || self.horizon < 1 {
            return Err(Error::Config(format!(
                "schedule tau={} horizon={} must both be at least 1",
                self.tau, self.horizon
            )));
        }
        if self.a_max < 1 || self.a_max > scene::A_MAX {
            return Err(Error::Config(format!(
                "agent capacity {} outside 1..={}",
                self.a_max,
                scene::A_MAX
            )));
        }
        let fmap = crate::map_encoder::FEATURE_GRID;
        if self.patch_m < 1 || self.patch_m > fmap {
            return Err(Error::Config(format!(
                "patch size {} outside 1..={}",
                self.patch_m, fmap
            )));
        }
        if self.patch_stride < 1 || self.patch_stride >= self.patch_m {
            return Err(Error::Config(format!(
                "patch stride {} must be in 1..{} so patches overlap",
                self.patch_stride, self.patch_m
            )));
        }
        if (fmap - self.patch_m) % self.patch_stride != 0 {
            return Err(Error::Config(format!(
                "patches of {} with stride {} do not tile a {} grid",
                self.patch_m, self.patch_stride, fmap
            )));
        }
        if self.prior_query_dim < 1 {
            return Err(Error::Config("prior query width must be positive".into()));
        }
        Ok(())
    }

    pub fn block_config(&self) -> Result<BlockConfig> {
        let mut b = BlockConfig::new(self.d_m, self.heads)?;
        b.attn_scale = self.attn_scale;
        b.literal_eqs = self.literal_eqs;
        Ok(b)
    }

    /// Patch tokens per axis of the feature map.
    pub fn patches_per_axis(&self) -> usize {
        (crate::map_encoder::FEATURE_GRID - self.patch_m) / self.patch_stride + 1
    }
}

// ─── run configuration ──────────────────────────────────────────────────────

/// Named starting point for the model configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    #[default]
    Small,
}

impl Profile {
    pub fn model(self) -> ModelConfig {
        match self {
            Profile::Paper => ModelConfig::paper(),
            Profile::Small => ModelConfig::small(),
        }
    }
}

/// One JSON document that fixes an entire run: a model profile, per-key
/// model overrides applied on top of it, and the training schedule.
/// Unknown keys anywhere in the document are rejected.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    /// Replacements for individual [`ModelConfig`] fields. Keys must name
    /// existing fields; values must have the field's type.
    pub model: serde_json::Map<String, serde_json::Value>,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Resolve the profile plus overrides into a validated model config.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = serde_json::to_value(self.profile.model())
            .map_err(|e| Error::Config(format!("profile serialization failed: {e}")))?;
        let mut doc = match base {
            serde_json::Value::Object(map) => map,
            other => {
                return Err(Error::Config(format!(
                    "profile did not serialize to an object: {other}"
                )))
            }
        };
        for (key, value) in &self.model {
            if !doc.contains_key(key) {
                return Err(Error::Config(format!(
                    "unknown model override key {key:?}"
                )));
            }
            doc.insert(key.clone(), value.clone());
        }
        let cfg: ModelConfig = serde_json::from_value(serde_json::Value::Object(doc))
            .map_err(|e| Error::Config(format!("model override rejected: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and fully validate a run configuration document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("run config rejected: {e}")))?;
        cfg.model_config()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_json(&text)
    }

    /// The full document for a profile with every model key spelled out,
    /// ready to edit. Feeding it back through [`RunConfig::from_json`]
    /// reproduces the same run.
    pub fn template(profile: Profile) -> Result<String> {
        let model = match serde_json::to_value(profile.model()) {
            Ok(serde_json::Value::Object(map)) => map,
            _ => return Err(Error::Config("profile serialization failed".into())),
        };
        let full = RunConfig {
            profile,
            model,
            train: TrainConfig::default(),
        };
        serde_json::to_string_pretty(&full)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }
}
