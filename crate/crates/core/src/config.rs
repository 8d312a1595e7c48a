//! Run configuration: a structured key tree loaded from JSON with dotted-path
//! command-line overrides. The resolved tree is serialized alongside every
//! run's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::SinkhornConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub slots: SlotConfig,
    pub sinkhorn: SinkhornConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            slots: SlotConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input frames are resized to resolution x resolution pixels.
    pub resolution: usize,
    pub patch_size: usize,
    /// Feature dimension D.
    pub dim: usize,
    /// Number of token-mixing blocks.
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { resolution: 64, patch_size: 8, dim: 32, blocks: 2 }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }

    /// Number of patch tokens per frame.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.resolution.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "resolution {} is not a multiple of patch_size {}",
                self.resolution, self.patch_size
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("encoder dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Keep the appearance projection h_f in the fused representation.
    pub use_semantic: bool,
    /// Keep the correlation projection h_c in the fused representation.
    pub use_correlation: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { use_semantic: true, use_correlation: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlotConfig {
    /// Number of learnable Gaussian slots N.
    pub n: usize,
    /// Instance samples per semantic P.
    pub p: usize,
    /// Attention iterations per stage.
    pub iters: usize,
    /// Binarization threshold tau for semantic masks.
    pub tau: f64,
    /// Layer-normalize inputs and slots before the Q/K/V projections.
    pub layer_norm: bool,
    /// Random-sample stage-1 initialization instead of the mean vectors
    /// (preliminary-study switch; the full model keeps this off).
    pub random_init: bool,
    /// Run the masked instance stage.
    pub instance_stage: bool,
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            n: 16,
            p: 4,
            iters: 3,
            tau: 0.5,
            layer_norm: true,
            random_init: false,
            instance_stage: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_margin: f64,
    /// Minimum semantic area ratio for a valid instance.
    pub tau1: f64,
    /// Minimum slot-to-center cosine for a valid instance.
    pub tau2: f64,
    pub enable_sem: bool,
    pub enable_reg: bool,
    pub enable_obj: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_margin: 1.0,
            tau1: 0.2,
            tau2: 0.5,
            enable_sem: true,
            enable_reg: true,
            enable_obj: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Frames per clip T.
    pub frames_per_clip: usize,
    /// Frame stride when sampling a clip (emulates the sampling frame rate).
    pub stride: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Teacher EMA momentum m.
    pub momentum: f64,
    pub steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Linear learning-rate warmup steps (0 disables).
    pub warmup_steps: usize,
    pub augment: AugmentConfig,
    /// Evaluate on the held-out split every this many steps (0 disables).
    pub eval_every: usize,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            frames_per_clip: 4,
            stride: 4,
            lr: 2e-4,
            batch_size: 8,
            momentum: 0.999,
            steps: 10_000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 0,
            augment: AugmentConfig::default(),
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Lower bound of the crop side-length factor.
    pub crop_min_scale: f64,
    pub flip: bool,
    pub jitter: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: true,
            crop_min_scale: 0.85,
            flip: true,
            jitter: true,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    Flat,
    Textured,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_videos: usize,
    pub eval_videos: usize,
    pub resolution: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: usize,
    /// Half-extent range of rendered shapes, in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,
    pub background: BackgroundMode,
    pub tint_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_videos: 200,
            eval_videos: 50,
            resolution: 64,
            frames: 16,
            min_objects: 2,
            max_objects: 3,
            classes: 2,
            min_size: 14.0,
            max_size: 20.0,
            max_speed: 2.5,
            background: BackgroundMode::Textured,
            tint_jitter: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Which parameter set drives inference.
    pub pathway: Pathway,
    /// Top-k affinities kept per query in label propagation.
    pub propagation_k: usize,
    pub propagation_temperature: f64,
    /// Previous frames (besides the first) used as propagation context.
    pub propagation_context: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pathway: Pathway::Teacher,
            propagation_k: 10,
            propagation_temperature: 0.07,
            propagation_context: 7,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.slots.n < 1 || self.slots.p < 1 || self.slots.iters < 1 {
            return Err(Error::Config("slots.n, slots.p and slots.iters must be >= 1".into()));
        }
        if self.train.frames_per_clip < 2 {
            return Err(Error::Config(
                "train.frames_per_clip must be >= 2 (losses need frame pairs)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.train.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1]".into()));
        }
        if self.train.stride == 0 {
            return Err(Error::Config("train.stride must be >= 1".into()));
        }
        if self.data.min_objects > self.data.max_objects {
            return Err(Error::Config("data.min_objects exceeds data.max_objects".into()));
        }
        if self.data.classes < 1 {
            return Err(Error::Config("data.classes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides on top of this configuration.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for entry in overrides {
            let (path, raw) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{entry}' is not of the form key.path=value"))
            })?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut value, path, parsed)?;
        }
        Self::from_value(value)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn set_path(root: &mut serde_json::Value, path: &str, new: serde_json::Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path '{path}' walks through a non-object"))
        })?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert(serde_json::Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override path '{path}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_set_nested_values() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "slots.n=8".into(),
                "loss.enable_obj=false".into(),
                "sinkhorn.epsilon=0.25".into(),
                "eval.pathway=student".into(),
            ])
            .unwrap();
        assert_eq!(cfg.slots.n, 8);
        assert!(!cfg.loss.enable_obj);
        assert_eq!(cfg.sinkhorn.epsilon, 0.25);
        assert_eq!(cfg.eval.pathway, Pathway::Student);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let err = RunConfig::default().with_overrides(&["slots.bogus=1".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn invalid_combination_is_rejected() {
        let err = RunConfig::default().with_overrides(&["train.frames_per_clip=1".into()]);
        assert!(err.is_err());
        let err = RunConfig::default().with_overrides(&["encoder.resolution=60".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = cfg.to_json_pretty();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(text, back.to_json_pretty());
    }
}
