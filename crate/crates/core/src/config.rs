//! The single JSON configuration schema shared by every command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{GeodeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct LabConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub room_min: f64,
    pub room_max: f64,
    pub room_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub frames: usize,
    pub grid: usize,
    pub patch: usize,
    pub points: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub samples_per_scene: usize,
    pub lm_corpus: usize,
    pub tasks: Vec<String>,
    pub eval_seed_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_3d: usize,
    pub k_tokens: usize,
    pub m_tokens: usize,
    pub enc_heads: usize,
    pub enc2d_blocks: usize,
    pub point_hidden: usize,
    pub fuse_heads: usize,
    pub scan_width: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_mlp_ratio: usize,
    pub context: usize,
    pub drh_hidden: usize,
    pub per_task_heads: bool,
    pub max_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arm: String,
    pub lr: f64,
    pub lm_lr: f64,
    pub batch: usize,
    pub lm_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_samples: usize,
    pub stage2_samples: usize,
    pub lambda: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    pub frames_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub mca_decoding: String,
    pub max_answer_tokens: usize,
    pub max_samples: usize,
}


impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room_min: 4.0,
            room_max: 8.0,
            room_height: 3.0,
            min_objects: 3,
            max_objects: 8,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            grid: 16,
            patch: 4,
            points: 512,
            train_scenes: 4000,
            eval_scenes: 200,
            samples_per_scene: 10,
            lm_corpus: 10_000,
            tasks: crate::qa::TaskKind::ALL
                .iter()
                .map(|t| t.name().to_string())
                .collect(),
            eval_seed_offset: 1_000_000,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_3d: 64,
            k_tokens: 16,
            m_tokens: 16,
            enc_heads: 2,
            enc2d_blocks: 1,
            point_hidden: 64,
            fuse_heads: 1,
            scan_width: 64,
            lm_layers: 4,
            lm_heads: 4,
            lm_mlp_ratio: 4,
            context: 256,
            drh_hidden: 64,
            per_task_heads: false,
            max_frames: 16,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arm: "full".into(),
            lr: 3e-4,
            lm_lr: 1e-3,
            batch: 32,
            lm_epochs: 3,
            stage1_epochs: 5,
            stage2_epochs: 5,
            stage1_samples: 20_000,
            stage2_samples: 40_000,
            lambda: 1.0,
            warmup: 0.05,
            weight_decay: 0.01,
            clip: 1.0,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            arms: crate::arms::ARM_NAMES.iter().map(|s| s.to_string()).collect(),
            frames_grid: vec![8, 16],
            m_grid: vec![4, 8, 16],
            mca_decoding: "constrained".into(),
            max_answer_tokens: 48,
            max_samples: 2000,
        }
    }
}

/// One line per schema key: dotted name and description. Defaults come from
/// [`LabConfig::default`].
const DOCS: &[(&str, &str)] = &[
    ("seed", "master seed for initialization, data order and trajectories"),
    ("scene.room_min", "smallest room width/depth in meters (>= 3)"),
    ("scene.room_max", "largest room width/depth in meters (<= 10)"),
    ("scene.room_height", "room height in meters (3..=10)"),
    ("scene.min_objects", "fewest objects per scene (>= 3)"),
    ("scene.max_objects", "most objects per scene (<= 10)"),
    ("data.frames", "frames rendered per scene (N)"),
    ("data.grid", "raster side length G"),
    ("data.patch", "patch side p; must divide G"),
    ("data.points", "point cloud size, clamped to 256..=4096"),
    ("data.train_scenes", "training scenes generated by gen-data"),
    ("data.eval_scenes", "held-out scenes generated by gen-data"),
    ("data.samples_per_scene", "QA samples drawn per scene"),
    ("data.lm_corpus", "minimum number of text sequences for LM pretraining"),
    ("data.tasks", "task kinds to generate"),
    ("data.eval_seed_offset", "offset separating held-out scene seeds from training seeds"),
    ("model.d_model", "shared embedding width of encoders, rationale module and LM"),
    ("model.d_3d", "width of the 3D context tokens"),
    ("model.k_tokens", "number of 3D context tokens (K)"),
    ("model.m_tokens", "number of rationale tokens (M)"),
    ("model.enc_heads", "attention heads in the 2D encoder and point pooling"),
    ("model.enc2d_blocks", "self-attention blocks in the 2D encoder"),
    ("model.point_hidden", "hidden width of the per-point perceptron"),
    ("model.fuse_heads", "heads of the 2D/3D cross-attention"),
    ("model.scan_width", "channel count of the gated temporal scan"),
    ("model.lm_layers", "transformer layers of the language model"),
    ("model.lm_heads", "attention heads of the language model"),
    ("model.lm_mlp_ratio", "LM feed-forward width as a multiple of d_model"),
    ("model.context", "LM context length in positions"),
    ("model.drh_hidden", "hidden width of the regression heads"),
    ("model.per_task_heads", "one scalar head per task instead of a shared head"),
    ("model.max_frames", "size of the learned frame embedding table"),
    ("train.arm", "stage-2 arm: full | sft_only | sft_drh | sft_drm"),
    ("train.lr", "peak learning rate of the rationale module and stage 2"),
    ("train.lm_lr", "peak learning rate of LM pretraining"),
    ("train.batch", "samples per optimizer step"),
    ("train.lm_epochs", "LM pretraining epochs"),
    ("train.stage1_epochs", "stage-1 epochs"),
    ("train.stage2_epochs", "stage-2 epochs"),
    ("train.stage1_samples", "cap on stage-1 rationale samples"),
    ("train.stage2_samples", "cap on stage-2 QA samples"),
    ("train.lambda", "weight of the regression loss in the mixed objective"),
    ("train.warmup", "fraction of steps spent in linear warmup"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.clip", "global gradient-norm clip"),
    ("eval.seeds", "seeds of the ablation grid"),
    ("eval.arms", "arms of the ablation grid"),
    ("eval.frames_grid", "frame counts of the frame ablation"),
    ("eval.m_grid", "rationale token counts of the token ablation"),
    ("eval.mca_decoding", "constrained (argmax over choice letters) | free (greedy text)"),
    ("eval.max_answer_tokens", "generation budget for answers"),
    ("eval.max_samples", "cap on held-out samples scored per report"),
];

impl LabConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GeodeError::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| GeodeError::config(path.display().to_string(), e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            // serde names the offending field in backticks
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<root>".into());
            GeodeError::config(key, msg)
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| GeodeError::io(path, e))
    }

    /// Applies a `dotted.key=value` override, type-checked against the current value.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| GeodeError::config(spec, "override must look like key=value"))?;
        let key = key.trim();
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| GeodeError::config(key, "no such key"))?;
        }
        let new = match slot {
            Value::Bool(_) => Value::Bool(
                raw.parse()
                    .map_err(|_| GeodeError::config(key, format!("expected bool, got `{raw}`")))?,
            ),
            Value::Number(n) if n.is_u64() => Value::from(
                raw.parse::<u64>()
                    .map_err(|_| GeodeError::config(key, format!("expected integer, got `{raw}`")))?,
            ),
            Value::Number(_) => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| GeodeError::config(key, format!("expected number, got `{raw}`")))?;
                serde_json::Number::from_f64(v)
                    .map(Value::Number)
                    .ok_or_else(|| GeodeError::config(key, "non-finite number"))?
            }
            Value::String(_) => Value::String(raw.to_string()),
            _ => serde_json::from_str(raw)
                .map_err(|e| GeodeError::config(key, format!("expected JSON: {e}")))?,
        };
        *slot = new;
        *self = Self::from_value(root)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if !(3.0..=10.0).contains(&s.room_min) || !(3.0..=10.0).contains(&s.room_max) {
            return Err(GeodeError::config("scene.room_min", "room dims must lie in [3, 10] m"));
        }
        if s.room_min > s.room_max {
            return Err(GeodeError::config("scene.room_max", "room_max < room_min"));
        }
        if !(3.0..=10.0).contains(&s.room_height) {
            return Err(GeodeError::config("scene.room_height", "must lie in [3, 10] m"));
        }
        if s.min_objects < 3 || s.max_objects > 10 || s.min_objects > s.max_objects {
            return Err(GeodeError::config("scene.max_objects", "object count must lie in 3..=10"));
        }
        let d = &self.data;
        if d.frames < 2 {
            return Err(GeodeError::config("data.frames", "need at least 2 frames"));
        }
        if d.patch == 0 || !d.grid.is_multiple_of(d.patch) {
            return Err(GeodeError::config("data.patch", "patch must divide grid"));
        }
        if d.frames > self.model.max_frames {
            return Err(GeodeError::config("data.frames", "exceeds model.max_frames"));
        }
        for t in &d.tasks {
            if crate::qa::TaskKind::from_name(t).is_none() {
                return Err(GeodeError::config("data.tasks", format!("unknown task `{t}`")));
            }
        }
        let m = &self.model;
        if !m.d_model.is_multiple_of(m.lm_heads) || !m.d_model.is_multiple_of(m.enc_heads) || !m.d_model.is_multiple_of(m.fuse_heads) {
            return Err(GeodeError::config("model.d_model", "must be divisible by every head count"));
        }
        if m.m_tokens == 0 {
            return Err(GeodeError::config("model.m_tokens", "need at least one rationale token"));
        }
        if self.train.lambda <= 0.0 {
            return Err(GeodeError::config("train.lambda", "must be positive"));
        }
        if self.train.batch == 0 {
            return Err(GeodeError::config("train.batch", "must be positive"));
        }
        crate::arms::Arm::from_name(&self.train.arm)?;
        if !["constrained", "free"].contains(&self.eval.mca_decoding.as_str()) {
            return Err(GeodeError::config("eval.mca_decoding", "expected constrained or free"));
        }
        Ok(())
    }

    /// Human-readable listing of every key, its default and its meaning.
    pub fn schema() -> String {
        let defaults = serde_json::to_value(LabConfig::default()).expect("config serializes");
        let mut out = String::new();
        for (key, doc) in DOCS {
            let mut v = &defaults;
            for part in key.split('.') {
                v = &v[part];
            }
            out.push_str(&format!("{key:<26} {:<28} {doc}\n", v.to_string()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_type_checked() {
        let mut c = LabConfig::default();
        c.apply_override("seed=1").unwrap();
        assert_eq!(c.seed, 1);
        c.apply_override("train.lr=0.001").unwrap();
        assert_eq!(c.train.lr, 0.001);
        c.apply_override("eval.seeds=[3,4]").unwrap();
        assert_eq!(c.eval.seeds, vec![3, 4]);
        c.apply_override("train.arm=sft_only").unwrap();
        assert_eq!(c.train.arm, "sft_only");

        let err = c.apply_override("seed=abc").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = c.apply_override("train.nope=1").unwrap_err();
        assert!(err.to_string().contains("train.nope"), "{err}");
        let err = c.apply_override("data.frames=2.5").unwrap_err();
        assert!(err.to_string().contains("data.frames"), "{err}");
    }

    #[test]
    fn schema_documents_every_key() {
        let defaults = serde_json::to_value(LabConfig::default()).unwrap();
        let mut keys = Vec::new();
        for (section, v) in defaults.as_object().unwrap() {
            match v.as_object() {
                Some(obj) => keys.extend(obj.keys().map(|k| format!("{section}.{k}"))),
                None => keys.push(section.clone()),
            }
        }
        let documented: Vec<&str> = DOCS.iter().map(|(k, _)| *k).collect();
        for k in &keys {
            assert!(documented.contains(&k.as_str()), "undocumented key {k}");
        }
        assert_eq!(keys.len(), DOCS.len());
    }

    #[test]
    fn validation_names_offending_key() {
        let mut c = LabConfig::default();
        c.scene.room_max = 12.0;
        assert!(c.validate().unwrap_err().to_string().contains("scene.room_min"));
        let mut c = LabConfig::default();
        c.data.patch = 5;
        assert!(c.validate().unwrap_err().to_string().contains("data.patch"));
        LabConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"lrr": 1}}"#).unwrap();
        let err = LabConfig::load(&p).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("lrr"), "{err}");
    }
}
