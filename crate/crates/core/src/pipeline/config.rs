use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::PipelineError;
use crate::decoder::{DecoderConfig, GenerationConfig};
use crate::graph::{FocalConfig, GraphConfig};
use crate::vision::{BackboneConfig, FusionOp, RegionConfig, VisualConfig};

/// Every knob of the three training phases and of the model shapes, as one
/// flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,

    pub pretrain_lr: f64,
    pub backbone_lr: f64,
    pub backbone_lr_decay: f64,
    pub backbone_lr_step: usize,
    pub backbone_lr_floor: f64,
    pub visual_lr: f64,
    pub text_lr: f64,

    pub pretrain_epochs: usize,
    pub backbone_epochs: usize,
    pub train_epochs: usize,
    /// Phase-two epochs that train the global branch alone before the region
    /// branch joins.
    pub global_warmup_epochs: usize,
    /// Keep the phase-two epoch with the best validation AUC rather than the
    /// last one.
    pub select_best: bool,
    pub batch_size: usize,

    pub tau: f64,
    pub fusion_op: FusionOp,
    pub lm_weight: f64,
    pub tag_weight: f64,
    pub branch_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,

    pub use_internal: bool,
    pub use_external: bool,
    pub use_focal: bool,
    pub freeze_heatmap: bool,
    /// Initialise the prior graph edges from training-label co-occurrence.
    pub cooccurrence_prior: bool,

    pub image_size: usize,
    pub n_tags: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub gen_max_len: usize,
    pub graph_dim: usize,
    pub graph_heads: usize,
    pub vocab_min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_lr: 5e-4,
            backbone_lr: 1e-2,
            backbone_lr_decay: 0.1,
            backbone_lr_step: 10,
            backbone_lr_floor: 1e-5,
            visual_lr: 1e-5,
            text_lr: 5e-4,
            pretrain_epochs: 30,
            backbone_epochs: 50,
            train_epochs: 30,
            global_warmup_epochs: 2,
            select_best: true,
            batch_size: 32,
            tau: 0.7,
            fusion_op: FusionOp::Add,
            lm_weight: 1.0,
            tag_weight: 1.0,
            branch_weight: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            use_internal: true,
            use_external: true,
            use_focal: true,
            freeze_heatmap: false,
            cooccurrence_prior: false,
            image_size: 64,
            n_tags: 12,
            d_model: 64,
            ffn_dim: 256,
            heads: 4,
            blocks: 3,
            max_len: 300,
            gen_max_len: 60,
            graph_dim: 64,
            graph_heads: 4,
            vocab_min_freq: 3,
        }
    }
}

impl TrainConfig {
    /// Reduced schedule used for the desk-scale runs: 5/10/10 epochs over
    /// about 200 training samples. Single-sample steps and larger visual
    /// rates make up for the short schedule; the 29-sample validation split
    /// is too small to pick an epoch from, so the last one is kept.
    pub fn desk() -> Self {
        Self {
            pretrain_epochs: 5,
            backbone_epochs: 10,
            train_epochs: 10,
            batch_size: 1,
            backbone_lr: 3e-3,
            visual_lr: 2e-3,
            select_best: false,
            ..Self::default()
        }
    }

    /// Defaults, then the keys of `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Map<String, Value>) -> Result<Self, PipelineError> {
        Self::resolve_over(Self::default(), file, overrides)
    }

    /// [`TrainConfig::resolve`] starting from `base` instead of the defaults.
    pub fn resolve_over(base: Self, file: Option<&Path>, overrides: &Map<String, Value>) -> Result<Self, PipelineError> {
        let mut merged = match serde_json::to_value(base) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serialises to an object"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let Value::Object(m) = serde_json::from_str::<Value>(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
            else {
                return Err(PipelineError::Config(format!("{}: expected a JSON object", path.display())));
            };
            merged.extend(m);
        }
        merged.extend(overrides.clone());
        let cfg: Self = serde_json::from_value(Value::Object(merged)).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let rates = [
            ("pretrain_lr", self.pretrain_lr),
            ("backbone_lr", self.backbone_lr),
            ("backbone_lr_decay", self.backbone_lr_decay),
            ("backbone_lr_floor", self.backbone_lr_floor),
            ("visual_lr", self.visual_lr),
            ("text_lr", self.text_lr),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PipelineError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lm_weight", self.lm_weight), ("tag_weight", self.tag_weight), ("branch_weight", self.branch_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PipelineError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.backbone_lr_step == 0 {
            return bad("backbone_lr_step must be positive".into());
        }
        if self.gen_max_len < 2 || self.gen_max_len > self.max_len {
            return bad(format!("gen_max_len must lie in 2..={}", self.max_len));
        }
        if !self.d_model.is_multiple_of(self.heads.max(1)) || self.heads == 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !self.graph_dim.is_multiple_of(self.graph_heads.max(1)) || self.graph_heads == 0 {
            return bad(format!("graph_dim {} not divisible by graph_heads {}", self.graph_dim, self.graph_heads));
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8".into());
        }
        self.region().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.focal().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Phase-two learning rate: `backbone_lr · decay^(epoch / step)`, never
    /// below the floor.
    pub fn backbone_lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.backbone_lr_step) as i32;
        (self.backbone_lr * self.backbone_lr_decay.powi(k)).max(self.backbone_lr_floor)
    }

    pub fn focal(&self) -> FocalConfig {
        FocalConfig {
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
        }
    }

    pub fn region(&self) -> RegionConfig {
        RegionConfig {
            tau: self.tau,
            fusion_op: self.fusion_op,
        }
    }

    pub fn visual(&self) -> VisualConfig {
        VisualConfig {
            backbone: BackboneConfig {
                image_size: self.image_size,
                ..BackboneConfig::default()
            },
            region: self.region(),
            n_tags: self.n_tags,
        }
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            n_tags: self.n_tags,
            input_dim: self.visual().backbone.feature_dim(),
            dim: self.graph_dim,
            heads: self.graph_heads,
            edge_bias: false,
        }
    }

    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            blocks: self.blocks,
            max_len: self.max_len,
            memory_dim: self.graph_dim,
            edge_memory: false,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_len: self.gen_max_len,
            temperature: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn schedule_decays_every_ten_epochs_to_the_floor() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.backbone_lr_at(0), 1e-2);
        assert_eq!(cfg.backbone_lr_at(9), 1e-2);
        assert!((cfg.backbone_lr_at(25) - 1e-4).abs() < 1e-18);
        assert_eq!(cfg.backbone_lr_at(49), 1e-5);
        assert_eq!(cfg.backbone_lr_at(500), 1e-5);
    }

    #[test]
    fn file_then_flags_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"batch_size": 8, "tau": 0.5}"#).unwrap();
        let mut flags = Map::new();
        flags.insert("tau".into(), json!(0.6));
        let cfg = TrainConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.tau, 0.6);
        assert_eq!(cfg.text_lr, 5e-4);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut flags = Map::new();
        flags.insert("visual_lr".into(), json!(0.0));
        assert!(matches!(TrainConfig::resolve(None, &flags), Err(PipelineError::Config(_))));
        let mut flags = Map::new();
        flags.insert("no_such_key".into(), json!(1));
        assert!(matches!(TrainConfig::resolve(None, &flags), Err(PipelineError::Config(_))));
        let mut flags = Map::new();
        flags.insert("tau".into(), json!(1.5));
        assert!(matches!(TrainConfig::resolve(None, &flags), Err(PipelineError::Config(_))));
    }

    #[test]
    fn ablation_flags_are_independent() {
        for ia in [false, true] {
            for ea in [false, true] {
                let mut flags = Map::new();
                flags.insert("use_internal".into(), json!(ia));
                flags.insert("use_external".into(), json!(ea));
                let cfg = TrainConfig::resolve(None, &flags).unwrap();
                assert_eq!((cfg.use_internal, cfg.use_external), (ia, ea));
            }
        }
    }
}
