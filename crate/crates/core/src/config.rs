//! Flat JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{EngramConfig, InterventionKind, InterventionSpec};
use crate::model::{ModelConfig, ModelOptions};
use crate::trainer::{AdamW, Schedule};

/// Everything needed to reproduce one run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Directory of `.txt` documents.
    pub corpus: PathBuf,
    /// Tokenizer JSON used for boundary annotation.
    pub tokenizer: PathBuf,
    pub out_dir: PathBuf,
    /// Directory holding `train.blbd` / `val.blbd`; filled on first use.
    pub data_cache: Option<PathBuf>,
    pub seed: u64,

    pub intervention: InterventionKind,
    pub switch_step: u64,
    pub chunk: usize,
    pub engram_max_order: usize,
    pub engram_base_vocab: usize,
    pub engram_heads: usize,
    pub engram_seed: u64,

    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,

    pub batch_size: usize,
    pub steps: u64,
    pub warmup: u64,
    pub decay: u64,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,

    pub eval_interval: u64,
    /// 0 checkpoints only at the switch step and the end.
    pub ckpt_interval: u64,
    pub val_fraction: f64,
    /// Cap on validation windows per evaluation; all when unset.
    pub eval_max_windows: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        let e = EngramConfig::default();
        ExperimentConfig {
            corpus: PathBuf::from("corpus"),
            tokenizer: PathBuf::from("tokenizer.json"),
            out_dir: PathBuf::from("runs/baseline"),
            data_cache: None,
            seed: 0,
            intervention: InterventionKind::Baseline,
            switch_step: 1000,
            chunk: 4,
            engram_max_order: e.max_order,
            engram_base_vocab: e.base_vocab,
            engram_heads: e.heads,
            engram_seed: e.seed,
            dim: m.dim,
            layers: m.layers,
            heads: m.heads,
            kv_heads: m.kv_heads,
            ffn_hidden: m.ffn_hidden,
            vocab: m.vocab,
            seq_len: m.max_seq,
            rope_base: m.rope_base,
            norm_eps: m.eps,
            init_std: 0.02,
            batch_size: 16,
            steps: 2000,
            warmup: 100,
            decay: 200,
            peak_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            eval_interval: 100,
            ckpt_interval: 500,
            val_fraction: crate::data::DEFAULT_VAL_FRACTION,
            eval_max_windows: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Read a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.tokenizer);
        fix(&mut self.out_dir);
        if let Some(c) = &mut self.data_cache {
            fix(c);
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Numeric checks only.
    pub fn validate_values(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.model_config(None).validate()?;
        self.intervention().validate(self.seq_len)?;
        if self.intervention == InterventionKind::Engram {
            self.intervention().engram.validate(self.dim)?;
        }
        if self.batch_size == 0 || self.steps == 0 || self.seq_len < 2 {
            return bad("batch_size and steps must be positive and seq_len at least 2");
        }
        if self.vocab < crate::tokenizer::FIRST_MERGE_ID as usize {
            return bad("vocab must cover the 256 bytes and the special ids");
        }
        self.schedule().validate()?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip >= 0.0) {
            return bad("adam_eps must be positive, weight_decay and grad_clip non-negative");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        if self.switch_step > self.steps {
            return bad("switch_step exceeds steps");
        }
        Ok(())
    }

    /// Numeric checks plus existence of every input path.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        for (what, p) in [("corpus", &self.corpus), ("tokenizer", &self.tokenizer)] {
            if !p.exists() {
                return Err(Error::Config(format!("{what} {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, subword_vocab: Option<usize>) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            kv_heads: self.kv_heads,
            ffn_hidden: self.ffn_hidden,
            vocab: self.vocab,
            subword_vocab,
            max_seq: self.seq_len,
            rope_base: self.rope_base,
            eps: self.norm_eps,
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        let spec = self.intervention();
        ModelOptions {
            boundary: self.intervention.boundary().is_some(),
            engram: (self.intervention == InterventionKind::Engram).then_some(spec.engram),
        }
    }

    pub fn intervention(&self) -> InterventionSpec {
        InterventionSpec {
            kind: self.intervention,
            switch_step: self.switch_step,
            chunk: self.chunk,
            engram: EngramConfig {
                max_order: self.engram_max_order,
                base_vocab: self.engram_base_vocab,
                heads: self.engram_heads,
                seed: self.engram_seed,
            },
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak: self.peak_lr,
            warmup: self.warmup,
            total: self.steps,
            decay: self.decay,
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Seed of the batch permutation, kept apart from the init seed.
    pub fn data_seed(&self) -> u64 {
        self.seed ^ 0x6461_7461_7365_6564
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate_values().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_names_fail() {
        assert!(ExperimentConfig::from_json(r#"{"stpes": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"intervention": "boundary_end"}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"intervention": "boundary-end", "steps": 20, "switch_step": 10}"#)
            .unwrap();
        assert_eq!(cfg.intervention, InterventionKind::BoundaryEnd);
        assert!(cfg.model_options().boundary);
    }

    #[test]
    fn value_checks() {
        let cfg = ExperimentConfig {
            switch_step: 5000,
            ..Default::default()
        };
        assert!(cfg.validate_values().is_err());
        let cfg = ExperimentConfig {
            warmup: 1500,
            decay: 600,
            ..Default::default()
        };
        assert!(cfg.validate_values().is_err());
        let cfg = ExperimentConfig {
            corpus: "/definitely/missing".into(),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
