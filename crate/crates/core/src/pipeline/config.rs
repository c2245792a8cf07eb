//! Experiment configuration: one TOML file drives a full run.
//!
//! All seeds are explicit fields and the screen thresholds default to the
//! recipe constants (assign 30x, induction 50x, prev-token 100x, pre-filter
//! 2x). `ExperimentConfig::to_canonical_toml` is the serialization that gets
//! written into the run directory and hashed into the manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::screen::{
    ASSIGN_THRESHOLD, INDUCTION_THRESHOLD, PREFILTER_THRESHOLD, PREV_TOKEN_THRESHOLD,
};
use crate::taskgen::ProbeSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Induction,
    Probe,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Induction => "induction",
            TaskKind::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub task: TaskKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "tiny", "probe", or "custom" (custom reads the explicit fields).
    #[serde(default = "default_preset")]
    pub preset: String,
    pub seed: u64,
    #[serde(default)]
    pub n_layers: Option<usize>,
    #[serde(default)]
    pub d_model: Option<usize>,
    #[serde(default)]
    pub n_heads: Option<usize>,
    #[serde(default)]
    pub d_head: Option<usize>,
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    #[serde(default)]
    pub tied_embeddings: Option<bool>,
}

fn default_preset() -> String {
    "tiny".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub data_seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_train_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f32>,
    /// Explicit strictly increasing checkpoint steps; step 0 is always added.
    pub checkpoint_schedule: Vec<u64>,
}

fn default_batch_size() -> usize {
    16
}
fn default_train_seq_len() -> usize {
    96
}
fn default_lr() -> f32 {
    3e-4
}
fn default_warmup() -> u64 {
    100
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.95
}
fn default_grad_clip() -> Option<f32> {
    Some(1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default = "default_probe_rate")]
    pub probe_rate: f64,
    #[serde(default = "default_codeword_vocab")]
    pub codeword_vocab: usize,
    #[serde(default = "default_gap_in")]
    pub gap_in: (usize, usize),
    #[serde(default = "default_gap_ood")]
    pub gap_ood: (usize, usize),
    #[serde(default = "default_true")]
    pub distractors_ood: bool,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            probe_rate: default_probe_rate(),
            codeword_vocab: default_codeword_vocab(),
            gap_in: default_gap_in(),
            gap_ood: default_gap_ood(),
            distractors_ood: true,
        }
    }
}

fn default_probe_rate() -> f64 {
    0.10
}
fn default_codeword_vocab() -> usize {
    512
}
fn default_gap_in() -> (usize, usize) {
    (5, 30)
}
fn default_gap_ood() -> (usize, usize) {
    (40, 100)
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_eval_seq_len")]
    pub eval_seq_len: usize,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    /// Examples used for the per-checkpoint behavioral curve during training.
    #[serde(default = "default_ckpt_eval")]
    pub checkpoint_eval_examples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_eval: default_n_eval(),
            eval_seq_len: default_eval_seq_len(),
            eval_seed: default_eval_seed(),
            checkpoint_eval_examples: default_ckpt_eval(),
        }
    }
}

fn default_n_eval() -> usize {
    256
}
fn default_eval_seq_len() -> usize {
    96
}
fn default_eval_seed() -> u64 {
    42
}
fn default_ckpt_eval() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenSection {
    #[serde(default = "default_assign")]
    pub assign_threshold: f64,
    #[serde(default = "default_induction")]
    pub induction_threshold: f64,
    #[serde(default = "default_prev")]
    pub prev_token_threshold: f64,
    #[serde(default = "default_prefilter")]
    pub prefilter_threshold: f64,
}

impl Default for ScreenSection {
    fn default() -> Self {
        ScreenSection {
            assign_threshold: default_assign(),
            induction_threshold: default_induction(),
            prev_token_threshold: default_prev(),
            prefilter_threshold: default_prefilter(),
        }
    }
}

fn default_assign() -> f64 {
    ASSIGN_THRESHOLD
}
fn default_induction() -> f64 {
    INDUCTION_THRESHOLD
}
fn default_prev() -> f64 {
    PREV_TOKEN_THRESHOLD
}
fn default_prefilter() -> f64 {
    PREFILTER_THRESHOLD
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSection {
    #[serde(default = "default_control_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_true")]
    pub upper_bound: bool,
}

impl Default for ControlsSection {
    fn default() -> Self {
        ControlsSection {
            seeds: default_control_seeds(),
            upper_bound: true,
        }
    }
}

fn default_control_seeds() -> Vec<u64> {
    vec![123]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub screen: ScreenSection,
    #[serde(default)]
    pub controls: ControlsSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_toml()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = match m.preset.as_str() {
            "tiny" => ModelConfig::tiny(m.seed),
            "probe" => ModelConfig::probe(m.seed),
            "custom" => {
                let need = |name: &str, v: Option<usize>| {
                    v.ok_or_else(|| {
                        Error::invalid(format!("custom model preset requires model.{name}"))
                    })
                };
                ModelConfig {
                    n_layers: need("n_layers", m.n_layers)?,
                    d_model: need("d_model", m.d_model)?,
                    n_heads: need("n_heads", m.n_heads)?,
                    d_head: need("d_head", m.d_head)?,
                    ffn_dim: need("ffn_dim", m.ffn_dim)?,
                    vocab_size: need("vocab_size", m.vocab_size)?,
                    max_seq_len: need("max_seq_len", m.max_seq_len)?,
                    seed: m.seed,
                    tied_embeddings: m.tied_embeddings.unwrap_or(true),
                }
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown model preset {other:?} (tiny | probe | custom)"
                )))
            }
        };
        // overrides apply on top of named presets too
        let cfg = ModelConfig {
            n_layers: m.n_layers.unwrap_or(cfg.n_layers),
            d_model: m.d_model.unwrap_or(cfg.d_model),
            n_heads: m.n_heads.unwrap_or(cfg.n_heads),
            d_head: m.d_head.unwrap_or(cfg.d_head),
            ffn_dim: m.ffn_dim.unwrap_or(cfg.ffn_dim),
            vocab_size: m.vocab_size.unwrap_or(cfg.vocab_size),
            max_seq_len: m.max_seq_len.unwrap_or(cfg.max_seq_len),
            seed: m.seed,
            tied_embeddings: m.tied_embeddings.unwrap_or(cfg.tied_embeddings),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            seq_len: self.train.seq_len,
            lr: self.train.lr,
            warmup_steps: self.train.warmup_steps,
            weight_decay: self.train.weight_decay,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: 1e-8,
            grad_clip: self.train.grad_clip,
        }
    }

    pub fn probe_spec(&self) -> Result<ProbeSpec> {
        let model = self.model_config()?;
        Ok(ProbeSpec {
            probe_rate: self.task.probe_rate,
            codeword_vocab: self.task.codeword_vocab,
            gap_range_in: self.task.gap_in,
            gap_range_ood: self.task.gap_ood,
            distractors_ood: self.task.distractors_ood,
            vocab_size: model.vocab_size,
            eval_seq_len: self.eval.eval_seq_len,
            eval_seed: self.eval.eval_seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        if self.train.checkpoint_schedule.is_empty() {
            return Err(Error::invalid("checkpoint_schedule must be nonempty"));
        }
        if !self
            .train
            .checkpoint_schedule
            .windows(2)
            .all(|w| w[0] < w[1])
        {
            return Err(Error::invalid("checkpoint_schedule must strictly increase"));
        }
        for (name, t) in [
            ("assign_threshold", self.screen.assign_threshold),
            ("induction_threshold", self.screen.induction_threshold),
            ("prev_token_threshold", self.screen.prev_token_threshold),
            ("prefilter_threshold", self.screen.prefilter_threshold),
        ] {
            if t <= 0.0 {
                return Err(Error::invalid(format!("screen.{name} must be positive")));
            }
        }
        if self.controls.seeds.is_empty() {
            return Err(Error::invalid("controls.seeds must list at least one seed"));
        }
        if self.eval.n_eval == 0 || self.eval.checkpoint_eval_examples == 0 {
            return Err(Error::invalid("eval sizes must be >= 1"));
        }
        let model = self.model_config()?;
        if self.eval.eval_seq_len > model.max_seq_len {
            return Err(Error::invalid(format!(
                "eval_seq_len {} exceeds max_seq_len {}",
                self.eval.eval_seq_len, model.max_seq_len
            )));
        }
        if self.experiment.task == TaskKind::Probe {
            self.probe_spec()?.validate()?;
        }
        Ok(())
    }

    /// Tiny-model induction experiment with the given seeds.
    pub fn induction_default(name: &str, model_seed: u64, data_seed: u64, steps: &[u64]) -> Self {
        ExperimentConfig {
            experiment: ExperimentSection {
                name: name.to_string(),
                task: TaskKind::Induction,
            },
            model: ModelSection {
                preset: "tiny".into(),
                seed: model_seed,
                n_layers: None,
                d_model: None,
                n_heads: None,
                d_head: None,
                ffn_dim: None,
                vocab_size: None,
                max_seq_len: None,
                tied_embeddings: None,
            },
            train: TrainSection {
                data_seed,
                batch_size: default_batch_size(),
                seq_len: default_train_seq_len(),
                lr: default_lr(),
                warmup_steps: default_warmup(),
                weight_decay: 0.0,
                beta1: default_beta1(),
                beta2: default_beta2(),
                grad_clip: default_grad_clip(),
                checkpoint_schedule: steps.to_vec(),
            },
            task: TaskSection::default(),
            eval: EvalSection::default(),
            screen: ScreenSection::default(),
            controls: ControlsSection::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrip() {
        let cfg = ExperimentConfig::induction_default("t", 42, 7, &[50, 100]);
        let toml_str = cfg.to_canonical_toml();
        let back = ExperimentConfig::from_toml_str(&toml_str).unwrap();
        assert_eq!(back.content_hash(), cfg.content_hash());
        assert_eq!(back.model_config().unwrap(), cfg.model_config().unwrap());
    }

    #[test]
    fn minimal_toml_with_defaults() {
        let s = r#"
[experiment]
name = "mini"
task = "induction"

[model]
preset = "tiny"
seed = 1

[train]
data_seed = 2
checkpoint_schedule = [10, 20]
"#;
        let cfg = ExperimentConfig::from_toml_str(s).unwrap();
        assert_eq!(cfg.screen.induction_threshold, 50.0);
        assert_eq!(cfg.screen.prev_token_threshold, 100.0);
        assert_eq!(cfg.controls.seeds, vec![123]);
    }

    #[test]
    fn bad_schedule_rejected() {
        let mut cfg = ExperimentConfig::induction_default("t", 1, 2, &[20, 10]);
        assert!(cfg.validate().is_err());
        cfg.train.checkpoint_schedule = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn preset_overrides_apply() {
        let mut cfg = ExperimentConfig::induction_default("t", 1, 2, &[10]);
        cfg.model.n_layers = Some(3);
        cfg.model.d_model = Some(96);
        cfg.model.n_heads = Some(6);
        cfg.model.d_head = Some(16);
        let m = cfg.model_config().unwrap();
        assert_eq!(m.n_layers, 3);
        assert_eq!(m.d_model, 96);
        // invalid override combination rejected
        cfg.model.d_head = Some(17);
        assert!(cfg.model_config().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = r#"
[experiment]
name = "x"
task = "induction"
bogus = 1

[model]
preset = "tiny"
seed = 1

[train]
data_seed = 2
checkpoint_schedule = [10]
"#;
        assert!(ExperimentConfig::from_toml_str(s).is_err());
    }
}
