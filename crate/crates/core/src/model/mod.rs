//! Minimal decoder-only transformer with deterministic training,
//! checkpointing, per-head output capture, and per-head ablation masking.
//!
//! Architecture: learned absolute position embeddings, pre-LN blocks,
//! bias-free attention and FFN projections, GELU, untied LM head. Everything
//! is f32; parameters live in one flat buffer with a named layout so the
//! optimizer, the checkpoint container, and perturbation tests all address
//! tensors the same way.

mod checkpoint;
mod forward;
mod params;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};

/// Tensor container primitives shared with the capture cache.
pub(crate) mod tensor_io {
    pub(crate) use super::checkpoint::{read_tensor_file, write_tensor_file, TensorEntry};
}
pub use forward::{gelu, Captured, CaptureSpec, ForwardStats, QueryPositions};
pub use params::{ParamStore, TensorSpec};
pub use train::{train, CheckpointSink, TokenStream, TrainConfig};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng, stream};

/// Shape and seed of a model. `d_head * n_heads == d_model` is enforced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Tie the LM head to the token embedding (GPT-2 style). Untied models
    /// carry a separate `lm_head` tensor.
    #[serde(default = "default_tied")]
    pub tied_embeddings: bool,
}

fn default_tied() -> bool {
    true
}

impl ModelConfig {
    /// 2L/64d/4h — large enough for induction heads to form, small enough
    /// for CPU test runs.
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            ffn_dim: 256,
            vocab_size: 512,
            max_seq_len: 128,
            seed,
            tied_embeddings: true,
        }
    }

    /// 4L/128d/8h with vocab 2048 and context 256, for the key-retrieval
    /// probe experiments.
    pub fn probe(seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 8,
            d_head: 16,
            ffn_dim: 512,
            vocab_size: 2048,
            max_seq_len: 256,
            seed,
            tied_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::invalid(format!(
                "d_head ({}) * n_heads ({}) must equal d_model ({})",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

/// (layer, head) coordinate; the universal key of every analysis.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.head >= config.n_heads {
            return Err(Error::invalid(format!(
                "{self} out of bounds for {}L/{}h model",
                config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }

    /// Flat index `layer * n_heads + head`, used for contiguous per-head storage.
    pub fn flat(&self, n_heads: usize) -> usize {
        self.layer * n_heads + self.head
    }

    pub fn from_flat(flat: usize, n_heads: usize) -> Self {
        HeadId::new(flat / n_heads, flat % n_heads)
    }

    /// Parse "L2H5".
    pub fn parse(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix('L')
            .ok_or_else(|| Error::invalid(format!("bad head id {s:?}, expected LxHy")))?;
        let (l, h) = body
            .split_once('H')
            .ok_or_else(|| Error::invalid(format!("bad head id {s:?}, expected LxHy")))?;
        Ok(HeadId::new(
            l.parse()
                .map_err(|_| Error::invalid(format!("bad layer in {s:?}")))?,
            h.parse()
                .map_err(|_| Error::invalid(format!("bad head in {s:?}")))?,
        ))
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Set of heads whose output-projection input is zeroed during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    heads: BTreeSet<HeadId>,
}

impl AblationMask {
    pub fn empty() -> Self {
        AblationMask::default()
    }

    pub fn from_heads(heads: impl IntoIterator<Item = HeadId>) -> Self {
        AblationMask {
            heads: heads.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, head: HeadId) {
        self.heads.insert(head);
    }

    pub fn contains(&self, head: &HeadId) -> bool {
        self.heads.contains(head)
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadId> {
        self.heads.iter()
    }

    /// Mask composition is set union.
    pub fn union(&self, other: &AblationMask) -> AblationMask {
        AblationMask {
            heads: self.heads.union(&other.heads).cloned().collect(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for h in &self.heads {
            h.validate(config)?;
        }
        Ok(())
    }

    /// Heads of this mask in the given layer.
    pub fn heads_in_layer(&self, layer: usize) -> Vec<usize> {
        self.heads
            .iter()
            .filter(|h| h.layer == layer)
            .map(|h| h.head)
            .collect()
    }
}

/// A model is its config plus the flat parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Deterministic initialization: LN gammas 1, betas 0; projections and
    /// embeddings N(0, 0.02); residual-writing projections (attention output,
    /// FFN output) N(0, 0.02/sqrt(2*n_layers)). Tensors are filled row-major
    /// in layout order from a ChaCha stream seeded by `seed`, so equal
    /// `(config, seed)` gives bit-identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::zeros(&config);
        let mut r = rng(seed, stream::PARAM_INIT);
        params.init_in_layout_order(&config, &mut r);
        Ok(Model { config, params })
    }

    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::zeros(&config);
        Ok(Model { config, params })
    }
}

/// A training snapshot: parameters plus where in the token stream they were taken.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub model: Model,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ModelConfig::tiny(7), 7).unwrap();
        let b = Model::init(ModelConfig::tiny(7), 7).unwrap();
        assert_eq!(a.params.data(), b.params.data());
    }

    #[test]
    fn distinct_seeds_differ() {
        let a = Model::init(ModelConfig::tiny(7), 7).unwrap();
        let b = Model::init(ModelConfig::tiny(7), 8).unwrap();
        assert_ne!(a.params.data(), b.params.data());
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut cfg = ModelConfig::tiny(0);
        cfg.d_model = 65;
        assert!(cfg.validate().is_err());
        assert!(Model::init(cfg, 0).is_err());
    }

    #[test]
    fn zero_count_rejected() {
        let mut cfg = ModelConfig::tiny(0);
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_id_bounds_and_parse() {
        let cfg = ModelConfig::tiny(0);
        assert!(HeadId::new(1, 3).validate(&cfg).is_ok());
        assert!(HeadId::new(2, 0).validate(&cfg).is_err());
        assert!(HeadId::new(0, 4).validate(&cfg).is_err());
        assert_eq!(HeadId::parse("L1H3").unwrap(), HeadId::new(1, 3));
        assert!(HeadId::parse("H1L3").is_err());
    }

    #[test]
    fn mask_union_is_set_union() {
        let a = AblationMask::from_heads([HeadId::new(0, 0), HeadId::new(0, 1)]);
        let b = AblationMask::from_heads([HeadId::new(0, 1), HeadId::new(1, 2)]);
        let u = a.union(&b);
        assert_eq!(u.len(), 3);
        assert!(u.contains(&HeadId::new(1, 2)));
    }
}
