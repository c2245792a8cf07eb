//! Flat parameter storage with a named tensor layout.
//!
//! All parameters live in a single `Vec<f32>`; the layout maps tensor names
//! to (shape, offset) in a fixed order derived from the config. The
//! optimizer walks the flat buffer, the checkpoint container serializes it
//! tensor by tensor, and tests perturb named slices, all without any
//! per-field plumbing.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};

/// One tensor's slot in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Layout order (also the initialization draw order):
/// `tok_embed`, `pos_embed`, then per layer `ln1.{gamma,beta}`,
/// `attn.{w_q,w_k,w_v,w_o}`, `ln2.{gamma,beta}`, `ffn.{w_in,w_out}`,
/// then `final_ln.{gamma,beta}`, `lm_head`.
pub fn layout(config: &ModelConfig) -> Vec<TensorSpec> {
    let d = config.d_model;
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        specs.push(TensorSpec {
            name,
            shape,
            offset,
        });
        offset += len;
    };
    push("tok_embed".into(), vec![config.vocab_size, d]);
    push("pos_embed".into(), vec![config.max_seq_len, d]);
    for i in 0..config.n_layers {
        push(format!("layer{i}.ln1.gamma"), vec![d]);
        push(format!("layer{i}.ln1.beta"), vec![d]);
        push(format!("layer{i}.attn.w_q"), vec![d, d]);
        push(format!("layer{i}.attn.w_k"), vec![d, d]);
        push(format!("layer{i}.attn.w_v"), vec![d, d]);
        push(format!("layer{i}.attn.w_o"), vec![d, d]);
        push(format!("layer{i}.ln2.gamma"), vec![d]);
        push(format!("layer{i}.ln2.beta"), vec![d]);
        push(format!("layer{i}.ffn.w_in"), vec![d, config.ffn_dim]);
        push(format!("layer{i}.ffn.w_out"), vec![config.ffn_dim, d]);
    }
    push("final_ln.gamma".into(), vec![d]);
    push("final_ln.beta".into(), vec![d]);
    if !config.tied_embeddings {
        push("lm_head".into(), vec![d, config.vocab_size]);
    }
    specs
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    data: Vec<f32>,
    layout: Vec<TensorSpec>,
}

impl ParamStore {
    pub fn zeros(config: &ModelConfig) -> Self {
        let layout = layout(config);
        let total = layout.iter().map(TensorSpec::len).sum();
        ParamStore {
            data: vec![0.0; total],
            layout,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn spec(&self, name: &str) -> Result<&TensorSpec> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Invariant(format!("unknown tensor {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&[f32]> {
        let s = self.spec(name)?;
        Ok(&self.data[s.offset..s.offset + s.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut [f32]> {
        let s = self.spec(name)?.clone();
        Ok(&mut self.data[s.offset..s.offset + s.len()])
    }

    /// 2-D view of a matrix tensor.
    pub fn view2(&self, name: &str) -> Result<ArrayView2<'_, f32>> {
        let s = self.spec(name)?;
        if s.shape.len() != 2 {
            return Err(Error::Invariant(format!(
                "tensor {name:?} has shape {:?}, expected 2-d",
                s.shape
            )));
        }
        let (r, c) = (s.shape[0], s.shape[1]);
        ArrayView2::from_shape((r, c), &self.data[s.offset..s.offset + r * c])
            .map_err(|e| Error::Invariant(format!("view {name:?}: {e}")))
    }

    pub fn view2_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, f32>> {
        let s = self.spec(name)?.clone();
        if s.shape.len() != 2 {
            return Err(Error::Invariant(format!(
                "tensor {name:?} has shape {:?}, expected 2-d",
                s.shape
            )));
        }
        let (r, c) = (s.shape[0], s.shape[1]);
        ArrayViewMut2::from_shape((r, c), &mut self.data[s.offset..s.offset + r * c])
            .map_err(|e| Error::Invariant(format!("view {name:?}: {e}")))
    }

    /// Fill tensors in layout order: LN gammas to 1, betas to 0, residual
    /// writers (`attn.w_o`, `ffn.w_out`) to N(0, 0.02/sqrt(2*n_layers)),
    /// everything else Gaussian N(0, 0.02). Only Gaussian tensors consume
    /// randomness, in layout order, so the draw sequence is reproducible.
    pub fn init_in_layout_order(&mut self, config: &ModelConfig, r: &mut ChaCha12Rng) {
        let base = Normal::new(0.0f32, 0.02).expect("valid stddev");
        let residual_std = 0.02 / (2.0 * config.n_layers as f32).sqrt();
        let residual = Normal::new(0.0f32, residual_std).expect("valid stddev");
        let layout = self.layout.clone();
        for spec in &layout {
            let slice = &mut self.data[spec.offset..spec.offset + spec.len()];
            if spec.name.ends_with(".gamma") {
                slice.fill(1.0);
            } else if spec.name.ends_with(".beta") {
                slice.fill(0.0);
            } else if spec.name.ends_with("attn.w_o") || spec.name.ends_with("ffn.w_out") {
                for v in slice.iter_mut() {
                    *v = residual.sample(r);
                }
            } else {
                for v in slice.iter_mut() {
                    *v = base.sample(r);
                }
            }
        }
    }

    /// Add N(0, scale) noise to head `head`'s value columns
    /// (`w_v[:, h*d_head..(h+1)*d_head]`) and output-projection rows
    /// (`w_o[h*d_head.., :]`). Used by ablation-nullification probes: a
    /// masked head's logits must be invariant to this perturbation.
    pub fn perturb_head_value_output(
        &mut self,
        config: &ModelConfig,
        head: super::HeadId,
        r: &mut ChaCha12Rng,
        scale: f32,
    ) -> Result<()> {
        head.validate(config)?;
        let lo = head.head * config.d_head;
        let hi = lo + config.d_head;
        {
            let mut w_v = self.view2_mut(&format!("layer{}.attn.w_v", head.layer))?;
            for mut row in w_v.rows_mut() {
                for v in row.slice_mut(ndarray::s![lo..hi]) {
                    *v += scale * r.gen_range(-1.0f32..1.0);
                }
            }
        }
        {
            let mut w_o = self.view2_mut(&format!("layer{}.attn.w_o", head.layer))?;
            for mut row in w_o.slice_mut(ndarray::s![lo..hi, ..]).rows_mut() {
                for v in row.iter_mut() {
                    *v += scale * r.gen_range(-1.0f32..1.0);
                }
            }
        }
        Ok(())
    }
}
