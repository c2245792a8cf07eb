//! Per-head activation matrices and attention rows for (checkpoint, batch)
//! pairs, with a disk cache so trajectory sweeps do not recompute forwards.
//!
//! One cached forward pass covers every head of the model: the capture file
//! stores all output-projection-input slices and attention rows at the
//! requested query positions, keyed by (parameter hash, batch hash, query
//! policy). The cache format is the checkpoint tensor container.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CaptureSpec, Checkpoint, HeadId, QueryPositions};
use crate::taskgen::EvalBatch;

/// Examples per forward chunk; bounds peak memory on large batches.
const CHUNK: usize = 256;

/// Where activations are read in each sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryPolicy {
    /// Use `EvalBatch::query_positions` (the default).
    BatchDefined,
    /// A fixed index for every example (multi-position robustness runs).
    Fixed(usize),
}

impl QueryPolicy {
    fn tag(&self) -> String {
        match self {
            QueryPolicy::BatchDefined => "batch".to_string(),
            QueryPolicy::Fixed(p) => format!("fixed{p}"),
        }
    }

    pub fn positions(&self, batch: &EvalBatch) -> QueryPositions {
        match self {
            QueryPolicy::BatchDefined => QueryPositions::PerExample(batch.query_positions.clone()),
            QueryPolicy::Fixed(p) => QueryPositions::Fixed(*p),
        }
    }
}

/// N x d_head per-head output at the query positions.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    pub head: HeadId,
    pub checkpoint_step: u64,
    pub values: Array2<f32>,
    pub policy: QueryPolicy,
}

/// Softmaxed attention rows (one per example) for a single head.
#[derive(Debug, Clone)]
pub struct AttentionRows {
    pub head: HeadId,
    pub checkpoint_step: u64,
    /// `[n_examples, seq_len]`; entries beyond each query position are zero.
    pub rows: Array2<f32>,
    pub query_positions: Vec<usize>,
}

impl AttentionRows {
    pub fn validate(&self) -> Result<()> {
        for (e, row) in self.rows.rows().into_iter().enumerate() {
            let q = self.query_positions[e];
            let mut sum = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                if v < 0.0 {
                    return Err(Error::Invariant(format!(
                        "attention row {e} has negative mass at {j}"
                    )));
                }
                if j > q && v != 0.0 {
                    return Err(Error::Invariant(format!(
                        "attention row {e} has mass {v} beyond query {q}"
                    )));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Invariant(format!(
                    "attention row {e} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything captured for one (checkpoint, batch, policy) triple.
#[derive(Debug, Clone)]
pub struct CaptureSet {
    pub step: u64,
    pub policy: QueryPolicy,
    /// `[total_heads, n_examples, d_head]`
    pub head_outputs: Array3<f32>,
    /// `[total_heads, n_examples, seq_len]`
    pub attention: Array3<f32>,
    pub positions: Vec<usize>,
    pub n_heads: usize,
}

impl CaptureSet {
    pub fn head_output_matrix(&self, head: HeadId) -> ActivationMatrix {
        ActivationMatrix {
            head,
            checkpoint_step: self.step,
            values: self.head_outputs.slice(s![head.flat(self.n_heads), .., ..]).to_owned(),
            policy: self.policy,
        }
    }

    pub fn attention_rows(&self, head: HeadId) -> AttentionRows {
        AttentionRows {
            head,
            checkpoint_step: self.step,
            rows: self.attention.slice(s![head.flat(self.n_heads), .., ..]).to_owned(),
            query_positions: self.positions.clone(),
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CaptureStats {
    /// Model forward passes actually executed (chunked passes count once each).
    pub forwards: u64,
    pub cache_hits: u64,
}

#[derive(Serialize, Deserialize)]
struct CacheIndexEntry {
    file: String,
    step: u64,
    params_hash: String,
    batch_hash: String,
    policy: String,
    positions: Vec<usize>,
}

/// Capture executor with an optional disk cache.
pub struct CaptureCache {
    dir: Option<PathBuf>,
    pub stats: CaptureStats,
}

impl CaptureCache {
    /// In-memory only; every capture runs a forward pass.
    pub fn disabled() -> Self {
        CaptureCache {
            dir: None,
            stats: CaptureStats::default(),
        }
    }

    /// Cache capture files under `dir` (created if missing), with an
    /// `index.json` enumerating contents.
    pub fn at(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(CaptureCache {
            dir: Some(dir.to_path_buf()),
            stats: CaptureStats::default(),
        })
    }

    /// Capture all heads' output matrices and attention rows.
    pub fn capture(
        &mut self,
        ckpt: &Checkpoint,
        batch: &EvalBatch,
        policy: QueryPolicy,
    ) -> Result<CaptureSet> {
        let key = self.dir.as_ref().map(|dir| {
            let params_hash = params_hash(ckpt);
            let batch_hash = batch.content_hash();
            let file = format!(
                "cap_{}_{}_{}.ht",
                &params_hash[..12],
                &batch_hash[..12],
                policy.tag()
            );
            (dir.clone(), file, params_hash, batch_hash)
        });

        if let Some((dir, file, _, _)) = &key {
            let path = dir.join(file);
            if path.exists() {
                let set = self.load(&path, ckpt, batch, policy)?;
                self.stats.cache_hits += 1;
                return Ok(set);
            }
        }

        let set = self.run_capture(ckpt, batch, policy)?;
        if let Some((dir, file, params_hash, batch_hash)) = key {
            self.store(&dir, &file, &params_hash, &batch_hash, &set)?;
        }
        Ok(set)
    }

    fn run_capture(
        &mut self,
        ckpt: &Checkpoint,
        batch: &EvalBatch,
        policy: QueryPolicy,
    ) -> Result<CaptureSet> {
        let model = &ckpt.model;
        let n = batch.n_examples();
        let t = batch.seq_len();
        let total_heads = model.config.total_heads();
        let dh = model.config.d_head;
        let mut head_outputs = Array3::<f32>::zeros((total_heads, n, dh));
        let mut attention = Array3::<f32>::zeros((total_heads, n, t));
        let mut positions = Vec::with_capacity(n);

        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let tokens = batch.tokens.slice(s![start..end, ..]);
            let spec = CaptureSpec {
                positions: match policy {
                    QueryPolicy::BatchDefined => QueryPositions::PerExample(
                        batch.query_positions[start..end].to_vec(),
                    ),
                    QueryPolicy::Fixed(p) => QueryPositions::Fixed(p),
                },
                head_outputs: true,
                attention: true,
            };
            let cap = model.forward_capture(tokens, None, &spec)?;
            self.stats.forwards += 1;
            let outs = cap.head_outputs.expect("head outputs requested");
            let attn = cap.attention.expect("attention requested");
            head_outputs.slice_mut(s![.., start..end, ..]).assign(&outs);
            attention.slice_mut(s![.., start..end, ..]).assign(&attn);
            positions.extend_from_slice(&cap.positions);
            start = end;
        }

        if let Some(bad) = head_outputs.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite activation {bad} at checkpoint step {}",
                ckpt.step
            )));
        }
        if let Some(bad) = attention.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite attention {bad} at checkpoint step {}",
                ckpt.step
            )));
        }

        Ok(CaptureSet {
            step: ckpt.step,
            policy,
            head_outputs,
            attention,
            positions,
            n_heads: model.config.n_heads,
        })
    }

    fn store(
        &mut self,
        dir: &Path,
        file: &str,
        params_hash: &str,
        batch_hash: &str,
        set: &CaptureSet,
    ) -> Result<()> {
        use crate::model::tensor_io::{write_tensor_file, TensorEntry};
        let (heads, n, dh) = set.head_outputs.dim();
        let t = set.attention.dim().2;
        let outs_std = set.head_outputs.as_standard_layout();
        let attn_std = set.attention.as_standard_layout();
        let mut entries = Vec::with_capacity(heads * 2);
        for hf in 0..heads {
            let h = HeadId::from_flat(hf, set.n_heads);
            entries.push(TensorEntry {
                name: format!("out.{h}"),
                shape: vec![n, dh],
                data: &outs_std.as_slice().expect("standard layout")[hf * n * dh..(hf + 1) * n * dh],
            });
        }
        for hf in 0..heads {
            let h = HeadId::from_flat(hf, set.n_heads);
            entries.push(TensorEntry {
                name: format!("attn.{h}"),
                shape: vec![n, t],
                data: &attn_std.as_slice().expect("standard layout")[hf * n * t..(hf + 1) * n * t],
            });
        }
        let path = dir.join(file);
        write_tensor_file(&path, &entries)?;
        self.update_index(dir, CacheIndexEntry {
            file: file.to_string(),
            step: set.step,
            params_hash: params_hash.to_string(),
            batch_hash: batch_hash.to_string(),
            policy: set.policy.tag(),
            positions: set.positions.clone(),
        })
    }

    fn update_index(&self, dir: &Path, entry: CacheIndexEntry) -> Result<()> {
        let index_path = dir.join("index.json");
        let mut entries: std::collections::BTreeMap<String, CacheIndexEntry> =
            if index_path.exists() {
                serde_json::from_str(
                    &fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?,
                )?
            } else {
                Default::default()
            };
        entries.insert(entry.file.clone(), entry);
        fs::write(&index_path, serde_json::to_string_pretty(&entries)?)
            .map_err(|e| Error::io(&index_path, e))?;
        Ok(())
    }

    fn load(
        &mut self,
        path: &Path,
        ckpt: &Checkpoint,
        batch: &EvalBatch,
        policy: QueryPolicy,
    ) -> Result<CaptureSet> {
        use crate::model::tensor_io::read_tensor_file;
        let tensors = read_tensor_file(path)?;
        let config = &ckpt.model.config;
        let total_heads = config.total_heads();
        let n = batch.n_examples();
        let t = batch.seq_len();
        let dh = config.d_head;
        let mut head_outputs = Array3::<f32>::zeros((total_heads, n, dh));
        let mut attention = Array3::<f32>::zeros((total_heads, n, t));
        for tensor in tensors {
            let (kind, head) = tensor
                .name
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("bad cache tensor {}", tensor.name)))?;
            let id = HeadId::parse(head)?;
            id.validate(config)?;
            let hf = id.flat(config.n_heads);
            match kind {
                "out" => {
                    if tensor.shape != [n, dh] {
                        return Err(Error::Format(format!(
                            "cache tensor {} shape {:?} != [{n}, {dh}]",
                            tensor.name, tensor.shape
                        )));
                    }
                    head_outputs
                        .slice_mut(s![hf, .., ..])
                        .assign(&Array2::from_shape_vec((n, dh), tensor.data).expect("shape checked"));
                }
                "attn" => {
                    if tensor.shape != [n, t] {
                        return Err(Error::Format(format!(
                            "cache tensor {} shape {:?} != [{n}, {t}]",
                            tensor.name, tensor.shape
                        )));
                    }
                    attention
                        .slice_mut(s![hf, .., ..])
                        .assign(&Array2::from_shape_vec((n, t), tensor.data).expect("shape checked"));
                }
                other => {
                    return Err(Error::Format(format!("unknown cache tensor kind {other}")));
                }
            }
        }
        let positions = policy.positions(batch).resolve(n, t)?;
        Ok(CaptureSet {
            step: ckpt.step,
            policy,
            head_outputs,
            attention,
            positions,
            n_heads: config.n_heads,
        })
    }
}

/// Extract one head's activation matrix (convenience over [`CaptureCache`]).
pub fn head_output_matrix(
    cache: &mut CaptureCache,
    ckpt: &Checkpoint,
    batch: &EvalBatch,
    head: HeadId,
) -> Result<ActivationMatrix> {
    head.validate(&ckpt.model.config)?;
    let set = cache.capture(ckpt, batch, QueryPolicy::BatchDefined)?;
    Ok(set.head_output_matrix(head))
}

/// Extract one head's attention rows at the batch query positions.
pub fn attention_rows(
    cache: &mut CaptureCache,
    ckpt: &Checkpoint,
    batch: &EvalBatch,
    head: HeadId,
) -> Result<AttentionRows> {
    head.validate(&ckpt.model.config)?;
    let set = cache.capture(ckpt, batch, QueryPolicy::BatchDefined)?;
    Ok(set.attention_rows(head))
}

fn params_hash(ckpt: &Checkpoint) -> String {
    let mut hasher = Sha256::new();
    for v in ckpt.model.params.data() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::taskgen::gen_induction_batch;

    fn tiny_checkpoint(seed: u64) -> Checkpoint {
        Checkpoint {
            step: 5,
            tokens_seen: 1000,
            model: Model::init(ModelConfig::tiny(seed), seed).unwrap(),
        }
    }

    #[test]
    fn matrix_shape_and_purity() {
        let ckpt = tiny_checkpoint(1);
        let batch = gen_induction_batch(40, 32, 2, 512, 42).unwrap();
        let mut cache = CaptureCache::disabled();
        let m1 = head_output_matrix(&mut cache, &ckpt, &batch, HeadId::new(1, 2)).unwrap();
        assert_eq!(m1.values.dim(), (40, ckpt.model.config.d_head));
        let m2 = head_output_matrix(&mut cache, &ckpt, &batch, HeadId::new(1, 2)).unwrap();
        assert_eq!(m1.values, m2.values);
    }

    #[test]
    fn zeroed_checkpoint_gives_zero_matrix() {
        let ckpt = Checkpoint {
            step: 0,
            tokens_seen: 0,
            model: Model::zeroed(ModelConfig::tiny(0)).unwrap(),
        };
        let batch = gen_induction_batch(8, 16, 2, 512, 1).unwrap();
        let mut cache = CaptureCache::disabled();
        let m = head_output_matrix(&mut cache, &ckpt, &batch, HeadId::new(0, 0)).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_satisfy_invariants() {
        let ckpt = tiny_checkpoint(2);
        let batch = gen_induction_batch(16, 24, 2, 512, 3).unwrap();
        let mut cache = CaptureCache::disabled();
        for h in 0..ckpt.model.config.n_heads {
            let rows = attention_rows(&mut cache, &ckpt, &batch, HeadId::new(1, h)).unwrap();
            rows.validate().unwrap();
        }
    }

    #[test]
    fn out_of_bounds_head_rejected() {
        let ckpt = tiny_checkpoint(3);
        let batch = gen_induction_batch(4, 16, 2, 512, 4).unwrap();
        let mut cache = CaptureCache::disabled();
        assert!(head_output_matrix(&mut cache, &ckpt, &batch, HeadId::new(9, 0)).is_err());
    }

    #[test]
    fn disk_cache_avoids_recomputation_and_is_faithful() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_checkpoint(4);
        let batch = gen_induction_batch(12, 24, 2, 512, 5).unwrap();

        let mut fresh = CaptureCache::disabled();
        let direct = fresh.capture(&ckpt, &batch, QueryPolicy::BatchDefined).unwrap();

        let mut cached = CaptureCache::at(dir.path()).unwrap();
        let first = cached.capture(&ckpt, &batch, QueryPolicy::BatchDefined).unwrap();
        assert_eq!(cached.stats.forwards, 1);
        assert_eq!(cached.stats.cache_hits, 0);
        let second = cached.capture(&ckpt, &batch, QueryPolicy::BatchDefined).unwrap();
        assert_eq!(cached.stats.forwards, 1, "cache did not prevent recomputation");
        assert_eq!(cached.stats.cache_hits, 1);

        assert_eq!(first.head_outputs, direct.head_outputs);
        assert_eq!(second.head_outputs, direct.head_outputs);
        assert_eq!(second.attention, direct.attention);
        assert!(dir.path().join("index.json").exists());
    }

    #[test]
    fn chunked_equals_per_example_capture() {
        let ckpt = tiny_checkpoint(5);
        let batch = gen_induction_batch(10, 20, 2, 512, 6).unwrap();
        let mut cache = CaptureCache::disabled();
        let full = cache.capture(&ckpt, &batch, QueryPolicy::BatchDefined).unwrap();
        for e in 0..batch.n_examples() {
            let single = EvalBatch {
                tokens: batch.tokens.slice(s![e..e + 1, ..]).to_owned(),
                query_positions: vec![batch.query_positions[e]],
                target_tokens: vec![batch.target_tokens[e]],
                special_positions: vec![batch.special_positions[e].clone()],
            };
            let one = cache.capture(&ckpt, &single, QueryPolicy::BatchDefined).unwrap();
            let max_diff = full
                .head_outputs
                .slice(s![.., e, ..])
                .iter()
                .zip(one.head_outputs.slice(s![.., 0, ..]).iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            // achieved tolerance is bit-exact; the contract allows 1e-6
            assert!(max_diff <= 1e-6, "example {e}: batched vs single diff {max_diff}");
        }
    }

    #[test]
    fn fixed_position_policy() {
        let ckpt = tiny_checkpoint(6);
        let batch = gen_induction_batch(6, 24, 2, 512, 7).unwrap();
        let mut cache = CaptureCache::disabled();
        let set = cache.capture(&ckpt, &batch, QueryPolicy::Fixed(10)).unwrap();
        assert!(set.positions.iter().all(|&p| p == 10));
        let rows = set.attention_rows(HeadId::new(0, 1));
        rows.validate().unwrap();
        for row in rows.rows.rows() {
            assert!(row.slice(s![11..]).iter().all(|&v| v == 0.0));
        }
    }
}
