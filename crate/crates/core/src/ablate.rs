//! Causal verification: group ablation of a circuit with matched-random and
//! all-heads-in-layer upper-bound controls, evaluation metrics, threshold
//! sweeps, and cross-seed cross-ablation.
//!
//! Metrics are top-1/top-5 accuracy at each example's query position against
//! its target token, the per-example mean of the raw (pre-softmax) target
//! logit, and optionally LM loss on a held-out filler stream. Top-k uses
//! strict logit ordering with token-index tiebreak.

use std::collections::BTreeSet;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capture::{CaptureCache, QueryPolicy};
use crate::error::{Error, Result};
use crate::model::{AblationMask, Checkpoint, HeadId, Model, TokenStream};
use crate::rng::{rng, stream};
use crate::screen::{all_head_screen, CircuitSpec, PatternClass};
use crate::taskgen::{EvalBatch, MarkovFiller};

const EVAL_CHUNK: usize = 256;

/// Held-out filler stream for LM validation loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValLossConfig {
    pub seed: u64,
    pub n_tokens: usize,
    pub seq_len: usize,
    pub filler_lo: u32,
    pub filler_hi: u32,
}

impl ValLossConfig {
    pub fn new(seq_len: usize, filler_lo: u32, filler_hi: u32) -> Self {
        ValLossConfig {
            seed: 0xF1117,
            n_tokens: 65_536,
            seq_len,
            filler_lo,
            filler_hi,
        }
    }
}

/// Metrics for one ablation condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub condition: String,
    pub heads: Vec<HeadId>,
    pub top1: f64,
    pub top5: f64,
    pub mean_target_logit: f64,
    pub val_loss: Option<f64>,
    /// Deltas vs the baseline row; `None` on the baseline itself.
    pub top1_delta: Option<f64>,
    pub top5_delta: Option<f64>,
    pub target_logit_delta: Option<f64>,
    pub val_loss_delta: Option<f64>,
    pub flags: Vec<String>,
}

impl AblationResult {
    fn with_deltas(mut self, baseline: &AblationResult) -> AblationResult {
        self.top1_delta = Some(self.top1 - baseline.top1);
        self.top5_delta = Some(self.top5 - baseline.top5);
        self.target_logit_delta = Some(self.mean_target_logit - baseline.mean_target_logit);
        self.val_loss_delta = match (self.val_loss, baseline.val_loss) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        self
    }
}

fn eval_logits(model: &Model, batch: &EvalBatch, mask: Option<&AblationMask>) -> Result<Array2<f32>> {
    let n = batch.n_examples();
    let vocab = model.config.vocab_size;
    let mut logits = Array2::<f32>::zeros((n, vocab));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = model.logits_at(
            batch.tokens.slice(s![start..end, ..]),
            &batch.query_positions[start..end],
            mask,
        )?;
        logits.slice_mut(s![start..end, ..]).assign(&chunk);
        start = end;
    }
    Ok(logits)
}

/// Rank of the target under strict logit ordering with index tiebreak.
fn target_rank(logits: &ndarray::ArrayView1<'_, f32>, target: usize) -> usize {
    let tv = logits[target];
    let mut rank = 0usize;
    for (j, &v) in logits.iter().enumerate() {
        if v > tv || (v == tv && j < target) {
            rank += 1;
        }
    }
    rank
}

/// Evaluate one ablation condition on a batch.
pub fn evaluate(
    ckpt: &Checkpoint,
    batch: &EvalBatch,
    mask: &AblationMask,
    condition: &str,
    val_loss: Option<&ValLossConfig>,
) -> Result<AblationResult> {
    mask.validate(&ckpt.model.config)?;
    batch.validate(ckpt.model.config.vocab_size)?;
    let mask_opt = if mask.is_empty() { None } else { Some(mask) };
    let logits = eval_logits(&ckpt.model, batch, mask_opt)?;
    let n = batch.n_examples();
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut logit_sum = 0.0f64;
    for e in 0..n {
        let target = batch.target_tokens[e] as usize;
        let row = logits.row(e);
        let rank = target_rank(&row, target);
        if rank == 0 {
            hits1 += 1;
        }
        if rank < 5 {
            hits5 += 1;
        }
        logit_sum += row[target] as f64;
    }
    let val = match val_loss {
        Some(cfg) => Some(filler_val_loss(&ckpt.model, cfg, mask_opt)?),
        None => None,
    };
    Ok(AblationResult {
        condition: condition.to_string(),
        heads: mask.heads().cloned().collect(),
        top1: hits1 as f64 / n as f64,
        top5: hits5 as f64 / n as f64,
        mean_target_logit: logit_sum / n as f64,
        val_loss: val,
        top1_delta: None,
        top5_delta: None,
        target_logit_delta: None,
        val_loss_delta: None,
        flags: Vec::new(),
    })
}

/// Mean next-token cross-entropy on a deterministic held-out filler stream.
pub fn filler_val_loss(
    model: &Model,
    cfg: &ValLossConfig,
    mask: Option<&AblationMask>,
) -> Result<f64> {
    let mut filler = MarkovFiller::new(cfg.seed, cfg.filler_lo, cfg.filler_hi)?;
    let seq = cfg.seq_len.min(model.config.max_seq_len);
    let batch_rows = 8usize;
    let mut remaining = cfg.n_tokens;
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    let mut buf = vec![0u32; batch_rows * (seq + 1)];
    while remaining > 0 {
        filler.fill(&mut buf);
        let full = ndarray::ArrayView2::from_shape((batch_rows, seq + 1), &buf).expect("shape");
        let inputs = full.slice(s![.., ..seq]);
        let targets = full.slice(s![.., 1..]);
        let logits = model.forward_full(inputs, mask)?;
        for e in 0..batch_rows {
            for p in 0..seq {
                let row = logits.slice(s![e, p, ..]);
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
                let tgt = targets[[e, p]] as usize;
                loss_sum -= (((row[tgt] - max).exp() / sum) as f64).ln();
                count += 1;
            }
        }
        remaining = remaining.saturating_sub(batch_rows * seq);
    }
    Ok(loss_sum / count as f64)
}

/// Matched-random control: per layer, the same number of heads as the
/// circuit picks, sampled uniformly from that layer's non-pick heads,
/// disjoint from the picks. If a layer is exhausted (picks cover it), the
/// deficit is borrowed from the nearest layer with spare heads and the
/// result is flagged.
pub fn matched_random_sets(
    circuit: &CircuitSpec,
    config: &crate::model::ModelConfig,
    seed: u64,
) -> Result<(AblationMask, Vec<String>)> {
    if circuit.heads.is_empty() {
        return Err(Error::invalid("matched-random control needs a nonempty circuit"));
    }
    for h in &circuit.heads {
        h.validate(config)?;
    }
    let picks: BTreeSet<HeadId> = circuit.heads.iter().cloned().collect();
    let counts = circuit.per_layer_counts();
    let mut r = rng(seed, stream::CONTROL);
    let mut chosen: BTreeSet<HeadId> = BTreeSet::new();
    let mut flags = Vec::new();
    let mut deficits: Vec<(usize, usize)> = Vec::new();

    for (&layer, &need) in &counts {
        let mut eligible: Vec<HeadId> = (0..config.n_heads)
            .map(|h| HeadId::new(layer, h))
            .filter(|h| !picks.contains(h))
            .collect();
        let take = need.min(eligible.len());
        partial_shuffle(&mut eligible, take, &mut r);
        chosen.extend(eligible.into_iter().take(take));
        if take < need {
            deficits.push((layer, need - take));
        }
    }

    for (layer, mut deficit) in deficits {
        flags.push(format!("layer{layer}_exhausted_borrowed{deficit}"));
        // nearest layers first; lower layer wins distance ties
        let mut order: Vec<usize> = (0..config.n_layers).filter(|&l| l != layer).collect();
        order.sort_by_key(|&l| (l.abs_diff(layer), l));
        for l in order {
            if deficit == 0 {
                break;
            }
            let mut spare: Vec<HeadId> = (0..config.n_heads)
                .map(|h| HeadId::new(l, h))
                .filter(|h| !picks.contains(h) && !chosen.contains(h))
                .collect();
            let take = deficit.min(spare.len());
            partial_shuffle(&mut spare, take, &mut r);
            chosen.extend(spare.into_iter().take(take));
            deficit -= take;
        }
        if deficit > 0 {
            return Err(Error::invalid(
                "not enough non-pick heads anywhere in the model for a matched control",
            ));
        }
    }

    let mask = AblationMask::from_heads(chosen);
    debug_assert!(mask.heads().all(|h| !picks.contains(h)));
    Ok((mask, flags))
}

fn partial_shuffle(items: &mut [HeadId], take: usize, r: &mut rand_chacha::ChaCha12Rng) {
    let n = items.len();
    for i in 0..take.min(n.saturating_sub(1)) {
        let j = r.gen_range(i..n);
        items.swap(i, j);
    }
}

/// All heads in the circuit's layers (the layer-level upper bound).
pub fn upper_bound_mask(circuit: &CircuitSpec, config: &crate::model::ModelConfig) -> AblationMask {
    let layers: BTreeSet<usize> = circuit.heads.iter().map(|h| h.layer).collect();
    AblationMask::from_heads(
        layers
            .into_iter()
            .flat_map(|l| (0..config.n_heads).map(move |h| HeadId::new(l, h))),
    )
}

/// Control selection for [`run_condition_suite`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlPolicy {
    pub matched_random_seeds: Vec<u64>,
    pub upper_bound: bool,
}

impl Default for ControlPolicy {
    fn default() -> Self {
        ControlPolicy {
            // Appendix-style default: one fixed control seed
            matched_random_seeds: vec![123],
            upper_bound: true,
        }
    }
}

/// Summary over matched-random seeds (multi-seed mode).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchedRandomSummary {
    pub seeds: Vec<u64>,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top1_min: f64,
    pub top1_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    /// Baseline first, then circuit ablation, matched-random rows, upper bound.
    pub rows: Vec<AblationResult>,
    pub matched_summary: Option<MatchedRandomSummary>,
    /// Set when the single-seed control effect is large relative to the
    /// circuit effect; multi-seed sampling is then recommended.
    pub multi_seed_recommended: bool,
}

/// Baseline, circuit ablation, matched-random control(s), and upper bound.
pub fn run_condition_suite(
    ckpt: &Checkpoint,
    batch: &EvalBatch,
    circuit: &CircuitSpec,
    controls: &ControlPolicy,
    val_loss: Option<&ValLossConfig>,
) -> Result<SuiteResult> {
    if circuit.heads.is_empty() {
        return Err(Error::invalid("condition suite needs a nonempty circuit"));
    }
    let baseline = evaluate(ckpt, batch, &AblationMask::empty(), "baseline", val_loss)?;

    let circuit_mask = AblationMask::from_heads(circuit.heads.iter().cloned());
    let circuit_row = evaluate(ckpt, batch, &circuit_mask, "circuit", val_loss)?
        .with_deltas(&baseline);

    let mut rows = vec![baseline.clone(), circuit_row.clone()];
    let mut matched_top1 = Vec::new();
    for &seed in &controls.matched_random_seeds {
        let (mask, flags) = matched_random_sets(circuit, &ckpt.model.config, seed)?;
        let mut row = evaluate(
            ckpt,
            batch,
            &mask,
            &format!("matched_random_s{seed}"),
            val_loss,
        )?
        .with_deltas(&baseline);
        row.flags = flags;
        matched_top1.push(row.top1);
        rows.push(row);
    }
    if controls.upper_bound {
        let mask = upper_bound_mask(circuit, &ckpt.model.config);
        rows.push(
            evaluate(ckpt, batch, &mask, "upper_bound", val_loss)?.with_deltas(&baseline),
        );
    }

    let matched_summary = if matched_top1.len() > 1 {
        let n = matched_top1.len() as f64;
        let mean = matched_top1.iter().sum::<f64>() / n;
        let var = matched_top1.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(MatchedRandomSummary {
            seeds: controls.matched_random_seeds.clone(),
            top1_mean: mean,
            top1_std: var.sqrt(),
            top1_min: matched_top1.iter().cloned().fold(f64::INFINITY, f64::min),
            top1_max: matched_top1.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    } else {
        None
    };

    let circuit_effect = circuit_row.top1_delta.unwrap_or(0.0).abs();
    let control_effect = matched_top1
        .first()
        .map(|t| (t - baseline.top1).abs())
        .unwrap_or(0.0);
    let multi_seed_recommended =
        matched_top1.len() == 1 && control_effect > 0.25 * circuit_effect && circuit_effect > 0.0;

    Ok(SuiteResult {
        rows,
        matched_summary,
        multi_seed_recommended,
    })
}

/// One point of the ablation-floor curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub circuit_size: usize,
    pub top1: f64,
    /// Fraction of baseline top-1 retained after ablation.
    pub retention: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub class: PatternClass,
    pub baseline_top1: f64,
    /// Rows in descending threshold order.
    pub rows: Vec<SweepRow>,
    /// Retention never increases as the threshold decreases.
    pub monotone: bool,
}

pub const SWEEP_THRESHOLDS: [f64; 5] = [2.0, 10.0, 30.0, 50.0, 100.0];

/// Ablation-floor sweep: for each threshold, screen the class at that
/// threshold, ablate the resulting circuit, and report retention.
pub fn threshold_sweep(
    cache: &mut CaptureCache,
    ckpt: &Checkpoint,
    batch: &EvalBatch,
    class: PatternClass,
    thresholds: &[f64],
) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return Err(Error::invalid("sweep needs at least one threshold"));
    }
    let set = cache.capture(ckpt, batch, QueryPolicy::BatchDefined)?;
    let baseline = evaluate(ckpt, batch, &AblationMask::empty(), "baseline", None)?;
    let mut ts = thresholds.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut rows = Vec::with_capacity(ts.len());
    for t in ts {
        let circuit = all_head_screen(&set, batch, class, t, &format!("sweep_{t}"))?;
        let mut flags = Vec::new();
        let (top1, retention) = if circuit.heads.is_empty() {
            flags.push("empty_circuit".into());
            (baseline.top1, 1.0)
        } else {
            let mask = AblationMask::from_heads(circuit.heads.iter().cloned());
            let row = evaluate(ckpt, batch, &mask, "sweep", None)?;
            let retention = if baseline.top1 > 0.0 {
                row.top1 / baseline.top1
            } else {
                flags.push("zero_baseline".into());
                1.0
            };
            (row.top1, retention)
        };
        rows.push(SweepRow {
            threshold: t,
            circuit_size: circuit.heads.len(),
            top1,
            retention,
            flags,
        });
    }
    // small tolerance: adding heads at a lower threshold may leave top-1
    // exactly flat, and accuracy is quantized by the batch size
    let eps = 1.0 / batch.n_examples().max(1) as f64 + 1e-12;
    let monotone = rows.windows(2).all(|w| w[1].retention <= w[0].retention + eps);
    if !monotone {
        for i in 1..rows.len() {
            if rows[i].retention > rows[i - 1].retention + eps {
                rows[i].flags.push("retention_increase".into());
            }
        }
    }
    Ok(SweepResult {
        class,
        baseline_top1: baseline.top1,
        rows,
        monotone,
    })
}

/// Evaluate one seed's circuit under another seed's model. Head coordinates
/// must fit the target model's shape.
pub fn cross_ablation(
    circuit_from: &CircuitSpec,
    model_of: &Checkpoint,
    batch: &EvalBatch,
) -> Result<Vec<AblationResult>> {
    for h in &circuit_from.heads {
        h.validate(&model_of.model.config).map_err(|_| {
            Error::invalid(format!(
                "circuit head {h} does not fit target model ({}L/{}h)",
                model_of.model.config.n_layers, model_of.model.config.n_heads
            ))
        })?;
    }
    let baseline = evaluate(model_of, batch, &AblationMask::empty(), "baseline", None)?;
    let mask = AblationMask::from_heads(circuit_from.heads.iter().cloned());
    let row = evaluate(
        model_of,
        batch,
        &mask,
        &format!("ablate_{}", circuit_from.name),
        None,
    )?
    .with_deltas(&baseline);
    Ok(vec![baseline, row])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionalResult {
    pub skipped: bool,
    pub rows: Vec<AblationResult>,
    /// Heads shared by the prev-token circuit and the induction circuit.
    pub overlap: Vec<HeadId>,
}

/// Ablate the previous-token circuit and measure the effect on the
/// synthetic induction batch, with a matched-random control. Reports the
/// overlap with the induction circuit when one is supplied.
pub fn compositional_experiment(
    ckpt: &Checkpoint,
    prev_circuit: &CircuitSpec,
    induction_batch: &EvalBatch,
    induction_circuit: Option<&CircuitSpec>,
    controls: &ControlPolicy,
) -> Result<CompositionalResult> {
    let overlap = induction_circuit
        .map(|ic| {
            let set: BTreeSet<&HeadId> = ic.heads.iter().collect();
            prev_circuit
                .heads
                .iter()
                .filter(|h| set.contains(h))
                .cloned()
                .collect::<Vec<_>>()
        })
        .unwrap_or_default();
    if prev_circuit.heads.is_empty() {
        return Ok(CompositionalResult {
            skipped: true,
            rows: Vec::new(),
            overlap,
        });
    }
    let suite = run_condition_suite(ckpt, induction_batch, prev_circuit, controls, None)?;
    Ok(CompositionalResult {
        skipped: false,
        rows: suite.rows,
        overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::screen::{CircuitProvenance, CircuitStatus};
    use crate::taskgen::gen_induction_batch;

    fn ckpt(seed: u64) -> Checkpoint {
        Checkpoint {
            step: 1,
            tokens_seen: 100,
            model: Model::init(ModelConfig::tiny(seed), seed).unwrap(),
        }
    }

    fn circuit(heads: Vec<HeadId>) -> CircuitSpec {
        CircuitSpec {
            name: "test".into(),
            heads,
            class: PatternClass::Induction,
            threshold: 50.0,
            status: CircuitStatus::Accepted,
            source: CircuitProvenance {
                checkpoint_step: 1,
                batch_hash: "h".into(),
                mode: "all_head".into(),
                n_examples: 8,
            },
        }
    }

    #[test]
    fn empty_mask_equals_baseline_exactly() {
        let c = ckpt(3);
        let batch = gen_induction_batch(32, 24, 2, 512, 4).unwrap();
        let a = evaluate(&c, &batch, &AblationMask::empty(), "a", None).unwrap();
        let b = evaluate(&c, &batch, &AblationMask::empty(), "b", None).unwrap();
        assert_eq!(a.top1, b.top1);
        assert_eq!(a.mean_target_logit, b.mean_target_logit);
        assert!(a.top1 <= a.top5);
    }

    #[test]
    fn random_init_scores_near_chance() {
        let c = ckpt(5);
        let batch = gen_induction_batch(512, 32, 2, 512, 6).unwrap();
        let r = evaluate(&c, &batch, &AblationMask::empty(), "baseline", None).unwrap();
        let p = 1.0 / 512.0;
        let bound = p + 3.0 * (p * (1.0 - p) / 512.0f64).sqrt();
        assert!(
            r.top1 <= bound + 1e-12,
            "random model top1 {} above 3-sigma chance bound {bound}",
            r.top1
        );
    }

    #[test]
    fn matched_random_respects_layer_counts_and_disjointness() {
        let c = ckpt(7);
        let picks = vec![HeadId::new(0, 1), HeadId::new(0, 2), HeadId::new(1, 3)];
        let circ = circuit(picks.clone());
        let (mask, flags) = matched_random_sets(&circ, &c.model.config, 99).unwrap();
        assert!(flags.is_empty());
        assert_eq!(mask.len(), 3);
        assert_eq!(mask.heads_in_layer(0).len(), 2);
        assert_eq!(mask.heads_in_layer(1).len(), 1);
        for h in mask.heads() {
            assert!(!picks.contains(h));
        }
        let (mask2, _) = matched_random_sets(&circ, &c.model.config, 99).unwrap();
        assert_eq!(mask, mask2, "same seed must give same control");
    }

    #[test]
    fn matched_random_borrows_on_exhausted_layer() {
        let c = ckpt(8);
        // all four heads of layer 0 picked: control must borrow from layer 1
        let picks: Vec<HeadId> = (0..4).map(|h| HeadId::new(0, h)).collect();
        let circ = circuit(picks.clone());
        let (mask, flags) = matched_random_sets(&circ, &c.model.config, 1).unwrap();
        assert_eq!(mask.len(), 4);
        assert!(!flags.is_empty(), "borrowing must be flagged");
        assert!(mask.heads().all(|h| h.layer == 1));
    }

    #[test]
    fn upper_bound_covers_pick_layers() {
        let c = ckpt(9);
        let circ = circuit(vec![HeadId::new(1, 0)]);
        let mask = upper_bound_mask(&circ, &c.model.config);
        assert_eq!(mask.len(), c.model.config.n_heads);
        assert!(mask.heads().all(|h| h.layer == 1));
    }

    #[test]
    fn suite_row_order_and_deltas() {
        let c = ckpt(10);
        let batch = gen_induction_batch(16, 24, 2, 512, 11).unwrap();
        let circ = circuit(vec![HeadId::new(0, 0), HeadId::new(1, 1)]);
        let suite = run_condition_suite(&c, &batch, &circ, &ControlPolicy::default(), None).unwrap();
        assert_eq!(suite.rows[0].condition, "baseline");
        assert!(suite.rows[0].top1_delta.is_none());
        assert_eq!(suite.rows[1].condition, "circuit");
        assert!(suite.rows[1].top1_delta.is_some());
        assert!(suite.rows.iter().any(|r| r.condition.starts_with("matched_random")));
        let ub = suite.rows.iter().find(|r| r.condition == "upper_bound").unwrap();
        let pick_layers: BTreeSet<usize> = circ.heads.iter().map(|h| h.layer).collect();
        for h in &ub.heads {
            assert!(pick_layers.contains(&h.layer));
        }
        assert!(ub.heads.len() > circ.heads.len());
        for r in &suite.rows {
            assert!(r.top1 <= r.top5 + 1e-12);
        }
    }

    #[test]
    fn multi_seed_summary() {
        let c = ckpt(12);
        let batch = gen_induction_batch(16, 24, 2, 512, 13).unwrap();
        let circ = circuit(vec![HeadId::new(0, 0)]);
        let controls = ControlPolicy {
            matched_random_seeds: vec![1, 2, 3],
            upper_bound: false,
        };
        let suite = run_condition_suite(&c, &batch, &circ, &controls, None).unwrap();
        let summary = suite.matched_summary.unwrap();
        assert_eq!(summary.seeds, vec![1, 2, 3]);
        assert!(summary.top1_min <= summary.top1_mean + 1e-12);
        assert!(summary.top1_mean <= summary.top1_max + 1e-12);
    }

    #[test]
    fn sweep_empty_circuit_retains_everything() {
        let c = ckpt(14);
        let batch = gen_induction_batch(24, 32, 2, 512, 15).unwrap();
        let mut cache = CaptureCache::disabled();
        // random init has no head anywhere near 1e6x
        let sweep =
            threshold_sweep(&mut cache, &c, &batch, PatternClass::Induction, &[1e6]).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        assert_eq!(sweep.rows[0].circuit_size, 0);
        assert_eq!(sweep.rows[0].retention, 1.0);
    }

    #[test]
    fn cross_ablation_shape_mismatch_rejected() {
        let c = ckpt(16);
        let batch = gen_induction_batch(8, 24, 2, 512, 17).unwrap();
        let bad = circuit(vec![HeadId::new(7, 0)]);
        assert!(cross_ablation(&bad, &c, &batch).is_err());
        let good = circuit(vec![HeadId::new(1, 1)]);
        let rows = cross_ablation(&good, &c, &batch).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].condition, "baseline");
    }

    #[test]
    fn compositional_empty_circuit_skips() {
        let c = ckpt(18);
        let batch = gen_induction_batch(8, 24, 2, 512, 19).unwrap();
        let mut empty = circuit(vec![]);
        empty.status = CircuitStatus::Empty;
        let res = compositional_experiment(&c, &empty, &batch, None, &ControlPolicy::default())
            .unwrap();
        assert!(res.skipped);
        assert!(res.rows.is_empty());
    }

    #[test]
    fn val_loss_runs_and_reacts_to_mask() {
        let c = ckpt(20);
        let cfg = ValLossConfig {
            seed: 3,
            n_tokens: 2048,
            seq_len: 32,
            filler_lo: 2,
            filler_hi: 512,
        };
        let base = filler_val_loss(&c.model, &cfg, None).unwrap();
        assert!(base.is_finite() && base > 0.0);
        let all = AblationMask::from_heads(
            (0..2).flat_map(|l| (0..4).map(move |h| HeadId::new(l, h))),
        );
        let masked = filler_val_loss(&c.model, &cfg, Some(&all)).unwrap();
        assert!(masked.is_finite());
        assert_ne!(base, masked);
    }
}
