//! Task-pattern screen: canonical pattern classes, attention selectivity
//! against a uniform-other baseline, head classification, all-head
//! capability screens, null calibration, multi-position consistency, and
//! precision-at-k.
//!
//! Selectivity of a head for a class on one example is the mean attention
//! mass on the class's target positions divided by `1/(T_eff - k)`, where
//! `T_eff = query_position + 1` is the number of attendable positions under
//! the causal mask and `k` the target count. Batch selectivity is the
//! arithmetic mean over examples where the class applies; inapplicable
//! examples are excluded and counted.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayView1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capture::{CaptureCache, CaptureSet, QueryPolicy};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, HeadId};
use crate::rng::{rng_indexed, stream};
use crate::taskgen::EvalBatch;

/// Class-assignment threshold (best-class mode).
pub const ASSIGN_THRESHOLD: f64 = 30.0;
/// Circuit-membership threshold for the induction screen.
pub const INDUCTION_THRESHOLD: f64 = 50.0;
/// Circuit-membership threshold for the previous-token screen.
pub const PREV_TOKEN_THRESHOLD: f64 = 100.0;
/// Recall-prioritized pre-filter threshold.
pub const PREFILTER_THRESHOLD: f64 = 2.0;

/// Canonical attention-pattern classes. Declaration order is the documented
/// tie-break order for classification.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum PatternClass {
    Induction,
    PrevToken,
    DuplicateToken,
    FirstToken,
    SelfAttn,
    Local,
    KeyRetrieval,
}

impl PatternClass {
    /// The six classes computed in every evaluation.
    pub const STANDARD_SIX: [PatternClass; 6] = [
        PatternClass::Induction,
        PatternClass::PrevToken,
        PatternClass::DuplicateToken,
        PatternClass::FirstToken,
        PatternClass::SelfAttn,
        PatternClass::Local,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PatternClass::Induction => "induction",
            PatternClass::PrevToken => "prev_token",
            PatternClass::DuplicateToken => "duplicate_token",
            PatternClass::FirstToken => "first_token",
            PatternClass::SelfAttn => "self",
            PatternClass::Local => "local",
            PatternClass::KeyRetrieval => "key_retrieval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "induction" => Ok(PatternClass::Induction),
            "prev_token" => Ok(PatternClass::PrevToken),
            "duplicate_token" => Ok(PatternClass::DuplicateToken),
            "first_token" => Ok(PatternClass::FirstToken),
            "self" => Ok(PatternClass::SelfAttn),
            "local" => Ok(PatternClass::Local),
            "key_retrieval" => Ok(PatternClass::KeyRetrieval),
            other => Err(Error::invalid(format!("unknown pattern class {other:?}"))),
        }
    }
}

/// Target positions of `class` for one example, or `None` when the class
/// does not apply (no earlier occurrence, query too early, missing role).
/// Targets never exceed the query position.
pub fn target_positions(
    class: PatternClass,
    tokens: &ArrayView1<'_, u32>,
    special: &BTreeMap<String, Vec<usize>>,
    q: usize,
) -> Option<Vec<usize>> {
    let targets = match class {
        PatternClass::Induction => {
            let tok = tokens[q];
            let hits: Vec<usize> = (0..q)
                .filter(|&j| tokens[j] == tok)
                .map(|j| j + 1)
                .filter(|&p| p <= q)
                .collect();
            hits
        }
        PatternClass::PrevToken => {
            if q >= 1 {
                vec![q - 1]
            } else {
                vec![]
            }
        }
        PatternClass::DuplicateToken => {
            let tok = tokens[q];
            (0..q).filter(|&j| tokens[j] == tok).collect()
        }
        PatternClass::FirstToken => {
            if q >= 1 {
                vec![0]
            } else {
                vec![]
            }
        }
        PatternClass::SelfAttn => vec![q],
        PatternClass::Local => {
            // positions q-2 through q-5, clipped at the sequence start
            (2..=5usize)
                .filter_map(|back| q.checked_sub(back))
                .collect()
        }
        PatternClass::KeyRetrieval => special
            .get("key_position")
            .map(|ps| ps.iter().cloned().filter(|&p| p <= q).collect())
            .unwrap_or_default(),
    };
    if targets.is_empty() {
        None
    } else {
        Some(targets)
    }
}

/// Selectivity of one attention row for a target set: mean target mass over
/// the uniform-other baseline `1/(T_eff - k)`.
pub fn selectivity(row: &ArrayView1<'_, f32>, targets: &[usize], t_eff: usize) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("selectivity needs a nonempty target set"));
    }
    let k = targets.len();
    if t_eff <= k {
        return Err(Error::invalid(format!(
            "T_eff {t_eff} must exceed target count {k}"
        )));
    }
    let mut mass = 0.0f64;
    for &p in targets {
        if p >= row.len() {
            return Err(Error::invalid(format!("target {p} outside row")));
        }
        mass += row[p] as f64;
    }
    mass /= k as f64;
    Ok(mass * (t_eff - k) as f64)
}

/// Batch-level selectivity of one head for one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectivityRecord {
    pub head: HeadId,
    pub class: PatternClass,
    /// Mean over valid examples of per-example selectivity.
    pub sel: f64,
    /// Mean over valid examples of mean target attention mass.
    pub attn_mass: f64,
    /// Mean attendable context length (`query_position + 1`).
    pub t_mean: f64,
    /// Mean target count.
    pub k_mean: f64,
    pub n_valid: usize,
    pub n_excluded: usize,
}

/// Per-example targets for one class over a batch, computed once and shared
/// by every head's screen.
fn class_targets(
    batch: &EvalBatch,
    class: PatternClass,
    positions: &[usize],
) -> Vec<Option<Vec<usize>>> {
    (0..batch.n_examples())
        .map(|e| {
            let row = batch.tokens.row(e);
            let q = positions[e];
            target_positions(class, &row, &batch.special_positions[e], q).and_then(|ts| {
                // the uniform-other baseline needs T_eff > k
                if positions[e] + 1 > ts.len() {
                    Some(ts)
                } else {
                    None
                }
            })
        })
        .collect()
}

fn record_for_head(
    head: HeadId,
    class: PatternClass,
    rows: &ndarray::ArrayView2<'_, f32>,
    positions: &[usize],
    targets: &[Option<Vec<usize>>],
) -> SelectivityRecord {
    let mut sel_sum = 0.0f64;
    let mut mass_sum = 0.0f64;
    let mut t_sum = 0.0f64;
    let mut k_sum = 0.0f64;
    let mut n_valid = 0usize;
    let mut n_excluded = 0usize;
    for (e, target) in targets.iter().enumerate() {
        let Some(ts) = target else {
            n_excluded += 1;
            continue;
        };
        let t_eff = positions[e] + 1;
        let row = rows.row(e);
        let s = selectivity(&row, ts, t_eff).expect("targets pre-validated");
        let mass: f64 =
            ts.iter().map(|&p| row[p] as f64).sum::<f64>() / ts.len() as f64;
        sel_sum += s;
        mass_sum += mass;
        t_sum += t_eff as f64;
        k_sum += ts.len() as f64;
        n_valid += 1;
    }
    let denom = n_valid.max(1) as f64;
    SelectivityRecord {
        head,
        class,
        sel: sel_sum / denom,
        attn_mass: mass_sum / denom,
        t_mean: t_sum / denom,
        k_mean: k_sum / denom,
        n_valid,
        n_excluded,
    }
}

/// Selectivity records for every head and every requested class.
pub fn screen_heads(
    set: &CaptureSet,
    batch: &EvalBatch,
    classes: &[PatternClass],
) -> Result<Vec<SelectivityRecord>> {
    let n = batch.n_examples();
    if set.positions.len() != n {
        return Err(Error::invalid("capture set does not match batch size"));
    }
    let total_heads = set.head_outputs.dim().0;
    let per_class: Vec<(PatternClass, Vec<Option<Vec<usize>>>)> = classes
        .iter()
        .map(|&c| (c, class_targets(batch, c, &set.positions)))
        .collect();
    let mut records = Vec::with_capacity(total_heads * classes.len());
    for hf in 0..total_heads {
        let head = HeadId::from_flat(hf, set.n_heads);
        let rows = set.attention.slice(ndarray::s![hf, .., ..]);
        for (class, targets) in &per_class {
            records.push(record_for_head(head, *class, &rows, &set.positions, targets));
        }
    }
    Ok(records)
}

/// Best-class assignment for one head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadClassification {
    pub head: HeadId,
    /// `None` when the best selectivity is below the assignment threshold.
    pub class: Option<PatternClass>,
    pub best_class: PatternClass,
    pub best_sel: f64,
    pub tie: bool,
    pub sels: BTreeMap<PatternClass, f64>,
}

/// Classify each head into its maximum-selectivity standard class, provided
/// the maximum reaches `assign_threshold`. Ties resolve to the class earlier
/// in the documented order and are flagged.
pub fn classify_heads(
    records: &[SelectivityRecord],
    assign_threshold: f64,
) -> Result<Vec<HeadClassification>> {
    let mut per_head: BTreeMap<HeadId, BTreeMap<PatternClass, f64>> = BTreeMap::new();
    for r in records {
        if PatternClass::STANDARD_SIX.contains(&r.class) {
            per_head.entry(r.head).or_default().insert(r.class, r.sel);
        }
    }
    let mut out = Vec::with_capacity(per_head.len());
    for (head, sels) in per_head {
        for c in PatternClass::STANDARD_SIX {
            if !sels.contains_key(&c) {
                return Err(Error::invalid(format!(
                    "head {head}: class {} not evaluated; all six standard classes are required",
                    c.name()
                )));
            }
        }
        let mut best = PatternClass::Induction;
        let mut best_sel = f64::NEG_INFINITY;
        let mut tie = false;
        for c in PatternClass::STANDARD_SIX {
            let s = sels[&c];
            if s > best_sel {
                best = c;
                best_sel = s;
                tie = false;
            } else if s == best_sel {
                tie = true;
            }
        }
        out.push(HeadClassification {
            head,
            class: (best_sel >= assign_threshold).then_some(best),
            best_class: best,
            best_sel,
            tie,
            sels,
        });
    }
    Ok(out)
}

/// Whether a circuit extraction found members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CircuitStatus {
    Accepted,
    /// No heads above threshold; not an error.
    Empty,
}

/// Where a circuit came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitProvenance {
    pub checkpoint_step: u64,
    pub batch_hash: String,
    pub mode: String,
    pub n_examples: usize,
}

/// A named head set with the screen, threshold, and provenance that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub name: String,
    pub heads: Vec<HeadId>,
    pub class: PatternClass,
    pub threshold: f64,
    pub status: CircuitStatus,
    pub source: CircuitProvenance,
}

impl CircuitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.threshold <= 0.0 {
            return Err(Error::Invariant("circuit threshold must be positive".into()));
        }
        if self.status == CircuitStatus::Accepted && self.heads.is_empty() {
            return Err(Error::Invariant(
                "accepted circuit must have nonempty head set".into(),
            ));
        }
        let unique: BTreeSet<&HeadId> = self.heads.iter().collect();
        if unique.len() != self.heads.len() {
            return Err(Error::Invariant("circuit head set has duplicates".into()));
        }
        Ok(())
    }

    /// Heads per layer, used by matched-random control sampling.
    pub fn per_layer_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for h in &self.heads {
            *counts.entry(h.layer).or_insert(0) += 1;
        }
        counts
    }
}

/// All-head capability screen: every head with `sel_class >= threshold`,
/// regardless of its best class. An empty result is reported via
/// [`CircuitStatus::Empty`], not an error.
pub fn all_head_screen(
    set: &CaptureSet,
    batch: &EvalBatch,
    class: PatternClass,
    member_threshold: f64,
    name: &str,
) -> Result<CircuitSpec> {
    if member_threshold <= 0.0 {
        return Err(Error::invalid("member threshold must be positive"));
    }
    let records = screen_heads(set, batch, &[class])?;
    let mut heads: Vec<HeadId> = records
        .iter()
        .filter(|r| r.sel >= member_threshold)
        .map(|r| r.head)
        .collect();
    heads.sort();
    let status = if heads.is_empty() {
        CircuitStatus::Empty
    } else {
        CircuitStatus::Accepted
    };
    let spec = CircuitSpec {
        name: name.to_string(),
        heads,
        class,
        threshold: member_threshold,
        status,
        source: CircuitProvenance {
            checkpoint_step: set.step,
            batch_hash: batch.content_hash(),
            mode: "all_head".to_string(),
            n_examples: batch.n_examples(),
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// Null-selectivity distribution summary for one head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullCalibration {
    pub head: HeadId,
    pub class: PatternClass,
    pub draws: usize,
    pub null_p99: f64,
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Selectivity of random non-special target positions, drawn `n_draws`
/// times. Each draw relabels every example's target to a uniformly random
/// attendable position outside its special positions (and the query itself)
/// and recomputes batch selectivity with `k = 1`.
pub fn null_calibration(
    set: &CaptureSet,
    batch: &EvalBatch,
    head: HeadId,
    class: PatternClass,
    n_draws: usize,
    seed: u64,
) -> Result<NullCalibration> {
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be >= 1"));
    }
    let n = batch.n_examples();
    let rows = set.attention.slice(ndarray::s![head.flat(set.n_heads), .., ..]);
    // eligible non-special positions per example
    let mut eligible: Vec<Vec<usize>> = Vec::with_capacity(n);
    for e in 0..n {
        let q = set.positions[e];
        let mut excluded: BTreeSet<usize> = BTreeSet::new();
        excluded.insert(q);
        for ps in batch.special_positions[e].values() {
            excluded.extend(ps.iter().cloned());
        }
        let pool: Vec<usize> = (0..=q.saturating_sub(0))
            .filter(|p| !excluded.contains(p))
            .collect();
        eligible.push(pool);
    }
    if eligible.iter().all(|pool| pool.is_empty()) {
        return Err(Error::invalid("no non-special positions in any example"));
    }
    let mut nulls = Vec::with_capacity(n_draws);
    for d in 0..n_draws {
        let mut r = rng_indexed(seed, stream::NULL_DRAW, d as u64);
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for e in 0..n {
            let pool = &eligible[e];
            if pool.is_empty() {
                continue;
            }
            let q = set.positions[e];
            let t_eff = q + 1;
            if t_eff <= 1 {
                continue;
            }
            let p = pool[r.gen_range(0..pool.len())];
            sum += rows[[e, p]] as f64 * (t_eff - 1) as f64;
            count += 1;
        }
        nulls.push(sum / count.max(1) as f64);
    }
    let mut sorted = nulls.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = |p: f64| -> f64 {
        let idx = ((p * sorted.len() as f64).ceil() as usize).max(1) - 1;
        sorted[idx.min(sorted.len() - 1)]
    };
    Ok(NullCalibration {
        head,
        class,
        draws: n_draws,
        null_p99: rank(0.99),
        median: rank(0.50),
        mean: nulls.iter().sum::<f64>() / nulls.len() as f64,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    })
}

/// Heads whose class selectivity reaches `t_filter`. Containment of the
/// `>= 10x` set is structural (`t_filter <= 10`) and asserted.
pub fn prefilter(sels: &BTreeMap<HeadId, f64>, t_filter: f64) -> Result<Vec<HeadId>> {
    let kept: Vec<HeadId> = sels
        .iter()
        .filter(|(_, &s)| s >= t_filter)
        .map(|(h, _)| *h)
        .collect();
    if t_filter <= 10.0 {
        for (h, &s) in sels {
            if s >= 10.0 && !kept.contains(h) {
                return Err(Error::Invariant(format!(
                    "prefilter dropped head {h} with selectivity {s} >= 10x"
                )));
            }
        }
    }
    Ok(kept)
}

/// Fraction of query positions at which the head keeps its batch-defined
/// class assignment.
pub fn multi_position_consistency(
    cache: &mut CaptureCache,
    ckpt: &Checkpoint,
    batch: &EvalBatch,
    head: HeadId,
    positions: &[usize],
    assign_threshold: f64,
) -> Result<f64> {
    head.validate(&ckpt.model.config)?;
    if positions.is_empty() {
        return Err(Error::invalid("need at least one probe position"));
    }
    let reference = classify_one_head(cache, ckpt, batch, head, QueryPolicy::BatchDefined, assign_threshold)?;
    let mut matches = 0usize;
    for &p in positions {
        if p >= batch.seq_len() {
            return Err(Error::invalid(format!(
                "probe position {p} outside batch sequence length {}",
                batch.seq_len()
            )));
        }
        let got = classify_one_head(cache, ckpt, batch, head, QueryPolicy::Fixed(p), assign_threshold)?;
        if got == reference {
            matches += 1;
        }
    }
    Ok(matches as f64 / positions.len() as f64)
}

fn classify_one_head(
    cache: &mut CaptureCache,
    ckpt: &Checkpoint,
    batch: &EvalBatch,
    head: HeadId,
    policy: QueryPolicy,
    assign_threshold: f64,
) -> Result<Option<PatternClass>> {
    let set = cache.capture(ckpt, batch, policy)?;
    let records = screen_heads(&set, batch, &PatternClass::STANDARD_SIX)?;
    let per_head: Vec<SelectivityRecord> =
        records.into_iter().filter(|r| r.head == head).collect();
    let classified = classify_heads(&per_head, assign_threshold)?;
    Ok(classified
        .first()
        .ok_or_else(|| Error::Invariant("head missing from classification".into()))?
        .class)
}

/// Fraction of the top-k ranked heads assigned to any known class.
pub fn precision_at_k(
    ranking: &[HeadId],
    classes: &BTreeMap<HeadId, Option<PatternClass>>,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if k > ranking.len() {
        return Err(Error::invalid(format!(
            "k {k} exceeds ranking length {}",
            ranking.len()
        )));
    }
    let classified = ranking[..k]
        .iter()
        .filter(|h| matches!(classes.get(h), Some(Some(_))))
        .count();
    Ok(classified as f64 / k as f64)
}
