//! Per-head spectral signal: participation ratio of activation matrices,
//! PR trajectories over checkpoints, the log-token time integral used for
//! ranking, competing trajectory features, and elbow detection on the
//! ranked integral curve.
//!
//! The participation ratio of a matrix is `exp(H(p))` where `p` is the
//! normalized squared singular-value spectrum: the effective number of
//! active directions. A head whose output is one direction across the batch
//! has PR ~ 1 (content-independent); a head whose output varies with content
//! has high PR. The integral `sum max(PR-1, 0) * dlog(tokens)` rewards
//! sustained content-dependent computation rather than transient spikes.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::capture::{CaptureCache, QueryPolicy};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, HeadId};
use crate::taskgen::EvalBatch;

/// Relative noise floor: singular values below `1e-12 * sigma_max` are
/// dropped before normalization.
const SV_NOISE_FLOOR: f64 = 1e-12;

/// Participation ratio of an activation matrix.
///
/// Computed in f64 from the f32 matrix. The all-zero matrix returns 1 (one
/// degenerate direction), which keeps `max(PR-1, 0)` at zero for dead heads.
pub fn participation_ratio(m: &ArrayView2<'_, f32>) -> Result<f64> {
    if let Some(bad) = m.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite entry {bad} in activation matrix"
        )));
    }
    let (n, d) = m.dim();
    let mat = DMatrix::<f64>::from_fn(n, d, |i, j| m[[i, j]] as f64);
    let sv = mat.singular_values();
    pr_from_squared_spectrum(sv.iter().map(|&s| s * s))
}

/// PR from squared singular values (or Gram eigenvalues).
pub(crate) fn pr_from_squared_spectrum(sq: impl Iterator<Item = f64>) -> Result<f64> {
    let mut vals: Vec<f64> = sq.collect();
    let max = vals.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Ok(1.0);
    }
    let floor = SV_NOISE_FLOOR * SV_NOISE_FLOOR * max;
    vals.retain(|&v| v > floor);
    let total: f64 = vals.iter().sum();
    let mut entropy = 0.0f64;
    for v in vals {
        let p = v / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// One PR sample along training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub pr: f64,
}

/// Per-checkpoint PR series for one head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrTrajectory {
    pub head: HeadId,
    pub points: Vec<PrPoint>,
}

impl PrTrajectory {
    pub fn validate(&self) -> Result<()> {
        if !self.points.windows(2).all(|w| w[0].tokens_seen < w[1].tokens_seen) {
            return Err(Error::Invariant(format!(
                "trajectory {}: tokens_seen not strictly increasing",
                self.head
            )));
        }
        if let Some(p) = self.points.iter().find(|p| !p.pr.is_finite()) {
            return Err(Error::Numerical(format!(
                "trajectory {}: non-finite PR at step {}",
                self.head, p.step
            )));
        }
        Ok(())
    }
}

/// PR trajectory of one head over a checkpoint series.
pub fn pr_trajectory(
    cache: &mut CaptureCache,
    checkpoints: &[Checkpoint],
    batch: &EvalBatch,
    head: HeadId,
) -> Result<PrTrajectory> {
    let all = pr_trajectories(cache, checkpoints, batch)?;
    all.into_iter()
        .find(|t| t.head == head)
        .ok_or_else(|| Error::invalid(format!("head {head} not in model")))
}

/// PR trajectories for every head, one capture pass per checkpoint.
pub fn pr_trajectories(
    cache: &mut CaptureCache,
    checkpoints: &[Checkpoint],
    batch: &EvalBatch,
) -> Result<Vec<PrTrajectory>> {
    if checkpoints.len() < 2 {
        return Err(Error::invalid("need at least 2 checkpoints for a trajectory"));
    }
    if !checkpoints.windows(2).all(|w| w[0].tokens_seen < w[1].tokens_seen) {
        return Err(Error::invalid("checkpoint tokens_seen must strictly increase"));
    }
    let config = checkpoints[0].model.config.clone();
    let total = config.total_heads();
    let mut trajectories: Vec<PrTrajectory> = (0..total)
        .map(|hf| PrTrajectory {
            head: HeadId::from_flat(hf, config.n_heads),
            points: Vec::with_capacity(checkpoints.len()),
        })
        .collect();
    for ckpt in checkpoints {
        if ckpt.model.config != config {
            return Err(Error::invalid("checkpoint series mixes model configs"));
        }
        let set = cache.capture(ckpt, batch, QueryPolicy::BatchDefined)?;
        for (hf, traj) in trajectories.iter_mut().enumerate() {
            let m = set.head_outputs.slice(ndarray::s![hf, .., ..]);
            let pr = participation_ratio(&m).map_err(|e| {
                Error::Numerical(format!("step {} head {}: {e}", ckpt.step, traj.head))
            })?;
            traj.points.push(PrPoint {
                step: ckpt.step,
                tokens_seen: ckpt.tokens_seen,
                pr,
            });
        }
    }
    for t in &trajectories {
        t.validate()?;
    }
    Ok(trajectories)
}

/// Time integral `sum over checkpoint intervals of max(PR-1, 0) * dlog(tokens)`.
///
/// The sum runs over consecutive intervals using the PR at each interval's
/// right endpoint; intervals starting at `tokens_seen == 0` (the step-0
/// checkpoint) carry no weight.
pub fn pr_integral(traj: &PrTrajectory) -> Result<f64> {
    traj.validate()?;
    let positive = traj.points.iter().filter(|p| p.tokens_seen > 0).count();
    if positive < 2 {
        return Err(Error::invalid(
            "pr_integral needs at least 2 points with positive tokens_seen",
        ));
    }
    let mut sum = 0.0f64;
    for w in traj.points.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        if prev.tokens_seen == 0 {
            continue;
        }
        let dlog = (cur.tokens_seen as f64).ln() - (prev.tokens_seen as f64).ln();
        sum += (cur.pr - 1.0).max(0.0) * dlog;
    }
    Ok(sum)
}

/// The five trajectory features compared for head ranking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFeatures {
    pub integral: f64,
    pub spread: f64,
    pub max_pr: f64,
    pub mean_post_grok: f64,
    pub max_rate: f64,
}

/// Compute all trajectory features. `grok_step` anchors `mean_post_grok`
/// (points at or after it); without one, the whole-trajectory mean is used.
pub fn trajectory_features(
    traj: &PrTrajectory,
    grok_step: Option<u64>,
) -> Result<TrajectoryFeatures> {
    traj.validate()?;
    if traj.points.len() < 2 {
        return Err(Error::invalid(
            "trajectory features need at least 2 points (max_rate undefined)",
        ));
    }
    let integral = pr_integral(traj)?;
    let max_pr = traj.points.iter().map(|p| p.pr).fold(f64::NEG_INFINITY, f64::max);
    let min_pr = traj.points.iter().map(|p| p.pr).fold(f64::INFINITY, f64::min);
    let spread = max_pr - min_pr;

    let mean_of = |points: &[&PrPoint]| -> f64 {
        points.iter().map(|p| p.pr).sum::<f64>() / points.len() as f64
    };
    let all: Vec<&PrPoint> = traj.points.iter().collect();
    let mean_post_grok = match grok_step {
        Some(g) => {
            let post: Vec<&PrPoint> = traj.points.iter().filter(|p| p.step >= g).collect();
            if post.is_empty() {
                mean_of(&all)
            } else {
                mean_of(&post)
            }
        }
        None => mean_of(&all),
    };

    let mut max_rate = f64::NEG_INFINITY;
    for w in traj.points.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        if prev.tokens_seen == 0 {
            continue;
        }
        let dlog = (cur.tokens_seen as f64).ln() - (prev.tokens_seen as f64).ln();
        max_rate = max_rate.max((cur.pr - prev.pr) / dlog);
    }
    if !max_rate.is_finite() {
        return Err(Error::invalid(
            "max_rate undefined: no interval with positive tokens_seen",
        ));
    }

    Ok(TrajectoryFeatures {
        integral,
        spread,
        max_pr,
        mean_post_grok,
        max_rate,
    })
}

/// Which feature ranks the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKey {
    Integral,
    Spread,
    MaxPr,
    MeanPostGrok,
    MaxRate,
}

impl FeatureKey {
    pub fn value(&self, f: &TrajectoryFeatures) -> f64 {
        match self {
            FeatureKey::Integral => f.integral,
            FeatureKey::Spread => f.spread,
            FeatureKey::MaxPr => f.max_pr,
            FeatureKey::MeanPostGrok => f.mean_post_grok,
            FeatureKey::MaxRate => f.max_rate,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureKey::Integral => "integral",
            FeatureKey::Spread => "spread",
            FeatureKey::MaxPr => "max_pr",
            FeatureKey::MeanPostGrok => "mean_post_grok",
            FeatureKey::MaxRate => "max_rate",
        }
    }
}

impl FromStr for FeatureKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integral" => Ok(FeatureKey::Integral),
            "spread" => Ok(FeatureKey::Spread),
            "max_pr" => Ok(FeatureKey::MaxPr),
            "mean_post_grok" => Ok(FeatureKey::MeanPostGrok),
            "max_rate" => Ok(FeatureKey::MaxRate),
            other => Err(Error::invalid(format!("unknown feature key {other:?}"))),
        }
    }
}

/// Descending order by the chosen feature; ties break by (layer, head)
/// ascending, making the ranking a deterministic total order.
pub fn rank_heads(
    features: &BTreeMap<HeadId, TrajectoryFeatures>,
    key: FeatureKey,
) -> Vec<HeadId> {
    let mut heads: Vec<(HeadId, f64)> = features
        .iter()
        .map(|(h, f)| (*h, key.value(f)))
        .collect();
    heads.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    heads.into_iter().map(|(h, _)| h).collect()
}

/// Below this normalized curvature the elbow is flagged weak.
pub const WEAK_ELBOW_CURVATURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    /// Cutoff count: heads strictly before the elbow point of the sorted curve.
    pub k: usize,
    /// Maximum second difference of the min-max-normalized sorted curve.
    pub curvature: f64,
    pub weak: bool,
}

/// Knee of the sorted-descending value curve: the index with maximum second
/// difference after min-max normalization of both axes.
pub fn elbow(values: &[f64]) -> Result<ElbowResult> {
    if values.len() < 4 {
        return Err(Error::invalid("elbow needs at least 4 values"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite value {v} in elbow input")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let (lo, hi) = (sorted[n - 1], sorted[0]);
    if hi == lo {
        return Ok(ElbowResult {
            k: 1,
            curvature: 0.0,
            weak: true,
        });
    }
    let y: Vec<f64> = sorted.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let mut best = (1usize, f64::NEG_INFINITY);
    for i in 1..n - 1 {
        let d2 = y[i + 1] - 2.0 * y[i] + y[i - 1];
        if d2 > best.1 {
            best = (i, d2);
        }
    }
    Ok(ElbowResult {
        k: best.0,
        curvature: best.1,
        weak: best.1 < WEAK_ELBOW_CURVATURE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::Rng;

    fn traj(points: &[(u64, u64, f64)]) -> PrTrajectory {
        PrTrajectory {
            head: HeadId::new(0, 0),
            points: points
                .iter()
                .map(|&(step, tokens_seen, pr)| PrPoint {
                    step,
                    tokens_seen,
                    pr,
                })
                .collect(),
        }
    }

    #[test]
    fn k_equal_singular_values_give_pr_k() {
        // diag(1,1,1,1) padded with zero rows: singular values (1,1,1,1)
        let mut m = Array2::<f32>::zeros((6, 4));
        for i in 0..4 {
            m[[i, i]] = 1.0;
        }
        let pr = participation_ratio(&m.view()).unwrap();
        assert!((pr - 4.0).abs() < 1e-12, "pr = {pr}");
    }

    #[test]
    fn rank_one_matrix_gives_pr_one() {
        let u = [1.0f32, -2.0, 0.5, 3.0];
        let v = [0.3f32, 1.7, -0.9];
        let m = Array2::from_shape_fn((4, 3), |(i, j)| u[i] * v[j]);
        let pr = participation_ratio(&m.view()).unwrap();
        assert!((pr - 1.0).abs() < 1e-9, "pr = {pr}");
    }

    #[test]
    fn zero_matrix_is_one_by_convention() {
        let m = Array2::<f32>::zeros((10, 5));
        assert_eq!(participation_ratio(&m.view()).unwrap(), 1.0);
    }

    #[test]
    fn two_by_two_analytic_oracle() {
        // Gram eigenvalues of [[a, 0], [0, b]] are a^2, b^2
        let m = arr2(&[[3.0f32, 0.0], [0.0, 1.0]]);
        let pr = participation_ratio(&m.view()).unwrap();
        let p1: f64 = 9.0 / 10.0;
        let p2: f64 = 1.0 / 10.0;
        let expect = (-(p1 * p1.ln() + p2 * p2.ln())).exp();
        assert!((pr - expect).abs() < 1e-12, "pr {pr} vs {expect}");
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = Array2::<f32>::zeros((3, 3));
        m[[1, 1]] = f32::NAN;
        assert!(participation_ratio(&m.view()).is_err());
    }

    #[test]
    fn pr_scale_invariance() {
        let mut r = crate::rng::rng(5, 1);
        let m = Array2::from_shape_fn((30, 8), |_| r.gen_range(-1.0f32..1.0));
        let base = participation_ratio(&m.view()).unwrap();
        // power-of-two scale: exact in f32, so the spectrum shape is untouched
        let scaled = m.mapv(|v| v * -8.0);
        let got = participation_ratio(&scaled.view()).unwrap();
        assert!((base - got).abs() < 1e-9, "{base} vs {got}");
        // generic scales round each entry; agreement is f32-limited
        let rough = m.mapv(|v| v * 7.3);
        let got = participation_ratio(&rough.view()).unwrap();
        assert!((base - got).abs() < 1e-4, "{base} vs {got}");
    }

    #[test]
    fn integral_hand_computed() {
        // two points, PR 3 at 1e3 and 1e6 tokens: 2 * ln(1e3)
        let t = traj(&[(1, 1_000, 3.0), (2, 1_000_000, 3.0)]);
        let expect = 2.0 * (1_000_000f64.ln() - 1_000f64.ln());
        assert!((pr_integral(&t).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn integral_clips_below_one_and_skips_step_zero() {
        let t = traj(&[(0, 0, 40.0), (1, 100, 0.5), (2, 1000, 0.9)]);
        assert_eq!(pr_integral(&t).unwrap(), 0.0);
        let flat = traj(&[(1, 10, 1.0), (2, 100, 1.0), (3, 1000, 1.0)]);
        assert_eq!(pr_integral(&flat).unwrap(), 0.0);
    }

    #[test]
    fn integral_needs_two_positive_points() {
        let t = traj(&[(0, 0, 3.0), (1, 100, 3.0)]);
        assert!(pr_integral(&t).is_err());
        let bad = traj(&[(0, 50, 2.0), (1, 50, 3.0)]);
        assert!(pr_integral(&bad).is_err(), "non-increasing tokens accepted");
    }

    #[test]
    fn features_constant_trajectory() {
        let t = traj(&[(1, 100, 5.0), (2, 1000, 5.0), (3, 10000, 5.0)]);
        let f = trajectory_features(&t, None).unwrap();
        assert_eq!(f.spread, 0.0);
        assert_eq!(f.max_pr, 5.0);
        assert!(f.integral > 0.0);
        assert_eq!(f.max_rate, 0.0);
        assert_eq!(f.mean_post_grok, 5.0);
    }

    #[test]
    fn features_single_point_errors() {
        let t = traj(&[(1, 100, 5.0)]);
        assert!(trajectory_features(&t, None).is_err());
    }

    #[test]
    fn monotone_rising_has_positive_max_rate() {
        let t = traj(&[(1, 100, 1.0), (2, 1000, 4.0), (3, 10000, 9.0)]);
        let f = trajectory_features(&t, None).unwrap();
        assert!(f.max_rate > 0.0);
    }

    #[test]
    fn mean_post_grok_uses_grok_step() {
        let t = traj(&[(1, 100, 1.0), (2, 1000, 2.0), (3, 10000, 8.0), (4, 100000, 10.0)]);
        let f = trajectory_features(&t, Some(3)).unwrap();
        assert_eq!(f.mean_post_grok, 9.0);
    }

    #[test]
    fn ranking_order_and_ties() {
        let mut features = BTreeMap::new();
        let f = |integral: f64| TrajectoryFeatures {
            integral,
            spread: 0.0,
            max_pr: 0.0,
            mean_post_grok: 0.0,
            max_rate: 0.0,
        };
        features.insert(HeadId::new(1, 0), f(3.0));
        features.insert(HeadId::new(0, 2), f(5.0));
        features.insert(HeadId::new(0, 1), f(3.0));
        let order = rank_heads(&features, FeatureKey::Integral);
        assert_eq!(
            order,
            vec![HeadId::new(0, 2), HeadId::new(0, 1), HeadId::new(1, 0)]
        );
    }

    #[test]
    fn collapsing_head_fixture_spread_vs_integral() {
        // starts at PR 60 and collapses vs a flat PR 3 head: spread prefers
        // the collapser, integral prefers sustained elevation
        let collapse = traj(&[(0, 0, 60.0), (1, 1_000, 60.0), (2, 10_000, 2.0), (3, 100_000, 2.0)]);
        let flat = traj(&[(0, 0, 3.0), (1, 1_000, 3.0), (2, 10_000, 3.0), (3, 100_000, 3.0)]);
        let fc = trajectory_features(&collapse, None).unwrap();
        let ff = trajectory_features(&flat, None).unwrap();
        assert!(fc.spread > ff.spread);
        assert!(ff.integral > fc.integral);
    }

    #[test]
    fn elbow_hand_oracle() {
        let r = elbow(&[100.0, 99.0, 98.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.k, 3);
        assert!(!r.weak);
    }

    #[test]
    fn elbow_linear_ramp_is_weak() {
        let vals: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        let r = elbow(&vals).unwrap();
        assert!(r.weak, "linear ramp produced curvature {}", r.curvature);
        assert!(r.k >= 1 && r.k <= 10);
    }

    #[test]
    fn elbow_needs_four_values() {
        assert!(elbow(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn feature_key_parse() {
        assert_eq!(FeatureKey::from_str("integral").unwrap(), FeatureKey::Integral);
        assert!(FeatureKey::from_str("bogus").is_err());
    }
}
