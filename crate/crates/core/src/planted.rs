//! Hand-constructed models with planted attention patterns.
//!
//! These fixtures validate the screen and ablation machinery against known
//! ground truth: a layer-0 previous-token head built from rotated position
//! codes, and layer-1 induction heads whose attention concentration (and so
//! their selectivity) is solved analytically from a target value. The
//! induction heads copy the attended token's identity code into an answer
//! subspace read by the LM head, so synthetic-induction top-1 is carried
//! exactly by the planted heads and ablation produces controlled
//! retention curves.
//!
//! Construction: token identities are orthonormal zero-sum DCT codes in
//! `dims [0,16)`; position codes are eight incommensurate cosine pairs in
//! `dims [32,48)`; the prev head writes identities into `dims [16,32)`;
//! induction heads write into `dims [48,64)`, which the LM head projects
//! back onto token codes. LayerNorm reduces to a near-constant gain because
//! every subspace has data-independent norm.


use crate::error::{Error, Result};
use crate::model::{HeadId, Model, ModelConfig};

const CODE_DIM: usize = 16;
const S_ID: usize = 0;
const S_PREV: usize = 16;
const S_POS: usize = 32;
const S_ANS: usize = 48;
const N_FREQS: usize = 8;

/// Largest token id representable by the orthonormal zero-sum code book.
pub const PLANTED_VOCAB: usize = 15;

/// What a planted head does.
#[derive(Debug, Clone, Copy)]
pub enum PlantedPattern {
    /// Layer-0 head attending to position q-1 and writing the attended
    /// token's identity into the prev subspace.
    PrevToken {
        /// Peak attention score; ~24 gives near-delta attention.
        peak_score: f64,
    },
    /// Layer-1 head attending to the position after the earlier occurrence
    /// of the query token.
    Induction {
        /// Desired induction selectivity at the fixture's `t_eff`.
        target_sel: f64,
        /// Relative weight of this head's copy contribution to the logits.
        copy_gain: f64,
    },
}

#[derive(Debug, Clone)]
pub struct PlantedHead {
    pub head: HeadId,
    pub pattern: PlantedPattern,
}

#[derive(Debug, Clone)]
pub struct PlantedModelSpec {
    /// Must be a multiple of 64; d_head is fixed at 16.
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Attendable context the selectivity targets are calibrated for.
    pub t_eff: usize,
    pub heads: Vec<PlantedHead>,
}

impl Default for PlantedModelSpec {
    fn default() -> Self {
        PlantedModelSpec {
            d_model: 128,
            vocab_size: PLANTED_VOCAB,
            max_seq_len: 256,
            t_eff: 256,
            heads: vec![
                PlantedHead {
                    head: HeadId::new(0, 0),
                    pattern: PlantedPattern::PrevToken { peak_score: 24.0 },
                },
                PlantedHead {
                    head: HeadId::new(1, 0),
                    pattern: PlantedPattern::Induction {
                        target_sel: 150.0,
                        copy_gain: 1.0,
                    },
                },
            ],
        }
    }
}

fn token_code(token: usize, j: usize) -> f32 {
    // DCT-II rows 1.. are orthonormal and orthogonal to the constant vector
    let k = token + 1;
    ((2.0 / CODE_DIM as f64).sqrt()
        * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / CODE_DIM as f64).cos()) as f32
}

fn freq(m: usize) -> f64 {
    std::f64::consts::PI / 1.9f64.powi(m as i32)
}

/// Attention mass on a single target that yields `sel` at context `t_eff`.
fn mass_for_selectivity(sel: f64, t_eff: usize) -> Result<f64> {
    let max = (t_eff - 1) as f64;
    if sel <= 0.0 || sel >= max {
        return Err(Error::invalid(format!(
            "target selectivity {sel} outside (0, {max}) for t_eff {t_eff}"
        )));
    }
    Ok(sel / max)
}

/// Build a model whose listed heads implement their planted patterns.
pub fn planted_model(spec: &PlantedModelSpec) -> Result<Model> {
    if spec.d_model % 64 != 0 || spec.d_model < 64 {
        return Err(Error::invalid("planted model needs d_model in {64, 128, ...}"));
    }
    if spec.vocab_size > PLANTED_VOCAB {
        return Err(Error::invalid(format!(
            "planted code book holds at most {PLANTED_VOCAB} tokens"
        )));
    }
    let config = ModelConfig {
        n_layers: 2,
        d_model: spec.d_model,
        n_heads: spec.d_model / CODE_DIM,
        d_head: CODE_DIM,
        ffn_dim: 8,
        vocab_size: spec.vocab_size,
        max_seq_len: spec.max_seq_len,
        seed: 0,
        tied_embeddings: false,
    };
    let mut model = Model::zeroed(config.clone())?;
    let d = config.d_model;

    // LayerNorm gains: unit gamma, zero beta everywhere
    for l in 0..2 {
        model.params.tensor_mut(&format!("layer{l}.ln1.gamma"))?.fill(1.0);
        model.params.tensor_mut(&format!("layer{l}.ln2.gamma"))?.fill(1.0);
    }
    model.params.tensor_mut("final_ln.gamma")?.fill(1.0);

    // token identity codes in S_ID
    {
        let mut tok = model.params.view2_mut("tok_embed")?;
        for t in 0..spec.vocab_size {
            for j in 0..CODE_DIM {
                tok[[t, S_ID + j]] = token_code(t, j);
            }
        }
    }
    // cosine position codes in S_POS, unit norm per position
    let kappa = (1.0 / N_FREQS as f64).sqrt();
    {
        let mut pos = model.params.view2_mut("pos_embed")?;
        for i in 0..spec.max_seq_len {
            for m in 0..N_FREQS {
                let a = freq(m) * i as f64;
                pos[[i, S_POS + 2 * m]] = (kappa * a.cos()) as f32;
                pos[[i, S_POS + 2 * m + 1]] = (kappa * a.sin()) as f32;
            }
        }
    }

    // design norms: ||x0||^2 = |id|^2 + |pos|^2 = 2; the prev head writes a
    // unit-norm identity so layer-1 inputs have ||x||^2 ~ 3
    let c0 = (d as f64 / 2.0).sqrt();
    let c1 = (d as f64 / 3.0).sqrt();
    // the forward pass divides scores by sqrt(d_head)
    let attn_scale = (CODE_DIM as f64).sqrt();
    let prev_write_gain = 1.0 / c0;
    let mut prev_mass_estimate = 1.0f64;

    for planted in &spec.heads {
        let h = planted.head;
        h.validate(&config)?;
        let lo = h.head * CODE_DIM;
        match planted.pattern {
            PlantedPattern::PrevToken { peak_score } => {
                if h.layer != 0 {
                    return Err(Error::invalid("prev-token head must sit in layer 0"));
                }
                let beta = peak_score * attn_scale / (c0 * c0);
                {
                    let mut w_q = model.params.view2_mut("layer0.attn.w_q")?;
                    // rotation by one position per frequency pair
                    for m in 0..N_FREQS {
                        let (sin, cos) = freq(m).sin_cos();
                        let r = S_POS + 2 * m;
                        w_q[[r, lo + 2 * m]] = (beta * cos) as f32;
                        w_q[[r, lo + 2 * m + 1]] = (-beta * sin) as f32;
                        w_q[[r + 1, lo + 2 * m]] = (beta * sin) as f32;
                        w_q[[r + 1, lo + 2 * m + 1]] = (beta * cos) as f32;
                    }
                }
                {
                    let mut w_k = model.params.view2_mut("layer0.attn.w_k")?;
                    for m in 0..2 * N_FREQS {
                        w_k[[S_POS + m, lo + m]] = 1.0;
                    }
                }
                {
                    let mut w_v = model.params.view2_mut("layer0.attn.w_v")?;
                    for j in 0..CODE_DIM {
                        w_v[[S_ID + j, lo + j]] = 1.0;
                    }
                }
                {
                    let mut w_o = model.params.view2_mut("layer0.attn.w_o")?;
                    for j in 0..CODE_DIM {
                        w_o[[lo + j, S_PREV + j]] = prev_write_gain as f32;
                    }
                }
                // near-delta attention: margin >> ln(T)
                prev_mass_estimate = 1.0 / (1.0 + spec.t_eff as f64 * (-0.5 * peak_score).exp());
            }
            PlantedPattern::Induction { target_sel, copy_gain } => {
                if h.layer != 1 {
                    return Err(Error::invalid("induction head must sit in layer 1"));
                }
                let mass = mass_for_selectivity(target_sel, spec.t_eff)?;
                // softmax over one peak and (t_eff - 1) zero scores
                let alpha = (mass / (1.0 - mass) * (spec.t_eff - 1) as f64).ln();
                let a_scale = alpha * attn_scale / (c1 * c1 * prev_mass_estimate);
                {
                    let mut w_q = model.params.view2_mut("layer1.attn.w_q")?;
                    for j in 0..CODE_DIM {
                        w_q[[S_ID + j, lo + j]] = a_scale as f32;
                    }
                }
                {
                    let mut w_k = model.params.view2_mut("layer1.attn.w_k")?;
                    for j in 0..CODE_DIM {
                        w_k[[S_PREV + j, lo + j]] = 1.0;
                    }
                }
                {
                    let mut w_v = model.params.view2_mut("layer1.attn.w_v")?;
                    for j in 0..CODE_DIM {
                        w_v[[S_ID + j, lo + j]] = 1.0;
                    }
                }
                {
                    let mut w_o = model.params.view2_mut("layer1.attn.w_o")?;
                    let gain = copy_gain / c1;
                    for j in 0..CODE_DIM {
                        w_o[[lo + j, S_ANS + j]] = gain as f32;
                    }
                }
            }
        }
    }

    // LM head reads the answer subspace back through the code book
    {
        let mut lm = model.params.view2_mut("lm_head")?;
        for t in 0..spec.vocab_size {
            for j in 0..CODE_DIM {
                lm[[S_ANS + j, t]] = token_code(t, j);
            }
        }
    }

    Ok(model)
}

/// The three ablation-floor fixture profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectivityProfile {
    /// Two very sharp specialists; the floor is reached at the highest
    /// threshold and the curve stays flat below it.
    Sharp,
    /// Four mid-selectivity heads; the floor is reached once the threshold
    /// drops to 30x and stays flat below.
    Plateau,
    /// Many heads across the selectivity range; retention keeps falling
    /// until the lowest thresholds.
    Distributed,
}

impl SelectivityProfile {
    pub fn name(&self) -> &'static str {
        match self {
            SelectivityProfile::Sharp => "sharp",
            SelectivityProfile::Plateau => "plateau",
            SelectivityProfile::Distributed => "distributed",
        }
    }

    /// Planted induction selectivities for this profile.
    pub fn selectivities(&self) -> Vec<f64> {
        match self {
            SelectivityProfile::Sharp => vec![170.0, 150.0],
            SelectivityProfile::Plateau => vec![65.0, 60.0, 42.0, 40.0],
            SelectivityProfile::Distributed => vec![130.0, 60.0, 35.0, 15.0, 6.0, 5.0],
        }
    }
}

/// Fixture model with a planted prev-token head plus induction heads at the
/// profile's selectivity levels.
pub fn profile_model(profile: SelectivityProfile) -> Result<Model> {
    let mut heads = vec![PlantedHead {
        head: HeadId::new(0, 0),
        pattern: PlantedPattern::PrevToken { peak_score: 24.0 },
    }];
    for (i, sel) in profile.selectivities().into_iter().enumerate() {
        heads.push(PlantedHead {
            head: HeadId::new(1, i),
            pattern: PlantedPattern::Induction {
                target_sel: sel,
                copy_gain: 1.0,
            },
        });
    }
    planted_model(&PlantedModelSpec {
        heads,
        ..PlantedModelSpec::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{CaptureCache, QueryPolicy};
    use crate::model::Checkpoint;
    use crate::screen::{classify_heads, screen_heads, PatternClass, ASSIGN_THRESHOLD};
    use crate::taskgen::gen_induction_batch;

    fn fixture_batch(seed: u64) -> crate::taskgen::EvalBatch {
        gen_induction_batch(96, 256, 2, PLANTED_VOCAB as u32, seed).unwrap()
    }

    #[test]
    fn token_codes_are_orthonormal_and_zero_sum() {
        for a in 0..PLANTED_VOCAB {
            let sum: f64 = (0..CODE_DIM).map(|j| token_code(a, j) as f64).sum();
            assert!(sum.abs() < 1e-5, "code {a} sums to {sum}");
            for b in 0..PLANTED_VOCAB {
                let dot: f64 = (0..CODE_DIM)
                    .map(|j| token_code(a, j) as f64 * token_code(b, j) as f64)
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-5, "<{a},{b}> = {dot}");
            }
        }
    }

    #[test]
    fn planted_heads_classify_as_planted() {
        let model = planted_model(&PlantedModelSpec::default()).unwrap();
        let ckpt = Checkpoint {
            step: 0,
            tokens_seen: 1,
            model,
        };
        let batch = fixture_batch(31);
        let mut cache = CaptureCache::disabled();
        let set = cache.capture(&ckpt, &batch, QueryPolicy::BatchDefined).unwrap();
        let records = screen_heads(&set, &batch, &PatternClass::STANDARD_SIX).unwrap();
        let classes = classify_heads(&records, ASSIGN_THRESHOLD).unwrap();
        let by_head: std::collections::BTreeMap<_, _> =
            classes.iter().map(|c| (c.head, c)).collect();

        let prev = by_head[&HeadId::new(0, 0)];
        assert_eq!(
            prev.class,
            Some(PatternClass::PrevToken),
            "prev head classified {:?} (best sel {})",
            prev.best_class,
            prev.best_sel
        );
        let ind = by_head[&HeadId::new(1, 0)];
        assert_eq!(
            ind.class,
            Some(PatternClass::Induction),
            "induction head classified {:?} (best sel {})",
            ind.best_class,
            ind.best_sel
        );
    }

    #[test]
    fn planted_selectivity_tracks_target() {
        for target in [150.0, 60.0, 20.0] {
            let model = planted_model(&PlantedModelSpec {
                heads: vec![
                    PlantedHead {
                        head: HeadId::new(0, 0),
                        pattern: PlantedPattern::PrevToken { peak_score: 24.0 },
                    },
                    PlantedHead {
                        head: HeadId::new(1, 0),
                        pattern: PlantedPattern::Induction {
                            target_sel: target,
                            copy_gain: 1.0,
                        },
                    },
                ],
                ..PlantedModelSpec::default()
            })
            .unwrap();
            let ckpt = Checkpoint {
                step: 0,
                tokens_seen: 1,
                model,
            };
            let batch = fixture_batch(37);
            let mut cache = CaptureCache::disabled();
            let set = cache.capture(&ckpt, &batch, QueryPolicy::BatchDefined).unwrap();
            let records = screen_heads(&set, &batch, &[PatternClass::Induction]).unwrap();
            let r = records
                .iter()
                .find(|r| r.head == HeadId::new(1, 0))
                .unwrap();
            let rel = (r.sel - target).abs() / target;
            assert!(
                rel < 0.10,
                "target sel {target}, realized {:.1} (rel err {rel:.2})",
                r.sel
            );
        }
    }

    #[test]
    fn planted_model_solves_induction_and_ablation_breaks_it() {
        use crate::ablate::evaluate;
        use crate::model::AblationMask;
        let model = profile_model(SelectivityProfile::Sharp).unwrap();
        let ckpt = Checkpoint {
            step: 0,
            tokens_seen: 1,
            model,
        };
        let batch = fixture_batch(41);
        let baseline = evaluate(&ckpt, &batch, &AblationMask::empty(), "baseline", None).unwrap();
        assert!(
            baseline.top1 > 0.9,
            "planted model top1 {} on its own task",
            baseline.top1
        );
        let mask = AblationMask::from_heads([HeadId::new(1, 0), HeadId::new(1, 1)]);
        let ablated = evaluate(&ckpt, &batch, &mask, "ablate", None).unwrap();
        assert!(
            ablated.top1 < 0.2,
            "ablating planted heads left top1 {}",
            ablated.top1
        );
    }
}
