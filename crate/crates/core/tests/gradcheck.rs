//! Finite-difference check of the hand-written backward pass.
//!
//! Central differences of the training loss with respect to sampled
//! parameters from every tensor kind must match the analytic gradients.
//! f32 arithmetic limits the attainable agreement; the tolerance below is
//! far tighter than any structural backprop mistake would allow.

use headscope::model::{Model, ModelConfig};
use ndarray::Array2;
use rand::Rng;

fn micro_config(tied: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        ffn_dim: 24,
        vocab_size: 24,
        max_seq_len: 12,
        seed: 0,
        tied_embeddings: tied,
    }
}

#[test]
fn gradients_match_central_differences_untied() {
    check(false);
}

#[test]
fn gradients_match_central_differences_tied() {
    check(true);
}

fn check(tied: bool) {
    let model = Model::init(micro_config(tied), 21).unwrap();
    let mut r = headscope::rng::rng(77, 1);
    let toks = Array2::from_shape_fn((3, 9), |_| r.gen_range(0..24u32));
    let inputs = toks.slice(ndarray::s![.., ..8]);
    let targets = toks.slice(ndarray::s![.., 1..]);

    let (_, grads) = model.loss_and_grads(inputs, targets).unwrap();

    let loss_at = |m: &Model| m.loss_and_grads(inputs, targets).unwrap().0;

    // sample indices from each tensor so every backward branch is covered
    let mut checked = 0usize;
    let mut worst: (f64, String) = (0.0, String::new());
    for spec in model.params.layout().to_vec() {
        let len = spec.len();
        let picks: Vec<usize> = (0..4).map(|_| r.gen_range(0..len)).collect();
        for pick in picks {
            let idx = spec.offset + pick;
            let eps = 2e-3f32;
            let mut plus = model.clone();
            plus.params.data_mut()[idx] += eps;
            let mut minus = model.clone();
            minus.params.data_mut()[idx] -= eps;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps as f64);
            let analytic = grads.data()[idx] as f64;
            let denom = numeric.abs().max(analytic.abs()).max(3e-3);
            let rel = (numeric - analytic).abs() / denom;
            if rel > worst.0 {
                worst = (rel, format!("{}[{pick}] analytic {analytic:.6e} numeric {numeric:.6e}", spec.name));
            }
            assert!(
                rel < 4e-2,
                "gradient mismatch at {}[{pick}]: analytic {analytic:.6e}, numeric {numeric:.6e}, rel {rel:.3e}",
                spec.name
            );
            checked += 1;
        }
    }
    assert!(checked >= 60, "too few parameters sampled");
    eprintln!("gradcheck: {checked} parameters, worst rel err {:.3e} at {}", worst.0, worst.1);
}
