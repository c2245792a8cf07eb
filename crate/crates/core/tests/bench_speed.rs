use headscope::model::{Model, ModelConfig, TrainConfig, train};
use headscope::taskgen::InductionMixStream;
use std::time::Instant;

#[test]
fn bench_train_speed() {
    // tiny
    let mut m = Model::init(ModelConfig::tiny(1), 1).unwrap();
    let mut s = InductionMixStream::new(1, 2, 512).unwrap();
    let cfg = TrainConfig { batch_size: 16, seq_len: 96, warmup_steps: 10, ..Default::default() };
    let t0 = Instant::now();
    train(&mut m, &mut s, &cfg, &[20], &mut ()).unwrap();
    eprintln!("tiny: {:.3} s/step (b16 x s96)", t0.elapsed().as_secs_f64() / 20.0);

    // probe preset
    let mut m = Model::init(ModelConfig::probe(1), 1).unwrap();
    let mut s = InductionMixStream::new(1, 2, 2048).unwrap();
    let cfg = TrainConfig { batch_size: 16, seq_len: 128, warmup_steps: 10, ..Default::default() };
    let t0 = Instant::now();
    train(&mut m, &mut s, &cfg, &[10], &mut ()).unwrap();
    eprintln!("probe(4L/128d): {:.3} s/step (b16 x s128)", t0.elapsed().as_secs_f64() / 10.0);

    // mid model 3L/96d/6h
    let mid = ModelConfig { n_layers: 3, d_model: 96, n_heads: 6, d_head: 16, ffn_dim: 384, vocab_size: 1024, max_seq_len: 192, seed: 1 };
    let mut m = Model::init(mid, 1).unwrap();
    let mut s = InductionMixStream::new(1, 2, 1024).unwrap();
    let cfg = TrainConfig { batch_size: 12, seq_len: 128, warmup_steps: 10, ..Default::default() };
    let t0 = Instant::now();
    train(&mut m, &mut s, &cfg, &[10], &mut ()).unwrap();
    eprintln!("mid(3L/96d): {:.3} s/step (b12 x s128)", t0.elapsed().as_secs_f64() / 10.0);
}
