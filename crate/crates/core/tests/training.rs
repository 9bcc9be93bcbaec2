//! Training-loop behavior: no-op at zero learning rate, measurable
//! progress, single-example capacity, determinism, divergence handling.

use lime_core::data::{generate_synthetic, SyntheticSpec};
use lime_core::model::{save_model, Model, ModelConfig, ModelKind};
use lime_core::train::{predict, train, train_on};
use rand::SeedableRng;

fn spec(users: usize) -> SyntheticSpec {
    SyntheticSpec {
        users,
        items: 100,
        latent_dim: 3,
        history_len: (4, 12),
        temperature: 0.5,
        seed: 21,
    }
}

fn config() -> ModelConfig {
    ModelConfig {
        d: 8,
        links: 2,
        heads: 2,
        n_layers: 2,
        context_dim: 4,
        interaction: vec![8],
        max_seq_len: 16,
        learning_rate: 5e-3,
        batch_size: 32,
        epochs: 1,
        seed: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let data = generate_synthetic(&spec(200)).unwrap();
    let mut cfg = config();
    cfg.learning_rate = 0.0;
    let mut model = Model::<f64>::seeded(ModelKind::LimeMha, &cfg, &data.vocab_info(cfg.d)).unwrap();
    let before = model.params();
    train(&mut model, &data).unwrap();
    for ((name, a), (_, b)) in before.iter().zip(model.params().iter()) {
        assert_eq!(a.data(), b.data(), "parameter {name} moved at lr=0");
    }
}

#[test]
fn two_hundred_steps_reduce_the_loss() {
    let data = generate_synthetic(&spec(1000)).unwrap();
    let mut cfg = config();
    cfg.batch_size = 5; // 1000 examples → 200 steps per epoch
    cfg.epochs = 1;
    let mut model = Model::<f64>::seeded(ModelKind::Ttsn, &cfg, &data.vocab_info(cfg.d)).unwrap();
    let report = train_on(&mut model, &data, &data.examples).unwrap();
    assert_eq!(report.steps, 200);
    let first = report.losses.first().copied().unwrap();
    let tail: f64 =
        report.losses[report.steps - 20..].iter().sum::<f64>() / 20.0;
    assert!(
        tail < first,
        "training loss did not drop: first {first:.4}, tail mean {tail:.4}"
    );
    assert!(model.trained);
}

#[test]
fn single_example_overfits_quickly() {
    let data = generate_synthetic(&spec(50)).unwrap();
    let mut cfg = config();
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 1;
    cfg.epochs = 500;
    let mut model = Model::<f64>::seeded(ModelKind::LimeMha, &cfg, &data.vocab_info(cfg.d)).unwrap();
    let one = &data.examples[..1];
    let report = train_on(&mut model, &data, one).unwrap();
    let last = *report.losses.last().unwrap();
    assert!(last < 0.01, "failed to overfit one example: loss {last:.4}");
}

#[test]
fn training_is_bit_reproducible_at_64_bit() {
    let data = generate_synthetic(&spec(300)).unwrap();
    let cfg = config();
    let dir = std::env::temp_dir().join("lime_train_determinism");
    std::fs::create_dir_all(&dir).unwrap();

    let mut paths = Vec::new();
    for run in 0..2 {
        let mut model =
            Model::<f64>::seeded(ModelKind::LimeXor, &cfg, &data.vocab_info(cfg.d)).unwrap();
        train(&mut model, &data).unwrap();
        let path = dir.join(format!("run{run}.ckpt"));
        save_model(&model, &path).unwrap();
        paths.push(path);
    }
    assert_eq!(
        std::fs::read(&paths[0]).unwrap(),
        std::fs::read(&paths[1]).unwrap(),
        "identical seed/config/data must reproduce the checkpoint bytes"
    );
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let data = generate_synthetic(&spec(100)).unwrap();
    let cfg = config();
    let mut model = Model::<f64>::seeded(ModelKind::Ttsn, &cfg, &data.vocab_info(cfg.d)).unwrap();
    model.for_each_param_mut(&mut |name, t| {
        if name == "interaction.w.0" {
            t.make_mut()[0] = f64::NAN;
        }
    });
    match train(&mut model, &data) {
        Err(lime_core::Error::TrainDiverged { step, lr, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(lr, cfg.learning_rate);
        }
        other => panic!("expected divergence error, got {other:?}"),
    }
}

#[test]
fn predictions_are_probabilities_aligned_with_labels() {
    let data = generate_synthetic(&spec(300)).unwrap();
    let cfg = config();
    let mut model = Model::<f64>::seeded(ModelKind::LimeMha, &cfg, &data.vocab_info(cfg.d)).unwrap();
    train(&mut model, &data).unwrap();
    let (preds, labels) = predict(&model, &data, data.test()).unwrap();
    assert_eq!(preds.len(), data.test().len());
    assert!(preds.iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(labels.len(), preds.len());
}

#[test]
fn models_trained_at_different_seeds_differ() {
    let data = generate_synthetic(&spec(100)).unwrap();
    let mut cfg_a = config();
    cfg_a.seed = 1;
    let mut cfg_b = config();
    cfg_b.seed = 2;
    // Seeded init differs, so this guards against a frozen RNG plumbing bug.
    let a = Model::<f64>::seeded(ModelKind::Ttsn, &cfg_a, &data.vocab_info(8)).unwrap();
    let b = Model::<f64>::seeded(ModelKind::Ttsn, &cfg_b, &data.vocab_info(8)).unwrap();
    let pa = a.params();
    let pb = b.params();
    assert!(pa.iter().zip(pb.iter()).any(|((_, x), (_, y))| x.data() != y.data()));
    let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    assert_eq!(
        rand::Rng::gen::<u64>(&mut r1),
        rand::Rng::gen::<u64>(&mut r2)
    );
}
