use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rumorgraph::gnn::Mode;
use rumorgraph::graph::split_folds;
use rumorgraph::model::{Estimator, ForwardOptions, Model, ModelConfig, PreparedEvent};
use rumorgraph::params::ParamStore;
use rumorgraph::sampler::gumbel_noise;
use rumorgraph::synth::{generate_synthetic, preset};
use rumorgraph::trainer::{adam_step, evaluate, train, train_on, AdamHyper, AdamState, TrainConfig};

fn small_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.dim = 8;
    cfg.classifier_hidden = 8;
    cfg
}

fn quick_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs_max: 3,
        seed,
        ..TrainConfig::default()
    }
}

fn same_values(a: &ParamStore, b: &ParamStore) -> bool {
    a.iter()
        .zip(b.iter())
        .all(|((_, na, pa), (_, nb, pb))| na == nb && pa == pb)
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let data = generate_synthetic(&preset("tiny").unwrap(), 11).unwrap();
    let folds = split_folds(&data, 4, 11).unwrap();
    let run = |seed| train(&data, &folds, 1, &small_model_config(), &quick_train_config(seed)).unwrap();
    let (m1, h1) = run(5);
    let (m2, h2) = run(5);
    let (m3, _) = run(6);
    assert_eq!(h1, h2);
    assert!(same_values(&m1.store, &m2.store));
    assert!(!same_values(&m1.store, &m3.store));
}

#[test]
fn one_small_step_lowers_the_loss_with_frozen_noise() {
    let data = generate_synthetic(&preset("tiny").unwrap(), 2).unwrap();
    let model = Model::new(small_model_config(), 9).unwrap();
    let events: Vec<PreparedEvent> = data.events()[..5].iter().map(|e| model.prepare(e.clone())).collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<Vec<Vec<f64>>> = events
        .iter()
        .map(|e| {
            (0..model.config.sampler.m)
                .map(|_| gumbel_noise(e.graph.n(), &mut noise_rng))
                .collect()
        })
        .collect();

    let batch_loss = |m: &Model| {
        let mut total = 0.0;
        let mut grads = rumorgraph::params::ParamGrads::new(m.store.len());
        for (i, (ev, g)) in events.iter().zip(&noise).enumerate() {
            let opts = ForwardOptions {
                mode: Mode::Eval,
                gumbel: Some(g),
                feature_noise: None,
                estimator: Estimator::Relaxed,
            };
            let (b, _, gr) = m
                .loss_and_grads(ev, opts, &mut ChaCha8Rng::seed_from_u64(i as u64))
                .unwrap();
            total += b.total;
            grads.merge(&gr.params);
        }
        (total / events.len() as f64, grads)
    };

    let (before, grads) = batch_loss(&model);
    let mut stepped = model.clone();
    let mut state = AdamState::new(&stepped.store);
    adam_step(&mut stepped.store, &grads, &mut state, AdamHyper::with_lr(1e-4)).unwrap();
    let (after, _) = batch_loss(&stepped);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let data = generate_synthetic(&preset("tiny").unwrap(), 3).unwrap();
    let mut model = Model::new(small_model_config(), 1).unwrap();
    let prepared: Vec<PreparedEvent> = data.events().iter().map(|e| model.prepare(e.clone())).collect();
    let (monitor, rest) = prepared.split_at(10);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs_max: 12,
        patience: 2,
        learning_rate: 0.05,
        seed: 3,
        ..TrainConfig::default()
    };
    let history = train_on(&mut model, rest, monitor, &cfg).unwrap();
    let best = &history.epochs[history.best_epoch - 1];
    assert!(history.epochs.iter().all(|e| e.test_loss >= best.test_loss));
    assert!(history.stop_epoch <= cfg.epochs_max);
    if history.stop_epoch < cfg.epochs_max {
        assert_eq!(history.stop_epoch, history.best_epoch + cfg.patience);
    }
    let restored = evaluate(&model, monitor, 3).unwrap();
    assert_eq!(restored.mean_loss, best.test_loss);
}
