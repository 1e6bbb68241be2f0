//! Training-loop behavior: optimization progress, determinism, checkpoint
//! round-trips, the frozen-text contract, and failure diagnostics.

mod common;

use cueseg_core::data::SegSample;
use cueseg_core::model::{ModelConfig, SegModel};
use cueseg_core::synth::{make_synthetic_corpus, CorpusOptions, SyntheticItem};
use cueseg_core::train::{
    load_checkpoint, loss_on_tape, save_checkpoint, segmentation_loss, train, LossKind,
    SchedulerKind, TrainConfig, TrainData,
};
use cueseg_core::autodiff::Tape;
use cueseg_core::nn::Adam;
use cueseg_core::synth::Vocab;

fn corpus_samples(n: usize, seed: u64, size: (usize, usize)) -> Vec<SegSample> {
    let items = make_synthetic_corpus(
        n,
        seed,
        &CorpusOptions {
            size,
            ..CorpusOptions::default()
        },
    )
    .unwrap();
    items.into_iter().map(sample_of).collect()
}

fn sample_of(item: SyntheticItem) -> SegSample {
    SegSample {
        id: item.id,
        image: item.image,
        text: item.text,
        mask: Some(item.mask),
    }
}

fn tiny_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        batch_size: 4,
        seed,
        early_stop_patience: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_decreases_over_fifty_steps_on_one_sample() {
    // optimization smoke: repeated Adam steps on a single sample
    let samples = corpus_samples(3, 13, (32, 32));
    let sample = samples
        .iter()
        .find(|s| s.mask.as_ref().unwrap().area() > 0)
        .expect("a blob image exists");
    let model_cfg = ModelConfig::toy((32, 32));
    let mut model = SegModel::init(model_cfg, 5).unwrap();
    let vocab = Vocab::default();
    let ids = vocab.tokenize(&sample.text).unwrap();
    let mask = sample.mask.clone().unwrap();

    let mut adam = Adam::new(1e-3, 0.0);
    let mut curve = Vec::new();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let logits = model
            .forward_on_tape(&mut tape, &sample.image, &ids, &mut None)
            .unwrap();
        let loss = loss_on_tape(&mut tape, logits, &mask, LossKind::BceDice).unwrap();
        curve.push(tape.scalar(loss));
        let grads = tape.backward(loss);
        let named: std::collections::BTreeMap<String, ndarray::ArrayD<f64>> = tape
            .named_params()
            .filter_map(|(n, r)| grads.get(r).map(|g| (n.to_string(), g.clone())))
            .collect();
        adam.step(&mut model.store, &named, |_| false);
    }
    let first = curve[0];
    let last = *curve.last().unwrap();
    let decreasing_steps = curve.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(
        last < first * 0.75 && decreasing_steps >= 40,
        "loss failed to decrease: {first:.4} -> {last:.4} ({decreasing_steps}/49 decreasing steps)"
    );
}

#[test]
fn epoch_losses_reproducible_across_runs() {
    let samples = corpus_samples(6, 3, (32, 32));
    let data = TrainData {
        train: samples.clone(),
        val: samples.clone(),
    };
    let run = || {
        let mut model = SegModel::init(ModelConfig::toy((32, 32)), 11).unwrap();
        train(&mut model, &data, &tiny_train_config(2, 21))
            .unwrap()
            .history
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(b.iter()) {
        assert!(
            (ra.loss - rb.loss).abs() < 1e-6,
            "epoch {} loss drifted: {} vs {}",
            ra.epoch,
            ra.loss,
            rb.loss
        );
        assert_eq!(ra.miou, rb.miou);
        assert_eq!(ra.mdice, rb.mdice);
    }
}

#[test]
fn learning_rate_non_increasing_under_plateau() {
    let samples = corpus_samples(6, 29, (32, 32));
    let data = TrainData {
        train: samples.clone(),
        val: samples,
    };
    let mut model = SegModel::init(ModelConfig::toy((32, 32)), 7).unwrap();
    let cfg = TrainConfig {
        plateau_patience: 2,
        scheduler: SchedulerKind::ReduceOnPlateau,
        ..tiny_train_config(8, 5)
    };
    let outcome = train(&mut model, &data, &cfg).unwrap();
    let mut prev = f64::INFINITY;
    for row in &outcome.history {
        assert!(row.lr <= prev + 1e-18, "lr increased at epoch {}", row.epoch);
        prev = row.lr;
    }
}

#[test]
fn frozen_text_parameters_stay_bit_identical() {
    let samples = corpus_samples(6, 31, (32, 32));
    let data = TrainData {
        train: samples.clone(),
        val: samples.clone(),
    };
    let mut model = SegModel::init(ModelConfig::toy((32, 32)), 3).unwrap();
    let before = model.store.digest("text.");
    let cfg = TrainConfig {
        freeze_text: true,
        ..tiny_train_config(2, 9)
    };
    train(&mut model, &data, &cfg).unwrap();
    assert_eq!(model.store.digest("text."), before);

    // negative control: unfrozen text parameters move
    let mut model2 = SegModel::init(ModelConfig::toy((32, 32)), 3).unwrap();
    let before2 = model2.store.digest("text.");
    let cfg2 = TrainConfig {
        freeze_text: false,
        ..tiny_train_config(2, 9)
    };
    train(&mut model2, &data, &cfg2).unwrap();
    assert_ne!(model2.store.digest("text."), before2);
}

#[test]
fn checkpoint_roundtrip_bit_identical_eval() {
    let dir = tempfile::tempdir().unwrap();
    let samples = corpus_samples(4, 37, (32, 32));
    let data = TrainData {
        train: samples.clone(),
        val: samples.clone(),
    };
    let mut model = SegModel::init(ModelConfig::toy((32, 32)), 17).unwrap();
    let mut cfg = tiny_train_config(2, 23);
    cfg.loss = LossKind::BceDice;
    train(&mut model, &data, &cfg).unwrap();

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, None, 2, 0.5, 0.6).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.epoch, 2);
    assert_eq!(loaded.model.config, model.config);

    // parameters and eval outputs must round-trip exactly
    assert_eq!(loaded.model.store.digest(""), model.store.digest(""));
    let vocab = Vocab::default();
    let ids = vocab.tokenize(&samples[0].text).unwrap();
    let a = model.forward(&samples[0].image, &ids).unwrap();
    let b = loaded.model.forward(&samples[0].image, &ids).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn checkpoint_roundtrip_preserves_optimizer_state() {
    let dir = tempfile::tempdir().unwrap();
    let model = SegModel::init(ModelConfig::toy((32, 32)), 1).unwrap();
    let mut adam = Adam::new(2e-4, 1e-4);
    // drive the optimizer once so it has non-trivial moments
    let grads: std::collections::BTreeMap<String, ndarray::ArrayD<f64>> = model
        .store
        .iter()
        .map(|(n, v)| (n.clone(), v.mapv(|x| x * 0.01)))
        .collect();
    let mut store = model.store.clone();
    adam.step(&mut store, &grads, |_| false);

    let path = dir.path().join("with_opt.ckpt");
    save_checkpoint(&path, &model, Some(&adam), 1, 0.0, 0.0).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let restored = loaded.optimizer.expect("optimizer state present");
    let (step_a, rows_a) = adam.state();
    let (step_b, rows_b) = restored.state();
    assert_eq!(step_a, step_b);
    assert_eq!(rows_a.len(), rows_b.len());
    for ((na, ma, va), (nb, mb, vb)) in rows_a.iter().zip(rows_b.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ma, mb);
        assert_eq!(va, vb);
    }
}

#[test]
fn nan_loss_aborts_with_batch_diagnostic() {
    let samples = corpus_samples(4, 41, (32, 32));
    let data = TrainData {
        train: samples.clone(),
        val: samples,
    };
    let mut model = SegModel::init(ModelConfig::toy((32, 32)), 2).unwrap();
    // poison the head so the logits overflow to infinity on the first batch
    for name in ["head.expand.w", "head.to_logit.w"] {
        let poisoned = model.store.get(name).mapv(|_| 1e200);
        model.store.set(name, poisoned);
    }
    let err = match train(&mut model, &data, &tiny_train_config(1, 1)) {
        Ok(_) => panic!("poisoned training should abort"),
        Err(e) => e,
    };
    let msg = err.to_string();
    assert!(
        msg.contains("epoch 1") && msg.contains("batch"),
        "diagnostic should name the batch: {msg}"
    );
}

#[test]
fn empty_split_is_config_error() {
    let samples = corpus_samples(4, 43, (32, 32));
    let mut model = SegModel::init(ModelConfig::toy((32, 32)), 2).unwrap();
    let data = TrainData {
        train: samples,
        val: Vec::new(),
    };
    match train(&mut model, &data, &tiny_train_config(1, 1)) {
        Ok(_) => panic!("empty split should be rejected"),
        Err(e) => assert!(matches!(e, cueseg_core::Error::Config(_))),
    }
}

#[test]
fn loss_positive_until_saturation() {
    let samples = corpus_samples(5, 47, (32, 32));
    let model = SegModel::init(ModelConfig::toy((32, 32)), 4).unwrap();
    let vocab = Vocab::default();
    for s in &samples {
        let ids = vocab.tokenize(&s.text).unwrap();
        let logits = model.forward(&s.image, &ids).unwrap();
        let loss =
            segmentation_loss(&logits, s.mask.as_ref().unwrap(), LossKind::BceDice).unwrap();
        assert!(loss >= 0.0);
        assert!(loss > 0.0, "untrained model should not be at the optimum");
    }
}
