//! Shape, determinism, ablation, and gradient-flow contracts of the
//! assembled segmentation model.

mod common;

use common::rng;
use cueseg_core::autodiff::Tape;
use cueseg_core::model::{predict_mask, Ablation, MaskLogits, ModelConfig, SegModel};
use cueseg_core::synth::Vocab;
use cueseg_core::train::{loss_on_tape, LossKind};
use cueseg_core::types::{ImageTensor, PseudoMask};
use ndarray::{Array2, Array3};
use rand::Rng;

fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| r.gen_range(0.0..1.0))).unwrap()
}

fn toy_model(size: (usize, usize), ablation: Ablation, seed: u64) -> SegModel {
    let mut cfg = ModelConfig::toy(size);
    cfg.ablation = ablation;
    SegModel::init(cfg, seed).unwrap()
}

fn tokens(text: &str) -> Vec<usize> {
    Vocab::default().tokenize(text).unwrap()
}

#[test]
fn pyramid_scales_at_384() {
    let model = toy_model((384, 384), Ablation::Full, 0);
    let image = random_image(1, 384, 384);
    let pyramid = model.encode_image(&image).unwrap();
    pyramid.check_scales(384, 384).unwrap();
    assert_eq!(
        (pyramid.v1.height(), pyramid.v1.width()),
        (96, 96)
    );
    assert_eq!((pyramid.v2.height(), pyramid.v2.width()), (48, 48));
    assert_eq!((pyramid.v3.height(), pyramid.v3.width()), (24, 24));
    assert_eq!((pyramid.v4.height(), pyramid.v4.width()), (12, 12));
}

#[test]
fn pyramid_scales_minimum_and_nonsquare() {
    let model = toy_model((32, 32), Ablation::Full, 0);
    let pyramid = model.encode_image(&random_image(2, 32, 32)).unwrap();
    assert_eq!((pyramid.v4.height(), pyramid.v4.width()), (1, 1));
    pyramid.check_scales(32, 32).unwrap();

    let pyramid = model.encode_image(&random_image(3, 384, 320)).unwrap();
    assert_eq!(pyramid.v1.width(), 80);
    assert_eq!(pyramid.v2.width(), 40);
    assert_eq!(pyramid.v3.width(), 20);
    assert_eq!(pyramid.v4.width(), 10);
}

#[test]
fn encode_rejects_indivisible_dims() {
    let model = toy_model((32, 32), Ablation::Full, 0);
    let image = random_image(4, 48, 40);
    let err = model.encode_image(&image).unwrap_err();
    assert!(err.to_string().contains("divisible by 32"), "{err}");
}

#[test]
fn encode_text_shapes() {
    let mut cfg = ModelConfig::toy((32, 32));
    cfg.text_channels = 768;
    let model = SegModel::init(cfg, 0).unwrap();
    let ids = tokens("one bright oval lesion on the dark tissue");
    assert!(ids.len() >= 7);
    let out = model.encode_text(&ids[..7]).unwrap();
    assert_eq!((out.len(), out.channels()), (7, 768));
    let single = model.encode_text(&ids[..1]).unwrap();
    assert_eq!((single.len(), single.channels()), (1, 768));
}

#[test]
fn encode_text_rejects_out_of_vocab() {
    let model = toy_model((32, 32), Ablation::Full, 0);
    let vocab_size = model.config.text_vocab_size;
    let err = model.encode_text(&[0, vocab_size + 3]).unwrap_err();
    match err {
        cueseg_core::Error::Tokenize { id, position, .. } => {
            assert_eq!(id, vocab_size + 3);
            assert_eq!(position, 1);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn forward_shape_over_random_valid_sizes() {
    let model = toy_model((64, 64), Ablation::Full, 7);
    let ids = tokens("lesion");
    let mut r = rng(11);
    for _ in 0..6 {
        let h = 32 * r.gen_range(1..4);
        let w = 32 * r.gen_range(1..4);
        let logits = model.forward(&random_image(r.gen(), h, w), &ids).unwrap();
        assert_eq!(logits.data().dim(), (h, w));
    }
}

#[test]
fn forward_is_deterministic() {
    let model = toy_model((64, 64), Ablation::Full, 9);
    let image = random_image(10, 64, 64);
    let ids = tokens("one bright oval lesion on the dark tissue");
    let a = model.forward(&image, &ids).unwrap();
    let b = model.forward(&image, &ids).unwrap();
    assert_eq!(a.data(), b.data());

    // re-initializing with the same seed reproduces the same parameters
    let model2 = toy_model((64, 64), Ablation::Full, 9);
    let c = model2.forward(&image, &ids).unwrap();
    assert_eq!(a.data(), c.data());
}

#[test]
fn batch_equals_concatenated_singles() {
    let model = toy_model((32, 32), Ablation::Full, 12);
    let img1 = random_image(13, 32, 32);
    let img2 = random_image(14, 32, 32);
    let ids1 = tokens("lesion");
    let ids2 = tokens("no lesion visible on the dark tissue");
    let batch = model
        .forward_batch(&[(&img1, ids1.as_slice()), (&img2, ids2.as_slice())])
        .unwrap();
    let single1 = model.forward(&img1, &ids1).unwrap();
    let single2 = model.forward(&img2, &ids2).unwrap();
    for (a, b) in [(&batch[0], &single1), (&batch[1], &single2)] {
        let max = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-5, "batch deviates by {max}");
    }
}

#[test]
fn text_sensitivity_of_full_variant() {
    let model = toy_model((32, 32), Ablation::Full, 15);
    let image = random_image(16, 32, 32);
    let a = model.forward(&image, &tokens("lesion")).unwrap();
    let b = model
        .forward(&image, &tokens("no lesion visible on the dark tissue"))
        .unwrap();
    let max = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(max > 0.0, "logits must react to the text cue");
}

#[test]
fn ablation_parameter_count_ordering() {
    // frozen regression values for ModelConfig::toy((32, 32))
    let counts: Vec<(Ablation, usize)> = Ablation::all()
        .into_iter()
        .map(|ab| (ab, toy_model((32, 32), ab, 0).param_count()))
        .collect();
    let get = |target: Ablation| {
        counts
            .iter()
            .find(|(ab, _)| *ab == target)
            .map(|(_, c)| *c)
            .unwrap()
    };
    assert_eq!(get(Ablation::Full), 23849);
    assert_eq!(get(Ablation::NoTvha), 14737);
    assert_eq!(get(Ablation::NoCma), 14969);
    assert_eq!(get(Ablation::NoCa), 23617);
    assert!(get(Ablation::NoTvha) < get(Ablation::NoCma));
    assert!(get(Ablation::NoCma) < get(Ablation::Full));
    assert!(get(Ablation::NoCa) < get(Ablation::Full));
}

#[test]
fn no_tvha_keeps_output_shape() {
    let model = toy_model((64, 64), Ablation::NoTvha, 17);
    let logits = model.forward(&random_image(18, 64, 64), &[]).unwrap();
    assert_eq!(logits.data().dim(), (64, 64));
}

#[test]
fn gradient_reaches_every_trainable_parameter() {
    let model = toy_model((32, 32), Ablation::Full, 19);
    let image = random_image(20, 32, 32);
    let ids = tokens("one bright oval lesion on the dark tissue");
    let mut target = Array2::<u8>::zeros((32, 32));
    for y in 8..20 {
        for x in 10..22 {
            target[[y, x]] = 1;
        }
    }
    let mask = PseudoMask::new(target).unwrap();

    let mut tape = Tape::new();
    let logits = model
        .forward_on_tape(&mut tape, &image, &ids, &mut None)
        .unwrap();
    let loss = loss_on_tape(&mut tape, logits, &mask, LossKind::BceDice).unwrap();
    let grads = tape.backward(loss);

    for (name, node) in tape.named_params() {
        if name.starts_with("text.") {
            continue; // frozen branch by default
        }
        let g = grads
            .get(node)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(
            g.iter().any(|&v| v != 0.0),
            "parameter {name} received an all-zero gradient"
        );
    }
}

#[test]
fn pixel_shuffle_matches_index_permutation_oracle() {
    // 2x2x16 block with identity channel map -> known 8x8x1 rearrangement
    let mut input = Array3::<f64>::zeros((2, 2, 16));
    for y in 0..2 {
        for x in 0..2 {
            for c in 0..16 {
                input[[y, x, c]] = (y * 100 + x * 50) as f64 + c as f64;
            }
        }
    }
    let mut tape = Tape::new();
    let r = tape.constant(input.clone().into_dyn());
    let out = tape.pixel_shuffle(r, 4);
    assert_eq!(tape.shape(out), &[8, 8, 1]);
    for oy in 0..8 {
        for ox in 0..8 {
            let (y, dy) = (oy / 4, oy % 4);
            let (x, dx) = (ox / 4, ox % 4);
            let expected = input[[y, x, dy * 4 + dx]];
            assert_eq!(tape.value(out)[[oy, ox, 0]], expected);
        }
    }
}

#[test]
fn predict_mask_threshold_conventions() {
    let zeros = MaskLogits::new(Array2::zeros((3, 3))).unwrap();
    assert_eq!(predict_mask(&zeros, 0.5).unwrap().area(), 0);

    let saturated = MaskLogits::new(Array2::from_elem((3, 3), 10.0)).unwrap();
    assert_eq!(predict_mask(&saturated, 0.5).unwrap().area(), 9);

    let mixed = MaskLogits::new(ndarray::array![[-1.0, 1.0], [0.0, 3.0]]).unwrap();
    let mask = predict_mask(&mixed, 0.5).unwrap();
    assert_eq!(mask.data(), &ndarray::array![[0u8, 1], [0, 1]]);

    assert!(predict_mask(&zeros, 1.0).is_err());
}
