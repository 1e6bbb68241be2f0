//! Central-finite-difference verification of the analytic gradients for
//! every attention operation and the composed decoder layer, on toy shapes
//! at 64-bit precision. Inputs are registered in the parameter store so the
//! same machinery checks gradients w.r.t. inputs and parameters alike.

mod common;

use common::*;
use cueseg_core::attention::{
    AttentionConfig, ChannelAttention, ChannelAttnMode, LevelFusion, MultiHeadAttention,
    PositionEncoding, TextProjection, TextToVisionAttention, TvhaLayer, TvhaWiring,
    VisionSelfAttention, VisionToTextAttention,
};
use cueseg_core::autodiff::{Tape, TensorRef};
use cueseg_core::nn::ParamStore;
use ndarray::ArrayD;
use std::collections::BTreeMap;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Evaluate `build` into a weighted-sum scalar loss.
fn weighted_loss(
    tape: &mut Tape,
    out: TensorRef,
    weight_seed: u64,
) -> TensorRef {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(weighted_sum_target(&shape, weight_seed));
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

/// Run the analytic backward pass and compare every parameter (and input)
/// against central differences.
fn assert_grads_match<F>(store: &ParamStore, weight_seed: u64, build: F, context: &str)
where
    F: Fn(&mut Tape, &ParamStore) -> TensorRef,
{
    let analytic: BTreeMap<String, ArrayD<f64>> = {
        let mut tape = Tape::new();
        let out = build(&mut tape, store);
        let loss = weighted_loss(&mut tape, out, weight_seed);
        let grads = tape.backward(loss);
        tape.named_params()
            .filter_map(|(name, node)| grads.get(node).map(|g| (name.to_string(), g.clone())))
            .collect()
    };
    assert!(!analytic.is_empty(), "{context}: no gradients produced");

    let eval = |candidate: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let out = build(&mut tape, candidate);
        let loss = weighted_loss(&mut tape, out, weight_seed);
        tape.scalar(loss)
    };
    let worst = check_param_grads(store, &analytic, &eval, EPS);
    assert!(worst < TOL, "{context}: worst relative error {worst:.3e}");
}

fn insert_input2(store: &mut ParamStore, name: &str, seed: u64, rows: usize, cols: usize) {
    store.insert(name, rand2(&mut rng(seed), rows, cols, 1.0).into_dyn());
}

fn insert_input3(store: &mut ParamStore, name: &str, seed: u64, h: usize, w: usize, c: usize) {
    store.insert(name, rand3(&mut rng(seed), h, w, c, 1.0).into_dyn());
}

#[test]
fn grad_project_text() {
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let proj = TextProjection::init(&mut store, &mut r, "proj", 4, 5);
    insert_input2(&mut store, "input.t", 2, 3, 4);
    assert_grads_match(
        &store,
        11,
        |tape, s| {
            let t = s.leaf(tape, "input.t");
            proj.forward(tape, s, t).unwrap()
        },
        "project_text",
    );
}

#[test]
fn grad_fuse_levels() {
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let fusion = LevelFusion::init(&mut store, &mut r, "fuse", 3, 2, 4);
    insert_input3(&mut store, "input.hi", 4, 2, 2, 3);
    insert_input3(&mut store, "input.lo", 5, 4, 4, 2);
    assert_grads_match(
        &store,
        12,
        |tape, s| {
            let hi = s.leaf(tape, "input.hi");
            let lo = s.leaf(tape, "input.lo");
            fusion.forward(tape, s, hi, lo).unwrap()
        },
        "fuse_levels",
    );
}

#[test]
fn grad_multi_head_attention() {
    let mut store = ParamStore::new();
    let mut r = rng(6);
    let mha = MultiHeadAttention::init(&mut store, &mut r, "mha", 4, 4, 4, 2).unwrap();
    insert_input2(&mut store, "input.q", 7, 3, 4);
    insert_input2(&mut store, "input.kv", 8, 5, 4);
    assert_grads_match(
        &store,
        13,
        |tape, s| {
            let q = s.leaf(tape, "input.q");
            let kv = s.leaf(tape, "input.kv");
            mha.forward(tape, s, q, kv, kv).unwrap().out
        },
        "multi_head_attention",
    );
}

#[test]
fn grad_self_attend_vision() {
    let mut store = ParamStore::new();
    let mut r = rng(9);
    let sa = VisionSelfAttention::init(&mut store, &mut r, "sa", 4, 2).unwrap();
    insert_input3(&mut store, "input.fv", 10, 2, 2, 4);
    let pos = PositionEncoding::spatial_sinusoidal(2, 2, 4);
    assert_grads_match(
        &store,
        14,
        |tape, s| {
            let f = s.leaf(tape, "input.fv");
            sa.forward(tape, s, f, &pos, &mut None).unwrap()
        },
        "self_attend_vision",
    );
}

#[test]
fn grad_cross_attend_text_to_vision() {
    let mut store = ParamStore::new();
    let mut r = rng(15);
    let t2v = TextToVisionAttention::init(&mut store, &mut r, "t2v", 4, 1).unwrap();
    insert_input2(&mut store, "input.ft", 16, 2, 4);
    insert_input3(&mut store, "input.fv", 17, 2, 2, 4);
    let pos_t = PositionEncoding::token_sinusoidal(2, 4);
    let pos_v = PositionEncoding::spatial_sinusoidal(2, 2, 4);
    assert_grads_match(
        &store,
        18,
        |tape, s| {
            let ft = s.leaf(tape, "input.ft");
            let fv = s.leaf(tape, "input.fv");
            t2v.forward(tape, s, ft, fv, &pos_t, &pos_v, &mut None)
                .unwrap()
        },
        "cross_attend_text_to_vision",
    );
}

#[test]
fn grad_cross_attend_vision_to_text() {
    let mut store = ParamStore::new();
    let mut r = rng(19);
    let v2t = VisionToTextAttention::init(&mut store, &mut r, "v2t", 4, 1).unwrap();
    insert_input3(&mut store, "input.fv", 20, 2, 2, 4);
    insert_input2(&mut store, "input.ft", 21, 3, 4);
    let pos_v = PositionEncoding::spatial_sinusoidal(2, 2, 4);
    let pos_t = PositionEncoding::token_sinusoidal(3, 4);
    assert_grads_match(
        &store,
        22,
        |tape, s| {
            let fv = s.leaf(tape, "input.fv");
            let ft = s.leaf(tape, "input.ft");
            v2t.forward(tape, s, fv, ft, &pos_v, &pos_t, &mut None)
                .unwrap()
        },
        "cross_attend_vision_to_text",
    );
}

#[test]
fn grad_channel_attention_both_modes() {
    for (mode, label) in [
        (ChannelAttnMode::AddAsWritten, "add_as_written"),
        (ChannelAttnMode::ScaleCbam, "scale_cbam"),
    ] {
        let mut store = ParamStore::new();
        let mut r = rng(23);
        let ca = ChannelAttention::init(&mut store, &mut r, "ca", 4, 2, mode).unwrap();
        // distinct spatial values keep the max-pool argmax stable under
        // the finite-difference perturbation
        let f = ndarray::Array3::from_shape_fn((3, 3, 4), |(y, x, c)| {
            ((y * 12 + x * 4 + c) as f64 * 0.37).sin() * 0.9
        });
        store.insert("input.f", f.into_dyn());
        assert_grads_match(
            &store,
            24,
            |tape, s| {
                let f = s.leaf(tape, "input.f");
                ca.forward(tape, s, f).unwrap().out
            },
            &format!("channel_attention[{label}]"),
        );
    }
}

#[test]
fn grad_tvha_layer_composed() {
    let cfg = AttentionConfig {
        num_heads: 1,
        channels_per_layer: [4, 4, 4],
        channel_attn_reduction: 2,
        ..AttentionConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng(25);
    let layer =
        TvhaLayer::init(&mut store, &mut r, "layer", 0, 3, 2, 5, &cfg, TvhaWiring::full()).unwrap();
    insert_input3(&mut store, "input.hi", 26, 2, 2, 3);
    insert_input3(&mut store, "input.lo", 27, 4, 4, 2);
    insert_input2(&mut store, "input.t", 28, 3, 5);
    assert_grads_match(
        &store,
        29,
        |tape, s| {
            let hi = s.leaf(tape, "input.hi");
            let lo = s.leaf(tape, "input.lo");
            let t = s.leaf(tape, "input.t");
            layer.forward(tape, s, hi, lo, Some(t), &mut None).unwrap()
        },
        "tvha_layer",
    );
}

#[test]
fn grad_tvha_layer_ablated_wirings() {
    for (wiring, label) in [
        (
            TvhaWiring {
                use_cma: false,
                use_ca: true,
            },
            "no_cma",
        ),
        (
            TvhaWiring {
                use_cma: true,
                use_ca: false,
            },
            "no_ca",
        ),
    ] {
        let cfg = AttentionConfig {
            num_heads: 1,
            channels_per_layer: [4, 4, 4],
            channel_attn_reduction: 2,
            ..AttentionConfig::default()
        };
        let mut store = ParamStore::new();
        let mut r = rng(30);
        let layer = TvhaLayer::init(&mut store, &mut r, "layer", 1, 3, 2, 5, &cfg, wiring).unwrap();
        insert_input3(&mut store, "input.hi", 31, 2, 2, 3);
        insert_input3(&mut store, "input.lo", 32, 4, 4, 2);
        insert_input2(&mut store, "input.t", 33, 2, 5);
        assert_grads_match(
            &store,
            34,
            |tape, s| {
                let hi = s.leaf(tape, "input.hi");
                let lo = s.leaf(tape, "input.lo");
                let t = if wiring.use_cma {
                    Some(s.leaf(tape, "input.t"))
                } else {
                    None
                };
                layer.forward(tape, s, hi, lo, t, &mut None).unwrap()
            },
            &format!("tvha_layer[{label}]"),
        );
    }
}
