//! Shared test oracles: independent, loop-level reference implementations
//! of every checked equation, plus a central-difference gradient checker.
//! Nothing here calls into the library's compute paths.

#![allow(dead_code)]

use cueseg_core::nn::ParamStore;
use ndarray::{Array1, Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

pub fn rand3(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: f64) -> Array3<f64> {
    Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-scale..scale))
}

// ---- scalar references ----

pub fn oracle_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn oracle_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---- dense references ----

pub fn oracle_linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, d_in) = x.dim();
    let (_, d_out) = w.dim();
    let mut out = Array2::<f64>::zeros((n, d_out));
    for i in 0..n {
        for j in 0..d_out {
            let mut acc = b[j];
            for k in 0..d_in {
                acc += x[[i, k]] * w[[k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

pub fn oracle_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn oracle_layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> Array2<f64> {
    let eps = 1e-5;
    let (n, c) = x.dim();
    let mut out = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        let mean = x.row(i).sum() / c as f64;
        let var = x.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[[i, j]] = (x[[i, j]] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// Parameters of one attention block as plain arrays pulled from the store.
pub struct MhaParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

pub fn mha_params(store: &ParamStore, prefix: &str) -> MhaParams {
    let get2 = |n: &str| {
        store
            .get(&format!("{prefix}.{n}.w"))
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    let get1 = |n: &str| {
        store
            .get(&format!("{prefix}.{n}.b"))
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    };
    MhaParams {
        wq: get2("wq"),
        bq: get1("wq"),
        wk: get2("wk"),
        bk: get1("wk"),
        wv: get2("wv"),
        bv: get1("wv"),
        wo: get2("wo"),
        bo: get1("wo"),
    }
}

/// Brute-force multi-head attention over all query/key pairs.
pub fn oracle_mha(
    query: &Array2<f64>,
    key: &Array2<f64>,
    value: &Array2<f64>,
    p: &MhaParams,
    heads: usize,
) -> Array2<f64> {
    let q = oracle_linear(query, &p.wq, &p.bq);
    let k = oracle_linear(key, &p.wk, &p.bk);
    let v = oracle_linear(value, &p.wv, &p.bv);
    let model_dim = q.dim().1;
    let d = model_dim / heads;
    let (lq, lk) = (q.dim().0, k.dim().0);
    let mut merged = Array2::<f64>::zeros((lq, model_dim));
    for h in 0..heads {
        let offset = h * d;
        let mut scores = Array2::<f64>::zeros((lq, lk));
        for i in 0..lq {
            for j in 0..lk {
                let mut dot = 0.0;
                for e in 0..d {
                    dot += q[[i, offset + e]] * k[[j, offset + e]];
                }
                scores[[i, j]] = dot / (d as f64).sqrt();
            }
        }
        let weights = oracle_softmax_rows(&scores);
        for i in 0..lq {
            for e in 0..d {
                let mut acc = 0.0;
                for j in 0..lk {
                    acc += weights[[i, j]] * v[[j, offset + e]];
                }
                merged[[i, offset + e]] = acc;
            }
        }
    }
    oracle_linear(&merged, &p.wo, &p.bo)
}

/// Text projection reference: channel map -> GELU -> linear -> ReLU.
pub fn oracle_text_projection(
    t: &Array2<f64>,
    w1: &Array2<f64>,
    b1: &Array1<f64>,
    w2: &Array2<f64>,
    b2: &Array1<f64>,
) -> Array2<f64> {
    let h = oracle_linear(t, w1, b1).mapv(oracle_gelu);
    oracle_linear(&h, w2, b2).mapv(|v| v.max(0.0))
}

/// Bilinear 2x upsample reference (half-pixel centers, clamped borders).
pub fn oracle_upsample_2x(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::<f64>::zeros((2 * h, 2 * w, c));
    for oy in 0..2 * h {
        let sy = ((oy as f64 + 0.5) * 0.5 - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..2 * w {
            let sx = ((ox as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ci in 0..c {
                out[[oy, ox, ci]] = (1.0 - fy) * (1.0 - fx) * x[[y0, x0, ci]]
                    + (1.0 - fy) * fx * x[[y0, x1, ci]]
                    + fy * (1.0 - fx) * x[[y1, x0, ci]]
                    + fy * fx * x[[y1, x1, ci]];
            }
        }
    }
    out
}

/// Channel attention reference: pools -> shared bottleneck -> sigmoid gate.
pub fn oracle_channel_attention(
    f: &Array3<f64>,
    w1: &Array2<f64>,
    b1: &Array1<f64>,
    w2: &Array2<f64>,
    b2: &Array1<f64>,
    multiply: bool,
) -> Array3<f64> {
    let (h, w, c) = f.dim();
    let mut avg = Array1::<f64>::zeros(c);
    let mut max = Array1::<f64>::from_elem(c, f64::NEG_INFINITY);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                avg[ci] += f[[y, x, ci]];
                if f[[y, x, ci]] > max[ci] {
                    max[ci] = f[[y, x, ci]];
                }
            }
        }
    }
    avg.mapv_inplace(|v| v / (h * w) as f64);
    let bottleneck = |x: &Array1<f64>| -> Array1<f64> {
        let hidden = oracle_linear(
            &x.clone().insert_axis(ndarray::Axis(0)),
            w1,
            b1,
        )
        .mapv(oracle_gelu);
        oracle_linear(&hidden, w2, b2).row(0).to_owned()
    };
    let gate = (bottleneck(&avg) + bottleneck(&max)).mapv(oracle_sigmoid);
    let mut out = f.clone();
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                out[[y, x, ci]] = if multiply {
                    f[[y, x, ci]] * gate[ci] + f[[y, x, ci]]
                } else {
                    f[[y, x, ci]] + gate[ci]
                };
            }
        }
    }
    out
}

// ---- gradient checking ----

/// Central finite difference of `eval` w.r.t. one element of one parameter.
pub fn central_diff(
    store: &ParamStore,
    name: &str,
    flat_index: usize,
    eps: f64,
    eval: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let perturbed = |delta: f64| -> f64 {
        let mut s = store.clone();
        let mut arr = s.get(name).clone();
        arr.as_slice_mut().unwrap()[flat_index] += delta;
        s.set(name, arr);
        eval(&s)
    };
    (perturbed(eps) - perturbed(-eps)) / (2.0 * eps)
}

/// Compare analytic gradients against central differences for every element
/// of every named parameter. Returns the worst relative error.
///
/// The error is `|a - n| / max(|a|, |n|, floor)`. The floor absorbs pure
/// finite-difference roundoff (about `ulp(loss) / eps`) on near-zero
/// gradients; a gradient that is wrong by any multiplicative factor still
/// fails because `|a - n|` then dwarfs the floor.
pub fn check_param_grads(
    store: &ParamStore,
    analytic: &BTreeMap<String, ArrayD<f64>>,
    eval: &dyn Fn(&ParamStore) -> f64,
    eps: f64,
) -> f64 {
    let floor = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_at = (String::new(), 0usize, 0.0f64, 0.0f64);
    for (name, grad) in analytic {
        let flat = grad.as_slice().unwrap();
        for (i, &a) in flat.iter().enumerate() {
            let n = central_diff(store, name, i, eps, eval);
            let denom = a.abs().max(n.abs()).max(floor);
            let rel = (a - n).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_at = (name.clone(), i, a, n);
            }
        }
    }
    if worst > 1e-5 {
        eprintln!(
            "worst gradient deviation {:.3e} at {}[{}]: analytic {:.6e}, numeric {:.6e}",
            worst, worst_at.0, worst_at.1, worst_at.2, worst_at.3
        );
    }
    worst
}

/// Fixed random weighting turning an array-valued output into a scalar, so
/// gradient errors cannot cancel in a plain sum.
pub fn weighted_sum_target(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| r.gen_range(0.25..1.75))
}
