//! Parameter storage, layer building blocks, and the Adam optimizer.
//!
//! Parameters live in a flat name -> array map ([`ParamStore`]) so training,
//! checkpointing, freezing, and parameter counting all operate on the same
//! structure. Layer structs hold only names and shapes; their `forward`
//! methods lease values onto a [`Tape`].

use crate::autodiff::{Tape, TensorRef};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Flat, ordered name -> array parameter map.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter {name}"
        );
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "parameter {name} shape");
        *slot = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, value) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                value.fill(0.0);
            }
        }
    }

    /// SHA-256 over names, shapes, and little-endian value bytes of all
    /// parameters matching `prefix` (empty prefix: everything).
    pub fn digest(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            hasher.update(name.as_bytes());
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Lease a parameter onto the tape as a differentiable leaf.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> TensorRef {
        tape.named_param(name, self.get(name).clone())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Xavier-uniform sample with the given fan-in/fan-out.
fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut out = ArrayD::<f64>::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    out
}

/// Fully connected map on the last axis of a 2-d input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::init_with_bias(store, rng, name, in_dim, out_dim, 0.0)
    }

    /// Like [`Linear::init`] with a constant initial bias. Layers feeding a
    /// ReLU use a small positive bias so no unit starts dead.
    pub fn init_with_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: f64,
    ) -> Self {
        store.insert(
            &format!("{name}.w"),
            xavier(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        store.insert(
            &format!("{name}.b"),
            ArrayD::from_elem(IxDyn(&[out_dim]), bias),
        );
        Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let w = store.leaf(tape, &self.w);
        let b = store.leaf(tape, &self.b);
        let prod = tape.matmul(x, w);
        tape.add(prod, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// 1x1 channel map over an `(H, W, Cin)` feature, implemented as a reshape
/// plus matrix product.
pub fn pointwise(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &Linear,
    x: TensorRef,
) -> TensorRef {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 3, "pointwise expects (H, W, C)");
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    assert_eq!(c, layer.in_dim, "pointwise channels");
    let flat = tape.reshape(x, &[h * w, c]);
    let mapped = layer.forward(tape, store, flat);
    tape.reshape(mapped, &[h, w, layer.out_dim])
}

/// 2-d convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: String,
    pub bias: String,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        store.insert(
            &format!("{name}.k"),
            xavier(rng, &[kh, kw, cin, cout], kh * kw * cin, kh * kw * cout),
        );
        store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Self {
            kernel: format!("{name}.k"),
            bias: format!("{name}.b"),
            kh,
            kw,
            cin,
            cout,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let k = store.leaf(tape, &self.kernel);
        let b = store.leaf(tape, &self.bias);
        tape.conv2d(x, k, b, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.kh * self.kw * self.cin * self.cout + self.cout
    }
}

/// Layer normalization over the channel axis, learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        store.insert(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[dim])));
        store.insert(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])));
        Self {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let gamma = store.leaf(tape, &self.gamma);
        let beta = store.leaf(tape, &self.beta);
        tape.layer_norm(x, gamma, beta)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Embedding table, rows gathered by token id.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let mut table = ArrayD::<f64>::zeros(IxDyn(&[vocab, dim]));
        for v in table.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        store.insert(&format!("{name}.table"), table);
        Self {
            table: format!("{name}.table"),
            vocab,
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
    ) -> Result<TensorRef> {
        for (position, &id) in ids.iter().enumerate() {
            if id >= self.vocab {
                return Err(Error::Tokenize {
                    id,
                    position,
                    vocab_size: self.vocab,
                });
            }
        }
        let table = store.leaf(tape, &self.table);
        Ok(tape.embedding(table, ids))
    }
}

/// Adam with L2-style weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: BTreeMap<String, ArrayD<f64>>,
    second_moment: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Apply one update. `grads` maps parameter names to gradient arrays;
    /// parameters for which `frozen(name)` holds are skipped entirely.
    pub fn step<F>(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        frozen: F,
    ) where
        F: Fn(&str) -> bool,
    {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            if frozen(name) {
                continue;
            }
            let theta = store.get(name).clone();
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g = g + &theta * self.weight_decay;
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            *v = &*v * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);

            let m_hat = &*m / bias1;
            let v_hat = v.mapv(|x| (x / bias2).sqrt() + self.eps);
            let updated = theta - m_hat / v_hat * self.lr;
            store.set(name, updated);
        }
    }

    /// Serializable optimizer state: `(step, name -> (m, v))`.
    pub fn state(&self) -> (u64, Vec<(String, ArrayD<f64>, ArrayD<f64>)>) {
        let mut rows = Vec::new();
        for (name, m) in &self.first_moment {
            let v = self.second_moment.get(name).expect("moment pair");
            rows.push((name.clone(), m.clone(), v.clone()));
        }
        (self.step, rows)
    }

    pub fn restore_state(&mut self, step: u64, rows: Vec<(String, ArrayD<f64>, ArrayD<f64>)>) {
        self.step = step;
        self.first_moment.clear();
        self.second_moment.clear();
        for (name, m, v) in rows {
            self.first_moment.insert(name.clone(), m);
            self.second_moment.insert(name, v);
        }
    }
}

/// Deterministic RNG used for all parameter initialization.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
