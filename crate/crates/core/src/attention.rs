//! Text-vision hybrid attention decoder layer: text projection, dual-way
//! cross-modal attention (vision self-attention, text-to-vision and
//! vision-to-text cross-attention), and channel attention.
//!
//! Every block is a pure, differentiable function of its inputs and the
//! parameters leased from a [`ParamStore`]; the blocks compose on a [`Tape`]
//! so gradients are available end to end.

use crate::autodiff::{Tape, TensorRef};
use crate::error::{Error, Result};
use crate::nn::{pointwise, LayerNorm, Linear, ParamStore};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A sequence of token embeddings, `(L, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    data: Array2<f64>,
}

impl TokenSequence {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (l, c) = data.dim();
        if l == 0 || c == 0 {
            return Err(Error::shape(format!(
                "token sequence must have L >= 1 and C >= 1, got ({l}, {c})"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "token sequence contains non-finite entries".to_string(),
            ));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        false // L >= 1 by construction
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }
}

/// A spatial feature map, `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeature {
    data: Array3<f64>,
}

impl SpatialFeature {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!(
                "spatial feature dims must all be >= 1, got ({h}, {w}, {c})"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "spatial feature contains non-finite entries".to_string(),
            ));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

/// Row-major flattening `(H, W, C)` -> `(H*W, C)`.
pub fn flatten_spatial(v: &SpatialFeature) -> TokenSequence {
    let (h, w, c) = v.data.dim();
    let flat = v
        .data
        .clone()
        .into_shape_with_order((h * w, c))
        .expect("row-major flatten");
    TokenSequence { data: flat }
}

/// Exact inverse of [`flatten_spatial`] for the given spatial dims.
pub fn unflatten_spatial(t: &TokenSequence, height: usize, width: usize) -> Result<SpatialFeature> {
    let (l, c) = t.data.dim();
    if l != height * width {
        return Err(Error::shape(format!(
            "cannot unflatten {l} tokens into ({height}, {width})"
        )));
    }
    let data = t
        .data
        .clone()
        .into_shape_with_order((height, width, c))
        .expect("row-major unflatten");
    Ok(SpatialFeature { data })
}

/// Fixed sinusoidal position encoding; a deterministic function of shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEncoding {
    data: Array2<f64>,
}

impl PositionEncoding {
    pub fn from_array(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// 1-d sinusoid over token positions, `(L, C)`.
    pub fn token_sinusoidal(length: usize, channels: usize) -> Self {
        Self {
            data: sinusoid_1d(length, channels),
        }
    }

    /// 2-d sinusoid over a flattened `(H*W, C)` grid: the first half of the
    /// channels encodes the row index, the rest the column index.
    pub fn spatial_sinusoidal(height: usize, width: usize, channels: usize) -> Self {
        let cy = channels / 2;
        let cx = channels - cy;
        let pe_y = sinusoid_1d(height, cy);
        let pe_x = sinusoid_1d(width, cx);
        let mut data = Array2::<f64>::zeros((height * width, channels));
        for y in 0..height {
            for x in 0..width {
                let row = y * width + x;
                for k in 0..cy {
                    data[[row, k]] = pe_y[[y, k]];
                }
                for k in 0..cx {
                    data[[row, cy + k]] = pe_x[[x, k]];
                }
            }
        }
        Self { data }
    }
}

fn sinusoid_1d(length: usize, channels: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((length, channels));
    for p in 0..length {
        for k in 0..channels {
            let pair = (k / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / channels as f64);
            pe[[p, k]] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// How the channel-attention gate is combined with the feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAttnMode {
    /// `broadcast(w) + f_mix` — the literal composition.
    AddAsWritten,
    /// `broadcast(w) * f_mix + f_mix` — the multiplicative convention.
    ScaleCbam,
}

/// Hyper-parameters of the hybrid-attention decoder layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Output channels of decoder layers 1..=3.
    pub channels_per_layer: [usize; 3],
    pub channel_attn_mode: ChannelAttnMode,
    pub channel_attn_reduction: usize,
    pub dropout_rate: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            num_heads: 8,
            channels_per_layer: [128, 64, 32],
            channel_attn_mode: ChannelAttnMode::AddAsWritten,
            channel_attn_reduction: 16,
            dropout_rate: 0.0,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be >= 1".to_string()));
        }
        for (j, &c) in self.channels_per_layer.iter().enumerate() {
            if c == 0 || c % self.num_heads != 0 {
                return Err(Error::config(format!(
                    "channels_per_layer[{j}] = {c} must be a positive multiple of num_heads = {}",
                    self.num_heads
                )));
            }
        }
        if self.channel_attn_reduction == 0 {
            return Err(Error::config(
                "channel_attn_reduction must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Optional stochastic regularization; active only during training.
pub struct DropoutState {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

fn maybe_dropout(tape: &mut Tape, x: TensorRef, dropout: &mut Option<&mut DropoutState>) -> TensorRef {
    let Some(state) = dropout else { return x };
    if state.rate <= 0.0 {
        return x;
    }
    use rand::Rng;
    let keep = 1.0 - state.rate;
    let shape = tape.shape(x).to_vec();
    let mut mask = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
    for v in mask.iter_mut() {
        *v = if state.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

/// Scaled dot-product attention with learned Q/K/V/output maps.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
    pub model_dim: usize,
}

/// Attention output plus the post-softmax weights `(heads, Lq, Lk)`.
pub struct AttentionOutput {
    pub out: TensorRef,
    pub weights: TensorRef,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        qk_dim: usize,
        v_dim: usize,
        model_dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if model_dim % num_heads != 0 {
            return Err(Error::config(format!(
                "model dim {model_dim} not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::init(store, rng, &format!("{name}.wq"), qk_dim, model_dim),
            wk: Linear::init(store, rng, &format!("{name}.wk"), qk_dim, model_dim),
            wv: Linear::init(store, rng, &format!("{name}.wv"), v_dim, model_dim),
            wo: Linear::init(store, rng, &format!("{name}.wo"), model_dim, model_dim),
            num_heads,
            model_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count()
            + self.wk.param_count()
            + self.wv.param_count()
            + self.wo.param_count()
    }

    /// `query: (Lq, Cqk)`, `key: (Lk, Cqk)`, `value: (Lk, Cv)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: TensorRef,
        key: TensorRef,
        value: TensorRef,
    ) -> Result<AttentionOutput> {
        let qs = tape.shape(query).to_vec();
        let ks = tape.shape(key).to_vec();
        let vs = tape.shape(value).to_vec();
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return Err(Error::shape(format!(
                "attention operands must be 2-d, got {qs:?}, {ks:?}, {vs:?}"
            )));
        }
        if qs[1] != ks[1] {
            return Err(Error::shape(format!(
                "query channels {} must equal key channels {}",
                qs[1], ks[1]
            )));
        }
        if ks[0] != vs[0] {
            return Err(Error::shape(format!(
                "key length {} must equal value length {}",
                ks[0], vs[0]
            )));
        }
        if qs[1] != self.wq.in_dim || vs[1] != self.wv.in_dim {
            return Err(Error::shape(format!(
                "attention expects query/key channels {} and value channels {}, got {} and {}",
                self.wq.in_dim, self.wv.in_dim, qs[1], vs[1]
            )));
        }
        let (lq, lk) = (qs[0], ks[0]);
        let heads = self.num_heads;
        let dim = self.model_dim / heads;

        let q = self.wq.forward(tape, store, query);
        let k = self.wk.forward(tape, store, key);
        let v = self.wv.forward(tape, store, value);

        // (L, C) -> (heads, L, d)
        let qh = {
            let r = tape.reshape(q, &[lq, heads, dim]);
            tape.permute(r, &[1, 0, 2])
        };
        let kt = {
            let r = tape.reshape(k, &[lk, heads, dim]);
            tape.permute(r, &[1, 2, 0])
        };
        let vh = {
            let r = tape.reshape(v, &[lk, heads, dim]);
            tape.permute(r, &[1, 0, 2])
        };

        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, 1.0 / (dim as f64).sqrt());
        let weights = tape.softmax(scaled);
        let context = tape.matmul(weights, vh);
        let merged = {
            let p = tape.permute(context, &[1, 0, 2]);
            tape.reshape(p, &[lq, self.model_dim])
        };
        let out = self.wo.forward(tape, store, merged);
        Ok(AttentionOutput { out, weights })
    }
}

/// Aligns text embeddings with the visual channel dim:
/// per-token channel map -> GELU -> linear map -> ReLU.
#[derive(Debug, Clone)]
pub struct TextProjection {
    pub channel_map: Linear,
    pub linear: Linear,
}

impl TextProjection {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        target_channels: usize,
    ) -> Self {
        Self {
            channel_map: Linear::init(
                store,
                rng,
                &format!("{name}.channel_map"),
                in_channels,
                target_channels,
            ),
            linear: Linear::init_with_bias(
                store,
                rng,
                &format!("{name}.linear"),
                target_channels,
                target_channels,
                0.1,
            ),
        }
    }

    pub fn param_count(&self) -> usize {
        self.channel_map.param_count() + self.linear.param_count()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, t: TensorRef) -> Result<TensorRef> {
        let shape = tape.shape(t).to_vec();
        if shape.len() != 2 || shape[1] != self.channel_map.in_dim {
            return Err(Error::shape(format!(
                "text projection expects (L, {}), got {shape:?}",
                self.channel_map.in_dim
            )));
        }
        let x = self.channel_map.forward(tape, store, t);
        let x = tape.gelu(x);
        let x = self.linear.forward(tape, store, x);
        Ok(tape.relu(x))
    }

    /// Convenience evaluation on plain values.
    pub fn project(&self, store: &ParamStore, t: &TokenSequence) -> Result<TokenSequence> {
        let mut tape = Tape::new();
        let tin = tape.constant(t.data.clone().into_dyn());
        let out = self.forward(&mut tape, store, tin)?;
        let data = tape
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        TokenSequence::new(data)
    }
}

/// Upsample the high-level feature 2x, concatenate with the low-level one,
/// and map to `out_channels` with a learned 1x1 channel map.
#[derive(Debug, Clone)]
pub struct LevelFusion {
    pub map: Linear,
    pub high_channels: usize,
    pub low_channels: usize,
}

impl LevelFusion {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        high_channels: usize,
        low_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            map: Linear::init(
                store,
                rng,
                &format!("{name}.map"),
                high_channels + low_channels,
                out_channels,
            ),
            high_channels,
            low_channels,
        }
    }

    pub fn param_count(&self) -> usize {
        self.map.param_count()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        v_high: TensorRef,
        v_low: TensorRef,
    ) -> Result<TensorRef> {
        let hs = tape.shape(v_high).to_vec();
        let ls = tape.shape(v_low).to_vec();
        if hs.len() != 3 || ls.len() != 3 || ls[0] != 2 * hs[0] || ls[1] != 2 * hs[1] {
            return Err(Error::shape(format!(
                "fuse_levels requires low-level spatial dims exactly 2x high-level; got high {hs:?} vs low {ls:?}"
            )));
        }
        if hs[2] != self.high_channels || ls[2] != self.low_channels {
            return Err(Error::shape(format!(
                "fuse_levels channels ({}, {}) expected, got ({}, {})",
                self.high_channels, self.low_channels, hs[2], ls[2]
            )));
        }
        let up = tape.upsample_bilinear_2x(v_high);
        let cat = tape.concat(up, v_low, 2);
        Ok(pointwise(tape, store, &self.map, cat))
    }
}

/// Vision self-attention with position-augmented query/key and a
/// norm-then-add residual: `LayerNorm(MHSA(f_v)) + f_v`.
#[derive(Debug, Clone)]
pub struct VisionSelfAttention {
    pub mha: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl VisionSelfAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        num_heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::init(
                store,
                rng,
                &format!("{name}.mha"),
                channels,
                channels,
                channels,
                num_heads,
            )?,
            norm: LayerNorm::init(store, &format!("{name}.norm"), channels),
        })
    }

    pub fn param_count(&self) -> usize {
        self.mha.param_count() + self.norm.param_count()
    }

    /// `f_v: (H, W, C)`; `pos_v` must match the flattened `(H*W, C)` shape.
    /// Query and key carry the position encoding; value is the raw feature.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_v: TensorRef,
        pos_v: &PositionEncoding,
        dropout: &mut Option<&mut DropoutState>,
    ) -> Result<TensorRef> {
        let (h, w, c) = dims3(tape, f_v)?;
        if pos_v.data.dim() != (h * w, c) {
            return Err(Error::shape(format!(
                "position encoding {:?} does not match flattened feature ({}, {})",
                pos_v.data.dim(),
                h * w,
                c
            )));
        }
        let flat = tape.reshape(f_v, &[h * w, c]);
        let pos = tape.constant(pos_v.data.clone().into_dyn());
        let qk = tape.add(flat, pos);
        let attn = self.mha.forward(tape, store, qk, qk, flat)?;
        let dropped = maybe_dropout(tape, attn.out, dropout);
        let normed = self.norm.forward(tape, store, dropped);
        let residual = tape.add(normed, flat);
        Ok(tape.reshape(residual, &[h, w, c]))
    }
}

/// Text-to-vision cross-attention: `LayerNorm(MHCA(f_t, f_v')) + f_t`
/// with text positions on the query and image positions on the key.
#[derive(Debug, Clone)]
pub struct TextToVisionAttention {
    pub mha: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl TextToVisionAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        num_heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::init(
                store,
                rng,
                &format!("{name}.mha"),
                channels,
                channels,
                channels,
                num_heads,
            )?,
            norm: LayerNorm::init(store, &format!("{name}.norm"), channels),
        })
    }

    pub fn param_count(&self) -> usize {
        self.mha.param_count() + self.norm.param_count()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_t: TensorRef,
        f_v_prime: TensorRef,
        pos_t: &PositionEncoding,
        pos_v: &PositionEncoding,
        dropout: &mut Option<&mut DropoutState>,
    ) -> Result<TensorRef> {
        let ts = tape.shape(f_t).to_vec();
        let (h, w, c) = dims3(tape, f_v_prime)?;
        if ts.len() != 2 || ts[1] != c {
            return Err(Error::shape(format!(
                "text channels {ts:?} must match decoder channels {c}"
            )));
        }
        let flat = tape.reshape(f_v_prime, &[h * w, c]);
        let pt = tape.constant(pos_t.data.clone().into_dyn());
        let pv = tape.constant(pos_v.data.clone().into_dyn());
        let q = tape.add(f_t, pt);
        let k = tape.add(flat, pv);
        let attn = self.mha.forward(tape, store, q, k, flat)?;
        let dropped = maybe_dropout(tape, attn.out, dropout);
        let normed = self.norm.forward(tape, store, dropped);
        Ok(tape.add(normed, f_t))
    }
}

/// Vision-to-text cross-attention: `LayerNorm(MHCA(f_v', f_t')) + f_v'`
/// with image positions on the query and text positions on the key.
#[derive(Debug, Clone)]
pub struct VisionToTextAttention {
    pub mha: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl VisionToTextAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        num_heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::init(
                store,
                rng,
                &format!("{name}.mha"),
                channels,
                channels,
                channels,
                num_heads,
            )?,
            norm: LayerNorm::init(store, &format!("{name}.norm"), channels),
        })
    }

    pub fn param_count(&self) -> usize {
        self.mha.param_count() + self.norm.param_count()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_v_prime: TensorRef,
        f_t_prime: TensorRef,
        pos_v: &PositionEncoding,
        pos_t: &PositionEncoding,
        dropout: &mut Option<&mut DropoutState>,
    ) -> Result<TensorRef> {
        let (h, w, c) = dims3(tape, f_v_prime)?;
        let ts = tape.shape(f_t_prime).to_vec();
        if ts.len() != 2 || ts[1] != c {
            return Err(Error::shape(format!(
                "text channels {ts:?} must match decoder channels {c}"
            )));
        }
        let flat = tape.reshape(f_v_prime, &[h * w, c]);
        let pv = tape.constant(pos_v.data.clone().into_dyn());
        let pt = tape.constant(pos_t.data.clone().into_dyn());
        let q = tape.add(flat, pv);
        let k = tape.add(f_t_prime, pt);
        let attn = self.mha.forward(tape, store, q, k, f_t_prime)?;
        let dropped = maybe_dropout(tape, attn.out, dropout);
        let normed = self.norm.forward(tape, store, dropped);
        let residual = tape.add(normed, flat);
        Ok(tape.reshape(residual, &[h, w, c]))
    }
}

/// Channel attention: global average and max pools through a shared
/// bottleneck map, summed, squashed to a per-channel gate in (0, 1).
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub mode: ChannelAttnMode,
    pub channels: usize,
}

/// Channel-attention output plus the gate vector node for inspection.
pub struct ChannelAttentionOutput {
    pub out: TensorRef,
    pub gate: TensorRef,
}

impl ChannelAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
        mode: ChannelAttnMode,
    ) -> Result<Self> {
        if channels % reduction != 0 {
            return Err(Error::config(format!(
                "channel attention reduction {reduction} must divide channels {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::init(store, rng, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::init(store, rng, &format!("{name}.fc2"), hidden, channels),
            mode,
            channels,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_mix: TensorRef,
    ) -> Result<ChannelAttentionOutput> {
        let (_, _, c) = dims3(tape, f_mix)?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let avg = tape.global_avg_pool(f_mix);
        let max = tape.global_max_pool(f_mix);
        let avg_row = tape.reshape(avg, &[1, c]);
        let max_row = tape.reshape(max, &[1, c]);
        // GELU in the bottleneck: smooth, so no hidden unit can start dead
        let bottleneck = |tape: &mut Tape, x: TensorRef| -> TensorRef {
            let h = self.fc1.forward(tape, store, x);
            let h = tape.gelu(h);
            self.fc2.forward(tape, store, h)
        };
        let a = bottleneck(tape, avg_row);
        let m = bottleneck(tape, max_row);
        let summed = tape.add(a, m);
        let gate = tape.sigmoid(summed); // (1, C), broadcasts over (H, W, C)
        let out = match self.mode {
            ChannelAttnMode::AddAsWritten => tape.add(f_mix, gate),
            ChannelAttnMode::ScaleCbam => {
                let scaled = tape.mul(f_mix, gate);
                tape.add(scaled, f_mix)
            }
        };
        Ok(ChannelAttentionOutput { out, gate })
    }
}

/// Which sub-blocks of the hybrid layer are wired in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TvhaWiring {
    pub use_cma: bool,
    pub use_ca: bool,
}

impl TvhaWiring {
    pub fn full() -> Self {
        Self {
            use_cma: true,
            use_ca: true,
        }
    }
}

/// One text-vision hybrid attention decoder layer.
///
/// Composes level fusion, text projection, vision self-attention, the two
/// cross-attentions, and channel attention. With `use_cma` off only fusion
/// and channel attention remain; with `use_ca` off the gate is skipped.
pub struct TvhaLayer {
    pub index: usize,
    pub fusion: LevelFusion,
    pub projection: Option<TextProjection>,
    pub self_attn: Option<VisionSelfAttention>,
    pub text_to_vision: Option<TextToVisionAttention>,
    pub vision_to_text: Option<VisionToTextAttention>,
    pub channel_attn: Option<ChannelAttention>,
    pub out_channels: usize,
}

impl TvhaLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        index: usize,
        high_channels: usize,
        low_channels: usize,
        text_channels: usize,
        cfg: &AttentionConfig,
        wiring: TvhaWiring,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels_per_layer[index];
        let fusion = LevelFusion::init(
            store,
            rng,
            &format!("{name}.fuse"),
            high_channels,
            low_channels,
            c,
        );
        let (projection, self_attn, text_to_vision, vision_to_text) = if wiring.use_cma {
            (
                Some(TextProjection::init(
                    store,
                    rng,
                    &format!("{name}.proj"),
                    text_channels,
                    c,
                )),
                Some(VisionSelfAttention::init(
                    store,
                    rng,
                    &format!("{name}.self_attn"),
                    c,
                    cfg.num_heads,
                )?),
                Some(TextToVisionAttention::init(
                    store,
                    rng,
                    &format!("{name}.t2v"),
                    c,
                    cfg.num_heads,
                )?),
                Some(VisionToTextAttention::init(
                    store,
                    rng,
                    &format!("{name}.v2t"),
                    c,
                    cfg.num_heads,
                )?),
            )
        } else {
            (None, None, None, None)
        };
        let channel_attn = if wiring.use_ca {
            Some(ChannelAttention::init(
                store,
                rng,
                &format!("{name}.ca"),
                c,
                cfg.channel_attn_reduction,
                cfg.channel_attn_mode,
            )?)
        } else {
            None
        };
        Ok(Self {
            index,
            fusion,
            projection,
            self_attn,
            text_to_vision,
            vision_to_text,
            channel_attn,
            out_channels: c,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fusion.param_count()
            + self.projection.as_ref().map_or(0, |p| p.param_count())
            + self.self_attn.as_ref().map_or(0, |p| p.param_count())
            + self.text_to_vision.as_ref().map_or(0, |p| p.param_count())
            + self.vision_to_text.as_ref().map_or(0, |p| p.param_count())
            + self.channel_attn.as_ref().map_or(0, |p| p.param_count())
    }

    /// Run the layer. `text` must be `Some` when the cross-modal blocks are
    /// wired in. Returns the layer output at `v_low`'s spatial resolution.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        v_high: TensorRef,
        v_low: TensorRef,
        text: Option<TensorRef>,
        dropout: &mut Option<&mut DropoutState>,
    ) -> Result<TensorRef> {
        self.forward_inner(tape, store, v_high, v_low, text, dropout)
            .map_err(|e| e.in_layer(self.index))
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        v_high: TensorRef,
        v_low: TensorRef,
        text: Option<TensorRef>,
        dropout: &mut Option<&mut DropoutState>,
    ) -> Result<TensorRef> {
        let fused = self.fusion.forward(tape, store, v_high, v_low)?;
        let (h, w, c) = dims3(tape, fused)?;
        let mut mixed = fused;
        if let (Some(proj), Some(sa), Some(t2v), Some(v2t)) = (
            &self.projection,
            &self.self_attn,
            &self.text_to_vision,
            &self.vision_to_text,
        ) {
            let text = text.ok_or_else(|| {
                Error::config("cross-modal blocks require a text embedding".to_string())
            })?;
            let f_t = proj.forward(tape, store, text)?;
            let l = tape.shape(f_t)[0];
            let pos_v = PositionEncoding::spatial_sinusoidal(h, w, c);
            let pos_t = PositionEncoding::token_sinusoidal(l, c);
            let f_v_prime = sa.forward(tape, store, mixed, &pos_v, dropout)?;
            let f_t_prime = t2v.forward(tape, store, f_t, f_v_prime, &pos_t, &pos_v, dropout)?;
            mixed = v2t.forward(tape, store, f_v_prime, f_t_prime, &pos_v, &pos_t, dropout)?;
        }
        if let Some(ca) = &self.channel_attn {
            mixed = ca.forward(tape, store, mixed)?.out;
        }
        Ok(mixed)
    }
}

pub(crate) fn dims3(tape: &Tape, r: TensorRef) -> Result<(usize, usize, usize)> {
    let s = tape.shape(r);
    if s.len() != 3 {
        return Err(Error::shape(format!("expected (H, W, C), got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}
