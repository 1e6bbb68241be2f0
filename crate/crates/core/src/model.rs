//! The text-guided segmentation network: a strided convolutional feature
//! pyramid, a small text encoder, three hybrid-attention decoder layers, and
//! a subpixel-upsample head producing full-resolution mask logits.

use crate::attention::{
    dims3, AttentionConfig, DropoutState, MultiHeadAttention, PositionEncoding, SpatialFeature,
    TokenSequence, TvhaLayer, TvhaWiring,
};
use crate::autodiff::{sigmoid, Tape, TensorRef};
use crate::error::{Error, Result};
use crate::nn::{pointwise, seeded_rng, Conv2d, Embedding, LayerNorm, Linear, ParamStore};
use crate::types::{ImageTensor, PseudoMask};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Ablation variants mirroring the model comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full hybrid-attention decoder.
    Full,
    /// Plain fuse-and-map decoder (UNet-style); no attention, no text.
    NoTvha,
    /// Keep fusion and channel attention; drop the cross-modal blocks.
    NoCma,
    /// Keep the cross-modal blocks; drop channel attention.
    NoCa,
}

impl Ablation {
    pub fn all() -> [Ablation; 4] {
        [Ablation::Full, Ablation::NoTvha, Ablation::NoCma, Ablation::NoCa]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTvha => "no_tvha",
            Ablation::NoCma => "no_cma",
            Ablation::NoCa => "no_ca",
        }
    }

    /// Whether the decoder consumes text at all.
    pub fn uses_text(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoCa)
    }
}

/// Model hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image size `(H, W)`; both divisible by 32.
    pub image_size: (usize, usize),
    /// Encoder channels at 1/4, 1/8, 1/16, 1/32 scale.
    pub pyramid_channels: [usize; 4],
    pub attention: AttentionConfig,
    pub ablation: Ablation,
    pub text_vocab_size: usize,
    /// Text embedding width fed to the decoder's projection layers.
    pub text_channels: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: (384, 384),
            pyramid_channels: [32, 64, 128, 256],
            attention: AttentionConfig::default(),
            ablation: Ablation::Full,
            text_vocab_size: crate::synth::Vocab::default_vocab().len(),
            text_channels: 64,
            max_text_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "image_size ({h}, {w}) must be positive and divisible by 32"
            )));
        }
        if self.pyramid_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("pyramid_channels must be positive".to_string()));
        }
        self.attention.validate()?;
        for (j, &c) in self.attention.channels_per_layer.iter().enumerate() {
            if c % self.attention.channel_attn_reduction != 0 {
                return Err(Error::config(format!(
                    "channels_per_layer[{j}] = {c} not divisible by channel_attn_reduction {}",
                    self.attention.channel_attn_reduction
                )));
            }
        }
        if self.text_vocab_size == 0 || self.text_channels == 0 || self.max_text_len == 0 {
            return Err(Error::config(
                "text_vocab_size, text_channels, max_text_len must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// A small configuration for fast tests: 2 heads, narrow channels.
    pub fn toy(image_size: (usize, usize)) -> Self {
        Self {
            image_size,
            pyramid_channels: [8, 12, 16, 24],
            attention: AttentionConfig {
                num_heads: 2,
                channels_per_layer: [16, 8, 8],
                channel_attn_reduction: 4,
                ..AttentionConfig::default()
            },
            text_channels: 16,
            ..Self::default()
        }
    }
}

/// The four-level encoder output at 1/4, 1/8, 1/16, 1/32 scale.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub v1: SpatialFeature,
    pub v2: SpatialFeature,
    pub v3: SpatialFeature,
    pub v4: SpatialFeature,
}

/// Unbounded per-pixel logits, `(H, W)` (single mask channel implicit).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    data: Array2<f64>,
}

impl MaskLogits {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("mask logits contain non-finite entries".to_string()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

/// Threshold `sigmoid(logits)` at `threshold` (strictly greater) into a
/// binary mask. Default threshold 0.5.
pub fn predict_mask(logits: &MaskLogits, threshold: f64) -> Result<PseudoMask> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::config(format!(
            "mask threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let bin = logits
        .data
        .mapv(|x| if sigmoid(x) > threshold { 1u8 } else { 0u8 });
    PseudoMask::new(bin)
}

struct EncoderStage {
    down: Conv2d,
    refine: Conv2d,
}

/// Small strided convolutional pyramid: stage 1 patchifies 4x, stages 2-4
/// halve the resolution, each followed by a 3x3 refinement.
pub struct VisionEncoder {
    stages: Vec<EncoderStage>,
}

impl VisionEncoder {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: [usize; 4]) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            let k = if i == 0 { 4 } else { 2 };
            let down = Conv2d::init(
                store,
                rng,
                &format!("{name}.stage{}.down", i + 1),
                k,
                k,
                cin,
                cout,
                k,
                0,
            );
            let refine = Conv2d::init(
                store,
                rng,
                &format!("{name}.stage{}.refine", i + 1),
                3,
                3,
                cout,
                cout,
                1,
                1,
            );
            stages.push(EncoderStage { down, refine });
            cin = cout;
        }
        Self { stages }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, image: TensorRef) -> Vec<TensorRef> {
        let mut levels = Vec::with_capacity(4);
        let mut x = image;
        for stage in &self.stages {
            x = stage.down.forward(tape, store, x);
            x = tape.gelu(x);
            x = stage.refine.forward(tape, store, x);
            x = tape.gelu(x);
            levels.push(x);
        }
        levels
    }
}

struct TextBlock {
    mha: MultiHeadAttention,
    norm: LayerNorm,
}

/// Learned embedding table plus a small self-attention stack. Frozen during
/// training by default (parameter names carry the `text.` prefix).
pub struct TextEncoder {
    embed: Embedding,
    blocks: Vec<TextBlock>,
    channels: usize,
}

impl TextEncoder {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        channels: usize,
        depth: usize,
    ) -> Result<Self> {
        // Text attention head count: channels are small, use 2 when possible.
        let heads = if channels % 2 == 0 { 2 } else { 1 };
        let embed = Embedding::init(store, rng, &format!("{name}.embed"), vocab, channels);
        let mut blocks = Vec::new();
        for b in 0..depth {
            blocks.push(TextBlock {
                mha: MultiHeadAttention::init(
                    store,
                    rng,
                    &format!("{name}.block{b}.mha"),
                    channels,
                    channels,
                    channels,
                    heads,
                )?,
                norm: LayerNorm::init(store, &format!("{name}.block{b}.norm"), channels),
            });
        }
        Ok(Self {
            embed,
            blocks,
            channels,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<TensorRef> {
        let mut x = self.embed.forward(tape, store, ids)?;
        let pos = PositionEncoding::token_sinusoidal(ids.len(), self.channels);
        for block in &self.blocks {
            let p = tape.constant(pos.data().clone().into_dyn());
            let qk = tape.add(x, p);
            let attn = block.mha.forward(tape, store, qk, qk, x)?;
            let normed = block.norm.forward(tape, store, attn.out);
            x = tape.add(normed, x);
        }
        Ok(x)
    }
}

enum DecoderLayer {
    Hybrid(TvhaLayer),
    /// Fusion only: upsample + concatenate + learned channel map.
    FuseOnly(crate::attention::LevelFusion),
}

struct SubpixelHead {
    expand: Linear,
    to_logit: Linear,
}

/// The full model: parameters plus wiring.
pub struct SegModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    vision: VisionEncoder,
    text: Option<TextEncoder>,
    layers: Vec<DecoderLayer>,
    head: SubpixelHead,
}

impl SegModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let vision = VisionEncoder::init(&mut store, &mut rng, "vision", config.pyramid_channels);
        let text = if config.ablation.uses_text() {
            Some(TextEncoder::init(
                &mut store,
                &mut rng,
                "text",
                config.text_vocab_size,
                config.text_channels,
                2,
            )?)
        } else {
            None
        };

        let [c1, c2, c3, c4] = config.pyramid_channels;
        let layer_io = [
            (c4, c3), // decoder layer 1: (v4, v3)
            (config.attention.channels_per_layer[0], c2),
            (config.attention.channels_per_layer[1], c1),
        ];
        let mut layers = Vec::new();
        for (i, &(high, low)) in layer_io.iter().enumerate() {
            let name = format!("decoder.layer{}", i + 1);
            let layer = match config.ablation {
                Ablation::NoTvha => DecoderLayer::FuseOnly(crate::attention::LevelFusion::init(
                    &mut store,
                    &mut rng,
                    &format!("{name}.fuse"),
                    high,
                    low,
                    config.attention.channels_per_layer[i],
                )),
                ablation => {
                    let wiring = TvhaWiring {
                        use_cma: ablation != Ablation::NoCma,
                        use_ca: ablation != Ablation::NoCa,
                    };
                    DecoderLayer::Hybrid(TvhaLayer::init(
                        &mut store,
                        &mut rng,
                        &name,
                        i,
                        high,
                        low,
                        config.text_channels,
                        &config.attention,
                        wiring,
                    )?)
                }
            };
            layers.push(layer);
        }

        let c_last = config.attention.channels_per_layer[2];
        let head = SubpixelHead {
            expand: Linear::init(&mut store, &mut rng, "head.expand", c_last, 16 * c_last),
            to_logit: Linear::init(&mut store, &mut rng, "head.to_logit", c_last, 1),
        };

        Ok(Self {
            config,
            store,
            vision,
            text,
            layers,
            head,
        })
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.store.total_len()
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let (h, w) = (image.height(), image.width());
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "image dims ({h}, {w}) must be divisible by 32 for the 1/4..1/32 pyramid"
            )));
        }
        Ok(())
    }

    fn check_text(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_text_len {
            return Err(Error::config(format!(
                "text length {} outside 1..={}",
                ids.len(),
                self.config.max_text_len
            )));
        }
        Ok(())
    }

    /// Encode an image into the four-level pyramid (no gradient recording).
    pub fn encode_image(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let img = tape.constant(image.data().clone().into_dyn());
        let levels = self.vision.forward(&mut tape, &self.store, img);
        let take = |r: TensorRef| -> SpatialFeature {
            SpatialFeature::new(
                tape.value(r)
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap(),
            )
            .expect("encoder output valid")
        };
        Ok(FeaturePyramid {
            v1: take(levels[0]),
            v2: take(levels[1]),
            v3: take(levels[2]),
            v4: take(levels[3]),
        })
    }

    /// Encode token ids into an `(L, C)` embedding.
    pub fn encode_text(&self, ids: &[usize]) -> Result<TokenSequence> {
        self.check_text(ids)?;
        let text = self.text.as_ref().ok_or_else(|| {
            Error::config(format!(
                "ablation {} has no text branch",
                self.config.ablation.name()
            ))
        })?;
        let mut tape = Tape::new();
        let out = text.forward(&mut tape, &self.store, ids)?;
        TokenSequence::new(
            tape.value(out)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap(),
        )
    }

    /// Record the full forward pass on `tape`, returning the logits node of
    /// shape `(H, W)`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        image: &ImageTensor,
        ids: &[usize],
        dropout: &mut Option<&mut DropoutState>,
    ) -> Result<TensorRef> {
        self.check_image(image)?;
        let img = tape.constant(image.data().clone().into_dyn());
        let levels = self.vision.forward(tape, &self.store, img);

        let text_ref = match &self.text {
            Some(encoder) => {
                self.check_text(ids)?;
                Some(encoder.forward(tape, &self.store, ids)?)
            }
            None => None,
        };

        // layer 1: (v4, v3); layer 2: (out, v2); layer 3: (out, v1)
        let lows = [levels[2], levels[1], levels[0]];
        let mut x = levels[3];
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                DecoderLayer::Hybrid(l) => {
                    l.forward(tape, &self.store, x, lows[i], text_ref, dropout)?
                }
                DecoderLayer::FuseOnly(f) => f
                    .forward(tape, &self.store, x, lows[i])
                    .map_err(|e| e.in_layer(i))?,
            };
        }

        // subpixel head: expand channels x16, shuffle x4, map to one logit
        let expanded = pointwise(tape, &self.store, &self.head.expand, x);
        let shuffled = tape.pixel_shuffle(expanded, 4);
        let logits = pointwise(tape, &self.store, &self.head.to_logit, shuffled);
        let (h, w, _) = dims3(tape, logits)?;
        Ok(tape.reshape(logits, &[h, w]))
    }

    /// Deterministic single-sample inference.
    pub fn forward(&self, image: &ImageTensor, ids: &[usize]) -> Result<MaskLogits> {
        let mut tape = Tape::new();
        let mut no_dropout = None;
        let out = self.forward_on_tape(&mut tape, image, ids, &mut no_dropout)?;
        MaskLogits::new(
            tape.value(out)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap(),
        )
    }

    /// Batched inference; samples are independent, so the batch equals the
    /// concatenation of single forwards.
    pub fn forward_batch(
        &self,
        samples: &[(&ImageTensor, &[usize])],
    ) -> Result<Vec<MaskLogits>> {
        samples
            .par_iter()
            .map(|(image, ids)| self.forward(image, ids))
            .collect()
    }
}

impl FeaturePyramid {
    /// Check the exact 1/4, 1/8, 1/16, 1/32 scale contract for an `(H, W)` input.
    pub fn check_scales(&self, h: usize, w: usize) -> Result<()> {
        let expect = [
            (h / 4, w / 4),
            (h / 8, w / 8),
            (h / 16, w / 16),
            (h / 32, w / 32),
        ];
        let got = [
            (self.v1.height(), self.v1.width()),
            (self.v2.height(), self.v2.width()),
            (self.v3.height(), self.v3.width()),
            (self.v4.height(), self.v4.width()),
        ];
        for (i, (e, g)) in expect.iter().zip(got.iter()).enumerate() {
            if e != g {
                return Err(Error::shape(format!(
                    "pyramid level {} is {:?}, expected {:?}",
                    i + 1,
                    g,
                    e
                )));
            }
        }
        Ok(())
    }
}
