//! Weakly-supervised lesion segmentation from text cues.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`pseudo`]: text cue -> scored boxes -> box-prompted pseudo-masks,
//!   behind pluggable converter/masker interfaces with deterministic mocks;
//! - [`attention`]: the text-vision hybrid attention decoder layer (text
//!   projection, dual-way cross-modal attention, channel attention) built on
//!   the reverse-mode [`autodiff`] tape;
//! - [`model`]: the text-guided segmentation network with its feature
//!   pyramid encoder, text encoder, and subpixel-upsample head;
//! - [`data`]: grounding records, deterministic splits, resizing, image and
//!   mask files;
//! - [`metrics`]: per-image IoU/Dice and macro means;
//! - [`train`]: loss, schedulers, the training loop, checkpoints, and the
//!   ablation grid;
//! - [`synth`]: the synthetic blob corpus used for tests and demos.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pseudo;
pub mod synth;
pub mod train;
pub mod types;

pub use attention::{
    AttentionConfig, ChannelAttnMode, PositionEncoding, SpatialFeature, TokenSequence,
};
pub use error::{Error, Result};
pub use model::{Ablation, FeaturePyramid, MaskLogits, ModelConfig, SegModel};
pub use pseudo::{CueConverter, MaskGenerator, ScoredBox};
pub use types::{ImageTensor, PseudoMask};
