//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by failure class so callers (notably the CLI) can
/// map them onto exit codes: data/shape/config/parse problems are data
/// errors, `Numeric` signals a numerical failure (NaN loss, non-finite
/// input), and `Io`/`Image` wrap the underlying decoding layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes are inconsistent with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input values are outside the numeric domain (NaN, infinity, range).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A structured record failed to parse; carries a locatable position.
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    /// Token id outside the configured vocabulary.
    #[error("tokenization error: id {id} at position {position} is outside vocabulary of size {vocab_size}")]
    Tokenize {
        id: usize,
        position: usize,
        vocab_size: usize,
    },

    /// A word the tokenizer does not know.
    #[error("tokenization error: unknown word `{word}` at position {position}")]
    UnknownWord { word: String, position: usize },

    /// A named component (converter, masker) is not registered.
    #[error("unknown component `{name}`; available: {available}")]
    UnknownComponent { name: String, available: String },

    /// An error raised inside decoder layer `index`.
    #[error("decoder layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attach a decoder layer index to an error bubbling out of a sub-block.
    pub fn in_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
