use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    ShapeMismatch {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("element count mismatch: shape {shape:?} holds {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "resolution mismatch: this network was built for {expected_h}x{expected_w} inputs, got \
         {actual_h}x{actual_w}; crop/pad to the patch size or use tiled inference"
    )]
    Resolution {
        expected_h: usize,
        expected_w: usize,
        actual_h: usize,
        actual_w: usize,
    },

    #[error("image {height}x{width} is smaller than the {patch_h}x{patch_w} patch; pad it first")]
    ImageTooSmall {
        height: usize,
        width: usize,
        patch_h: usize,
        patch_w: usize,
    },

    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),

    #[error("non-finite loss {loss} at step {step} (lr {lr:e}, grad-norm {grad_norm:e})")]
    NonFiniteLoss {
        step: u64,
        lr: f64,
        loss: f64,
        grad_norm: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(lhs: &[usize], rhs: &[usize], context: &'static str) -> Self {
        Error::ShapeMismatch {
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            context,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
