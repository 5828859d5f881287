//! Three-layer convolutional network: 9x9 feature extraction, 1x1
//! non-linear mapping, 5x5 reconstruction, each followed by ReLU.
//!
//! Convolutions are valid (unpadded) cross-correlations, so a network with
//! kernels 9/1/5 shrinks its input by 12 pixels per axis. Training and
//! inference run in `f64`; model files store `f32`.

mod infer;
mod io;
mod layer;
mod model;
mod tensor;
mod train;

use thiserror::Error;

pub use infer::{denoise_image, refine, INFERENCE_PATCH};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC};
pub use layer::{conv2d_valid, relu, ConvLayer};
pub use model::{backward, forward, mse_loss, Architecture, CnnModel, Gradients, ModelMeta};
pub use tensor::Tensor3;
pub use train::{
    build_samples, train, train_on_samples, LossRecord, Optimizer, TrainConfig, TrainOutcome,
    TrainingSet,
};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("image {width}x{height} too small: {reason}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        reason: String,
    },
    #[error("bad model magic (expected NLSFCNN1)")]
    BadMagic,
    #[error("model file truncated: needed {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("model architecture mismatch: {0}")]
    Architecture(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Nlsf(#[from] crate::nlsf::NlsfError),
    #[error(transparent)]
    Noise(#[from] crate::noise::NoiseError),
}

pub type Result<T> = std::result::Result<T, CnnError>;
