//! Audio-visual speaker diarization with cross-attention fusion of audio,
//! visual and speaker-identity streams.

pub mod attention;
pub mod augment;
pub mod casa;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod postproc;
pub mod refine;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod timeline;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
pub use timeline::{Segment, Timeline};
