//! Toy referring-segmentation and region-description pipeline.
//!
//! Two frozen patch encoders (semantic and pixel) are fused by cross
//! attention, a small causal language model reads the fused image tokens
//! interleaved with text, and every `<seg>` hidden state is decoded into a
//! mask over the pixel features. With local coupling enabled, each mask's
//! region is cropped, re-encoded and spliced back into the sequence before
//! the model describes it.
//!
//! Everything runs on a small f64 reverse-mode autodiff tape.

pub mod attr_eval;
pub mod autograd;
pub mod config;
pub mod conformance;
pub mod decoder;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod image;
pub mod lm;
pub mod losses;
pub mod metrics;
mod nn;
pub mod params;
pub mod sefe;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use config::{LossConfig, ModelConfig, RunConfig};
pub use error::{LiraError, Result};
pub use generation::{generate, GenerateOptions, GenerationResult, Lira, Task};
pub use image::{BinaryMask, ImageBuffer, MaskMap};
pub use params::ParamStore;
pub use tensor::Tensor;
pub use vocab::Vocab;
