//! Language-conditioned salient object detection at desk scale.
//!
//! The crate bundles a deterministic f64 autodiff engine, a caption encoder,
//! the eCMSA cross-modal attention block with eSE channel attention, toy
//! U-structure segmentation networks with configurable attachment points,
//! the usual SOD metric suite (MaxFb / MAE / MaxEm / Sm / inference time),
//! netpbm data tooling with a synthetic two-blob benchmark, and an
//! AdamW + cosine-schedule training loop.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod attention;
pub mod dataio;
pub mod metrics;
pub mod nets;
pub mod training;
pub mod gradcheck;

pub use error::{Error, Result};
pub use rng::{fnv1a64, Rng};
pub use tensor::Tensor;
