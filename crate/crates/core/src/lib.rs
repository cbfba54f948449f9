//! ConvPrompt continual learning on a small frozen vision transformer.

pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod method;
pub mod metrics;
pub mod ops;
pub mod optimizer;
pub mod prompt;
pub mod registry;
pub mod session;
pub mod similarity;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
