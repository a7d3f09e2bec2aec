//! Conditional normalizing flow for joint low-light enhancement and
//! super-resolution at desk scale, together with the synthetic
//! darkening/ISP degradation pipeline, full-reference metrics, and a
//! training loop — all on a small self-contained tensor library with
//! reverse-mode differentiation.

pub mod autodiff;
pub mod checkpoint;
pub mod crmap;
pub mod degrade;
pub mod encoder;
pub mod imageio;
pub mod metrics;
pub mod selfcheck;
pub mod train;
pub mod flow;
pub mod params;
pub mod tensor;

pub mod rngutil;

pub use tensor::{Result, Scalar, Tensor, TensorError};
