//! Flow-based waveform model with an autoregressive height axis.

pub mod autodiff;
pub mod conditioner;
pub mod error;
pub mod flow;
pub mod io;
pub mod kernels;
pub mod model;
pub mod network;
pub mod numeric;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
