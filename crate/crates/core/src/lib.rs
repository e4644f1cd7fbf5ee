pub mod ais;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod image_io;
pub mod latent;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rbm;
pub mod relaxation;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tape, Tensor, Var};
