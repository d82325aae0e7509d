pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod io;
pub mod kernels;
pub mod mask;
pub mod models;
pub mod params;
pub mod partial;
pub mod pvm;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{MaskedTensor, Scalar, Tensor, TokenSequence, ValidityMask};
