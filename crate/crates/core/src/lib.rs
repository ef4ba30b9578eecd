pub mod autograd;
pub mod bitops;
pub mod data;
pub mod blocks;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod graph;
pub mod model_io;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{BatchNormState, ConvParams, Shape, Tensor};
