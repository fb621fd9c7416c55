pub mod apl;
pub mod bench;
pub mod config;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod hstm;
pub mod model;
pub mod nn;
pub mod reference;
pub mod routing;
pub mod sparsegraph;
pub mod ssglm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
