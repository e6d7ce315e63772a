pub mod augmentation;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod network;
pub mod par;
pub mod prototypes;
pub mod sampling;
pub mod synthdata;
pub mod tape;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
