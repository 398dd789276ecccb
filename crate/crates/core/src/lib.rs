pub mod container;
pub mod ctc;
pub mod error;
pub mod harness;
pub mod lid;
pub mod model;
pub mod pele;
pub mod peft;
pub mod synthlang;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
