pub mod alignment;
pub mod autograd;
pub mod bbox;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grammar;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod teacher;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
