pub mod capgen;
pub mod checkpoint;
pub mod diversity;
pub mod error;
pub mod lm;
pub mod numerics;
pub mod pipeline;
pub mod shapes;
pub mod t2igen;
pub mod vlm;
pub mod vq;

pub use error::{Error, Result};
