pub mod complexity;
pub mod efficiency;
pub mod error;
pub mod experts;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod routing;
pub mod taskgen;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
