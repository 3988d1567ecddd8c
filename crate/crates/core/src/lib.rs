pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geom;
pub mod image;
pub mod losses;
pub mod model;
pub mod rankgen;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Real, Tensor, Var};
