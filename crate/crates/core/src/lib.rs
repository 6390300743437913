pub mod autodiff;
pub mod bound;
pub mod correction;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod grid;
pub mod mfn;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Real, Tensor};
