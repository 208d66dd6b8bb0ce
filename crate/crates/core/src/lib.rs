pub mod controller;
pub mod design;
pub mod disturbance;
pub mod error;
pub mod invariant;
pub mod lti;
pub mod polytope;
pub mod qp;
mod rows;
pub mod sim;
pub mod tightening;

pub use error::{Error, Result};
pub use polytope::Polytope;
