//! Concrete systems: two desk-scale benchmark problems used by the CLI and
//! test suites, plus a linear fixture for exact-arithmetic checks.

pub mod burgers;
pub mod linear;
pub mod shape;

pub use burgers::{make_burgers, BurgersProblem};
pub use shape::{make_shape_diffusion, ShapeDiffusionProblem};
