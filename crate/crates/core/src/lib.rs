//! Multilevel null-control synthesis for linear time-invariant systems.
//!
//! A control taking finitely many values and switching only between
//! neighbouring levels is obtained by minimizing a dual functional over the
//! terminal adjoint datum, with a piecewise-linear convex penalization whose
//! slopes are the admissible levels.

pub mod dual;
pub mod error;
pub mod extract;
pub mod fenchel;
pub mod lti;
pub mod numerics;
pub mod pwl;
pub mod solvable;

pub use error::{Error, Result};
