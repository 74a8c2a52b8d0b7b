//! Free Fock space machinery for correlation-function hierarchies of nonlinear
//! many-constituent dynamics.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: finite index space and numerical kernels (linear part, source,
//!   interaction, Green's function).
//! * [`fock`]: truncated graded vectors, level projectors, symmetrizer.
//! * [`cuntz`]: normal-ordered generator expressions obeying
//!   `η(x)η*(y) = δ(x,y)·I`, and the model operators built from them.
//! * [`op`]: lazily composed operators and block-matrix materialization.
//! * [`inverse`]: explicit right/left inverses, null-space projectors and the
//!   generalized-inverse axiom report.
//! * [`solver`]: the expansion and closure schemes for `(K + N + G)|V⟩ = 0`.
//! * [`oracle`]: ensemble simulation, Monte-Carlo correlation estimates and
//!   analytic reference moments.
//! * [`cli`]: configuration schema and experiment orchestration.

pub mod cli;
pub mod cuntz;
pub mod error;
pub mod fock;
pub mod inverse;
pub mod model;
pub mod op;
pub mod oracle;
pub mod solver;

pub use error::{Error, Result};
