//! Numerical tools for backward stochastic differential equations driven by
//! Lévy processes with atomic jump measures and locally Lipschitz generators.
//!
//! * [`levy`]: triplets, time grids, path bundles, path shifts.
//! * [`generator`]: structured generators, bound certificates, truncation.
//! * [`solver`]: lattice dynamic programming, Picard regression Monte Carlo,
//!   closed-form envelopes.
//! * [`verify`]: bound, comparison and sandwich checks.
//! * [`malliavin`]: difference-operator derivatives and the derivative BSDE.
//! * [`hgen`]: exponential-utility type generators and their cutoff limit.
//! * [`pdie`]: finite differences for the associated integro-differential
//!   equation.

pub mod error;
pub mod generator;
pub mod hgen;
pub mod interp;
pub mod io;
pub mod levy;
pub mod malliavin;
pub mod par;
pub mod pdie;
pub mod quad;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
pub use generator::{BoundCertificate, GeneratorSpec, TerminalSpec};
pub use levy::{Atom, LevyTriplet, PathBundle, TimeGrid};
pub use par::Execution;
pub use solver::{DiscreteSolution, ForwardSpec};
