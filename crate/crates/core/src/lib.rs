//! Wigner-function propagators for one-dimensional systems.
//!
//! Three routes compute `G_W(r'', t; r', 0)`: the exact quantum route
//! ([`quantum`]), trajectory pairs ([`semiclassical`]) and the classical
//! Liouville flow ([`classical`]). [`verify`] checks their structural
//! properties and [`io`] reads run configurations and grid files.

pub mod classical;
pub mod error;
pub mod io;
pub mod models;
pub mod phase;
pub mod quantum;
pub mod semiclassical;
pub mod verify;

pub use num_complex::Complex64;
pub use error::{Error, Result};
pub use models::{PotentialModel, SystemParams};
pub use phase::{
    ComplexField, OperatorMatrix, PhaseGrid, PhasePoint, QGrid, ScalarField, SymbolNorm, WeylConventions,
};
pub use quantum::{ExactPropagator, PropagatorSlice, Route, SpectralFilter};
