//! Numerical core for over-the-air electromagnetic signal processing.
//!
//! The crate is organised bottom-up:
//!
//! * [`em`]: free-space dyadic Green's function, superposition of Hertzian
//!   current elements, far-field patterns and the visible-region predicate.
//! * [`dof`]: degrees-of-freedom calculators (apertures, links) and the DFT
//!   beam codebook.
//! * [`modes`]: discretised communication modes, water-filling, single-link
//!   and cascade capacity, capacity-optimal scatter matrix.
//! * [`circuit`]: multiport model of port-loaded dipole arrays, reflection
//!   matrix, characteristic-mode loads and the DSA precoder optimizer.
//! * [`sim`]: stacked intelligent metasurfaces: layered Rayleigh-Sommerfeld
//!   propagation, back-propagation training, 2D-DFT DoA estimation.
//! * [`ris`]: anomalous-reflection phase law and array-factor patterns.
//! * [`scm`]: self-conjugating metasurface link driven by the modified power
//!   method.

pub mod circuit;
pub mod dof;
pub mod em;
mod error;
pub mod linalg;
pub mod modes;
pub mod ris;
pub mod rng;
pub mod scm;
pub mod sim;

pub use error::{EspError, Result};
pub use num_complex::Complex64;

/// Library version string stamped into every result record.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
