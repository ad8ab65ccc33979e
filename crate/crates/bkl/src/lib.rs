//! Symbolic and numeric machinery for a graded-Lie-algebra formulation of the
//! Einstein equations coupled to a massless scalar field.
//!
//! The central object is a graded Lie algebra built from the rank-16 exterior
//! algebra of a Lorentzian module `W` (signature `-+++`) tensored with an
//! eleven-dimensional algebra of constant derivations, quotiented by an ideal,
//! and extended by a module `Phi` carrying the scalar-field sector.  Solutions
//! of the field equations correspond to degree-one elements `u` with
//! `[u, u] = 0`.  The crate provides:
//!
//! * [`scalar`]: exact differential-polynomial coefficients over arbitrary
//!   precision rationals, a truncated Fourier backend, and numeric sampling.
//! * [`wedge`]: the rank-16 exterior algebra and its Hodge pairing.
//! * [`gla`]: the graded bracket, the ideal reduction onto a distinguished
//!   basis, anchors, frames, and extracted structure tensors.
//! * [`filtration`]: the multi-index filtration, its Rees algebra, and the
//!   associated graded bracket.
//! * [`mc`]: flat-element residuals, gauge actions, the damped leading-order
//!   family, and its constraint equations.
//! * [`formal`]: sector-by-sector formal series solutions with an explicit
//!   contracting homotopy, and numeric truncation of the result.
//! * [`constraints`]: the spatial constraint map on the 3-torus, its symbol,
//!   and a Fourier fixed-point solver for its zero set near anisotropic data.
//! * [`homogeneous`]: mechanical reduction to ordinary differential equations
//!   for spatially homogeneous data, with an adaptive integrator.
//! * [`hyperbolic`]: first-order symmetric hyperbolic evolution on a periodic
//!   grid, gauge verification and search, and flat-element corrections.
//! * [`cli`]: the command-line entry points with reproducible run manifests.

pub mod scalar;
pub mod wedge;
pub mod gla;
pub mod filtration;
pub mod mc;
pub mod formal;
pub mod constraints;
pub mod homogeneous;
pub mod hyperbolic;
pub mod cli;

mod error;
pub use error::{BklError, Result};
