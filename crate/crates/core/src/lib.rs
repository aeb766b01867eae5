//! Simulation of a femtosecond-pulsed, crossed-crystal ppKTP source of
//! polarization-entangled photon pairs.
//!
//! * [`polcore`]: two-qubit states, projectors and fidelities (generic scalar).
//! * [`source`]: the crossed-crystal state with dephasing and white noise.
//! * [`measure`]: polarization analyzers, fringe scans and CHSH.
//! * [`tomo`]: linear and maximum-likelihood tomography.
//! * [`counts`]: pulsed pair statistics, accidentals and brightness.
//! * [`spectral`]: joint spectra, Schmidt purity and HOM dips.
//! * [`optics`]: Sellmeier dispersion, QPM periods and compensators.
//!
//! The polarization algebra is generic over [`Real`]; the aliases below fix
//! the scalar type.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod counts;
pub mod error;
pub mod fit;
pub mod measure;
pub mod num;
pub mod optics;
pub mod optimize;
pub mod polcore;
pub mod rng;
pub mod source;
pub mod spectral;
pub mod tomo;

pub use error::{Error, ErrorKind, Result};
pub use num::Real;

pub type Ket4 = polcore::Ket<f64>;
pub type PolState = polcore::DensityMatrix<f64>;
pub type Projector4 = polcore::Projector<f64>;

pub type Ket4F32 = polcore::Ket<f32>;
pub type PolStateF32 = polcore::DensityMatrix<f32>;
pub type Projector4F32 = polcore::Projector<f32>;
