//! Driven vibronic monomer in a Drude–Lorentz bath: hierarchical equations of
//! motion, photon and phonon detection, and two-time correlation functions.

pub mod bath;
pub mod correlations;
pub mod error;
pub mod heom;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod trace_io;
pub mod units;

pub use bath::{BathParams, ExponentialMode};
pub use correlations::{
    classify_bunching, normalization_reference, spectrum, steady_state_time, Bunching, CorrelationTrace, Detector,
    PhononBasis, ReferenceRule, Simulator,
};
pub use error::{Error, Result};
pub use heom::{AdoHierarchy, Integrator, Propagator, PropagatorConfig};
pub use model::{DensityMatrix, DriveField, VibronicParams};
pub use oracle::OracleReport;
