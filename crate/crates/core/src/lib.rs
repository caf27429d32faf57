//! Nonparametric identification of time-varying contact rates and
//! reproduction numbers from intensive-care occupancy series.
//!
//! The crate is organized bottom-up:
//!
//! * [`sir`]: time-varying SIR simulation, equilibrium initial conditions,
//!   forward sensitivities and conservation diagnostics;
//! * [`kernels`]: stable-spline and Laplacian kernels, Gram matrices and
//!   kernel-section expansions;
//! * [`contact`]: the contact-rate model zoo;
//! * [`optim`]: Nelder–Mead and Levenberg–Marquardt minimizers;
//! * [`estimation`]: parametric least squares, the RKHS-regularized
//!   estimator, evidence-based width selection and the post-lockdown stage;
//! * [`bayes`]: posterior, random-walk Metropolis, pilot tuning and credible
//!   bands;
//! * [`data`]: Civil Protection CSV ingestion, synthetic series and exports.

pub mod bayes;
pub mod contact;
pub mod data;
pub mod error;
pub mod estimation;
pub mod kernels;
pub mod optim;
pub mod sir;

pub use error::{Error, ErrorFamily, Result};
