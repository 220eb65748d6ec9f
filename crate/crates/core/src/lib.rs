//! Cook's distance, degree of perturbation and bootstrap-scaled influence
//! diagnostics for linear regression and the Gaussian random-intercept
//! linear mixed model.

pub mod approx;
pub mod bootstrap;
pub mod data;
pub mod deletion;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod model;
pub mod perturbation;
pub mod report;
pub mod rng;
pub mod scenario;

pub use data::{Cluster, ClusteredData, CrossSectionData, Dataset};
pub use error::{Error, Result};
pub use model::{FitOptions, FitResult, InfoMode, Interest, ModelKind, Theta, ThetaLm, ThetaLmm};
