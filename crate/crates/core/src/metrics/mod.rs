//! Quantities computed from effective receptive fields.

mod fit;
mod imbalance;
mod linear;

pub use fit::{fit_gaussian, fit_gaussian_at, Gauss2DFit, MAX_ITERATIONS, REL_TOL};
pub use imbalance::{imbalance, ImbalanceIndices};
pub use linear::{build_linear_model, image_intercept, FixedLinearModel, PerturbationSpec};
