//! Bayesian spatial estimation of fire-contributed PM2.5.
//!
//! Monitor observations are fused with paired fire / no-fire numerical-model
//! fields through spatially varying bias fields and a bivariate Gaussian
//! error process. The posterior is explored by Gibbs sampling, the causal
//! effect is Kriged to a grid and converted into excess hospitalizations.

pub mod burden;
pub mod crossval;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gibbs;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod ols;
pub mod pipeline;
pub mod rng;
pub mod spatial;
pub mod synth;

pub use data::{PanelDataset, RegionBlock};
pub use error::{Error, Result};
pub use spatial::{CovarianceParams, SiteSet, Variogram};
