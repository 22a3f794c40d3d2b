//! Two-step semiparametric pseudo-maximum-likelihood estimation of single-index models.
//!
//! The model is `E(Y | Z) = r(Z' theta)` with an unknown link `r` and a variance
//! condition `Var(Y | Z) = g(r, alpha)`. Step 1 fits `theta` with a Poisson or
//! least-squares pseudo-likelihood at a pilot bandwidth; Step 2 re-estimates
//! `theta` jointly with the bandwidth under the family implied by `g`.
//!
//! ```no_run
//! use sipml::{fit, Dataset, Family, FitConfig};
//!
//! let data = Dataset::from_rows(vec![0.0, 2.0, 1.0], &[vec![0.1, 1.0], vec![0.7, -0.2], vec![0.3, 0.4]])?;
//! let result = fit(&data, &FitConfig::new(Family::NegBin))?;
//! println!("{:?} h = {}", result.theta_hat.full(), result.h_hat);
//! # Ok::<(), sipml::Error>(())
//! ```

pub mod data;
pub mod error;
pub mod estimation;
pub mod family;
pub mod gof;
pub mod inference;
pub mod kernel;
pub mod optimize;
pub mod pilot;
pub mod simulation;

pub use data::{Dataset, IndexParam};
pub use error::{Error, Result};
pub use estimation::{fit, FitConfig, FitResult, SearchDomain, Step1Criterion};
pub use family::{Family, NuisanceParam};
pub use gof::{gof_report, GofReport};
pub use inference::{bandwidth_diagnostics, link_band, sandwich_from_fit, LinkBand, VcovResult};
pub use kernel::{kernel_constants, kernel_eval, nw_smooth, nw_smooth_loo, KernelConstants, SmootherOutput};
pub use simulation::{run_monte_carlo, Estimator, McSummary, SimConfig};
