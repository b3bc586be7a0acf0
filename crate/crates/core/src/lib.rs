//! Curvature-restricted model editing for small feed-forward networks.
//!
//! The crate fine-tunes a network on an edit objective while confining every
//! update to the low-curvature subspace of a capability loss. Curvature can
//! be modeled exactly (Hessian, Gauss-Newton Hessian) or through
//! Kronecker-factored approximations (K-FAC, EK-FAC) and layer-input
//! activation covariances; projections are applied either densely or
//! matrix-free through the Kronecker eigenstructure.
//!
//! Modules:
//! - [`linalg`]: symmetric eigendecomposition, spectral energy thresholds,
//!   Kronecker spectrum utilities, dense projectors.
//! - [`network`]: explicit feed-forward nets with forward/backward passes,
//!   per-example Jacobians, Hessian-vector products, pseudo-gradients.
//! - [`curvature`]: every curvature model, Bregman divergence evaluation,
//!   streaming factor aggregation, and the binary curvature cache.
//! - [`projection`]: per-layer projector construction and application.
//! - [`editor`]: batch and sequential editing loops with projected
//!   optimizers, drift-triggered refresh, and constraint telemetry.
//! - [`harness`]: datasets, pretraining, the trade-off sweep, and the
//!   runtime verification suite.
//! - [`cli`]: the `crispe` command-line surface.

pub mod cli;
pub(crate) mod bytes;
pub mod curvature;
pub mod editor;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod projection;

pub use error::{Error, Result};
