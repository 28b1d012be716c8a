//! Score-based vector approximate message passing (SC-VAMP).
//!
//! Two soft-in/soft-out modules exchange extrinsic Gaussian messages. Each
//! module computes its posterior mean with Tweedie's formula from a score
//! function and its Onsager coefficient from the Fisher information of that
//! score, so no Jacobian of the estimator is ever formed. Scores can be
//! analytic, learned by denoising score matching, recovered from a black-box
//! denoiser, or computed from Langevin posterior samples.
//!
//! Batches of problem instances are stored as column-major matrices whose
//! columns are instances; all instances in a batch share one message variance.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod dsm;
pub mod error;
pub mod langevin;
pub mod numerics;
pub mod quadrature;
pub mod score;
pub mod siso;
pub mod state_evolution;
pub mod vamp;

pub use error::{Error, Result};
