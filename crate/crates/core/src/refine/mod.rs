//! Teacher-update rules: the classical moving average and training-based
//! refinement with learned per-channel scaling coefficients.

mod ema;
mod scaling;
mod tmr;

pub use ema::{ema_step, ema_unrolled};
pub use scaling::{Granularity, ScalingSet, OMEGA_MIN};
pub use tmr::{projected_descent, refine_weights, tmr_loss, tmr_optimize, TmrLoss, TmrOutcome};
