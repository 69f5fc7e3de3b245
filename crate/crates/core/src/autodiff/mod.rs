//! Reverse-mode differentiation and its finite-difference oracle.

mod gradcheck;
mod tape;

pub use gradcheck::{check_gradient, check_gradient_piecewise, finite_diff_gradcheck, relative_error, GradcheckOptions, GradcheckReport, MIN_SAMPLED_COORDS};
pub use tape::{AttentionStats, BackwardFn, Gradients, Tape, Var};
