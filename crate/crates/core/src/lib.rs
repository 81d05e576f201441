//! Two-component safe learning-based predictive control.
//!
//! A model-free funnel feedback keeps the output tracking error inside a
//! prescribed, time-varying boundary while a data-driven predictive
//! controller (DeePC for linear plants, bilinear EDMD or kernel EDMD
//! surrogates for nonlinear control-affine plants) does the actual work.
//! The funnel part only contributes once the auxiliary error leaves a safe
//! region, so data can be collected online without risking the output
//! constraint.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod deepc;
pub mod edmd;
pub mod error;
pub mod experiments;
pub mod funnel;
pub mod kedmd;
pub mod koopman_mpc;
pub mod numerics;
pub mod system;

pub use error::{Error, Result};
pub use numerics::Matrix;
