//! Work-in-progress build scaffold; full module docs land with the last module.
pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod field;
pub mod swgmm;

pub use swgmm::{Swgmm, SwndParams, Velocity};
