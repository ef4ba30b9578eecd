//! Reverse-mode differentiation over layer graphs, with the
//! straight-through estimator for binarized convolutions.

mod exec;
mod gradcheck;
mod params;

pub use exec::{
    backward, backward_with, binary_weight_grad, forward, grad_flow_probe, infer, ste_sign_backward, Mode, Tape,
};
pub use gradcheck::{gradcheck, GradCheck};
pub use params::{param_rng, BnView, Param, ParamKind, ParamStore};
