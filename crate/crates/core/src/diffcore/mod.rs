//! Dense f64 tensors, a reverse-mode tape and the differentiable primitives the
//! rPPG blocks are composed from.

mod adam;
mod gemm;
mod gradcheck;
mod ops_basic;
mod ops_conv;
mod ops_norm;
mod ops_spatial;
mod ops_spectral;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use ops_norm::{NormScope, NORM_EPS};
pub use ops_spatial::{resize_bilinear, warp_bilinear};
pub use ops_spectral::power_spectrum;
pub use tape::{BackCtx, Backward, Tape, Var};
pub use tensor::Tensor;
