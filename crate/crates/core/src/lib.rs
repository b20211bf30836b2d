//! Building blocks for remote photoplethysmography (rPPG) on arbitrary-resolution,
//! moving face video.
//!
//! The crate is layered bottom-up:
//!
//! * [`diffcore`] – a dense f64 tensor type, a reverse-mode tape, the differentiable
//!   primitives used by every block, finite-difference gradient checking and Adam.
//! * [`params`] – ordered named parameter storage and initialisation.
//! * [`pfe`] – per-frame physiological feature extraction: a conv block followed by
//!   resize, neighbourhood unfolding, representative-area encoding and a per-position MLP.
//! * [`flow`] – pyramidal Horn–Schunck optical flow and backward warping.
//! * [`tfa`] – bidirectional recurrent temporal face alignment driven by optical flow.
//! * [`backbone`] – the 3-D convolutional signal regressor and full-model assembly.
//! * [`losses`] – negative Pearson, frequency cross-entropy and cross-resolution losses.
//! * [`synth`] – deterministic synthetic pulsatile face videos.
//! * [`evalhr`] – periodogram heart-rate estimation and the clip/video metrics protocol.

pub mod backbone;
pub mod diffcore;
pub mod error;
pub mod evalhr;
pub mod flow;
pub mod losses;
pub mod params;
pub mod pfe;
pub mod synth;
pub mod tfa;

pub use error::{Error, Result};
pub use diffcore::{Tape, Tensor, Var};
