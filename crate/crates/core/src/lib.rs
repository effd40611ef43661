//! Scale-wise autoregressive restoration of hyperspectral cubes.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, reverse-mode tape, RNG, optimizers.
//! * [`hsidata`]: the [`Cube`] type, synthetic scenes and the HSC1 file format.
//! * [`degrade`]: the six degradation families and their parameter grids.
//! * [`metrics`]: PSNR and SSIM.
//! * [`msvq`]: encoder, multi-scale residual quantizer, decoder with
//!   spatial-spectral adaptation.
//! * [`vartx`]: condition encoder, degradation-aware guidance, next-scale
//!   transformer and refiner.
//! * [`pipeline`]: the three training stages, restoration and compute accounting.

pub mod checkpoint;
pub mod degrade;
pub mod error;
pub mod hsidata;
pub mod metrics;
pub mod msvq;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod vartx;

pub use degrade::{Degradation, DegradationKind, DegradationSpec};
pub use error::{Error, Result};
pub use hsidata::{Cube, SceneSpec};
pub use numerics::{Rng, Tensor};
