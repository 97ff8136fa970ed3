//! Core data model and numerics for unsupervised denoising and axial
//! super-resolution of anisotropic 3D fluorescence volumes.
//!
//! * [`volume`] holds the `Volume3D` type, the `VTCDVOL1` container and the
//!   plane slicing that plays the role of the diffusion forward chain.
//! * [`phantom`] builds synthetic membrane volumes and degrades them with a
//!   depth-increasing noise ramp and axial blur/downsampling.
//! * [`diffusion`] has the noise schedule and the forward/reverse kernels.
//! * [`metrics`] implements PSNR, SSIM and the per-plane evaluation report.
//! * [`resample`] carries the axial resampling shared by the degradation
//!   operator, the trilinear baseline and the SR module.

pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod resample;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{PlaneId, SliceSet, Volume3D};
