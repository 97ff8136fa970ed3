//! Learned components: the hyperplane-guided diffusion denoiser, the
//! cross-plane SR module, discriminators, losses and the progressive trainer.

pub mod checkpoint;
pub mod degrade;
pub mod denoiser;
pub mod disc;
pub mod error;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod restore;
pub mod srm;
pub mod trainer;

pub use error::{Error, Result};
