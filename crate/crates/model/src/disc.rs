//! Patch discriminator: strided convolutions with leaky ReLU down to a map
//! of per-patch realism scores.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{leaky_relu, Conv2d};
use crate::params::ParamStore;

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub store: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(name: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let c1 = Conv2d::new(&mut store, &format!("{name}.c1"), 1, width, 3, 2, true, rng)?;
        let c2 = Conv2d::new(&mut store, &format!("{name}.c2"), width, 2 * width, 3, 2, true, rng)?;
        let head = Conv2d::new(&mut store, &format!("{name}.head"), 2 * width, 1, 3, 1, true, rng)?;
        Ok(Self { store, c1, c2, head })
    }

    /// `(N, 1, H, W)` images to `(N, 1, H/4, W/4)` score maps.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.c1.forward(x)?, SLOPE)?;
        let h = leaky_relu(&self.c2.forward(&h)?, SLOPE)?;
        self.head.forward(&h)
    }
}
