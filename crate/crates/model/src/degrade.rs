//! Differentiable axial degradation `HR -> LR`: a 1D kernel along Z with
//! clamp-to-edge padding followed by block averaging.

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use vtcd_core::resample::gaussian_kernel;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// How the reverse (HR to LR) direction of the cycle is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseMode {
    /// The known synthetic degradation operator.
    #[default]
    Analytic,
    /// A trainable axial kernel initialised from the analytic one.
    Learned,
}

#[derive(Debug, Clone)]
pub struct AxialDegrader {
    pub scale: usize,
    pub kernel: Var,
    pub learned: bool,
    pub store: ParamStore,
}

impl AxialDegrader {
    pub fn new(scale: usize, blur_sigma: f64, mode: ReverseMode) -> Result<Self> {
        if scale == 0 {
            return Err(Error::Config("axial factor must be at least 1".into()));
        }
        let taps: Vec<f32> = gaussian_kernel(blur_sigma).iter().map(|v| *v as f32).collect();
        let n = taps.len();
        let mut store = ParamStore::new();
        let kernel = store.insert("rev.kernel", Tensor::from_vec(taps, n, &Device::Cpu)?)?;
        Ok(Self {
            scale,
            kernel,
            learned: mode == ReverseMode::Learned,
            store,
        })
    }

    /// `(..., C)` to `(..., C / s)` along the last axis.
    pub fn forward(&self, hr: &Tensor) -> Result<Tensor> {
        let last = hr.rank() - 1;
        let c = hr.dims()[last];
        if c % self.scale != 0 {
            return Err(Error::Dimension(format!("axial factor {} does not divide depth {c}", self.scale)));
        }
        let k = self.kernel.as_tensor().to_dtype(hr.dtype())?;
        let k = if self.learned { k } else { k.detach() };
        let taps = k.elem_count();
        let blurred = if taps == 1 {
            hr.broadcast_mul(&k)?
        } else {
            let r = taps / 2;
            let padded = hr.pad_with_same(last, r, r)?;
            let mut acc: Option<Tensor> = None;
            for i in 0..taps {
                let term = padded.narrow(last, i, c)?.broadcast_mul(&k.narrow(0, i, 1)?)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
            acc.expect("kernel has at least one tap")
        };
        let mut dims = hr.dims().to_vec();
        dims[last] = c / self.scale;
        dims.push(self.scale);
        Ok(blurred.reshape(dims)?.mean(last + 1)?)
    }
}
