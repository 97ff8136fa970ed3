//! Minimal convolution layer and activations on top of candle tensors.

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{he_std, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square `k x k` convolution with He-normal weights and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.normal(format!("{name}.weight"), &[cout, cin, k, k], he_std(cin * k * k), rng)?;
        let bias = if bias {
            Some(store.constant(format!("{name}.bias"), &[cout], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    /// Zero weights and bias; the layer outputs zeros until trained.
    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(format!("{name}.weight"), &[cout, cin, k, k], 0.0)?,
            bias: Some(store.constant(format!("{name}.bias"), &[cout], 0.0)?),
            stride: 1,
            padding: k / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().to_dtype(x.dtype())?;
        let y = x.conv2d(&w, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => {
                let b = b.as_tensor().to_dtype(x.dtype())?.reshape((1, self.out_channels(), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }
}

/// `max(x, slope * x)` for `0 < slope < 1`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}
