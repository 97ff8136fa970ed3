//! Cross-plane global-propagation super-resolution.
//!
//! XY slices are encoded by a frozen convolutional encoder, the per-slice
//! features are interpolated onto the axially upsampled grid, every grid
//! element is replaced by a learned weighting of its 27 neighbours, and a
//! decode head turns each XZ (optionally YZ) feature plane into a residual
//! that is added to the linearly upsampled input slice.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtcd_core::resample::{linear_taps, upsample_slice_z, upsample_z, ZAlignment};
use vtcd_core::{PlaneId, Volume3D};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{he_std, ParamStore};

/// Neighbourhood radius of the accumulator.
pub const SHIFT: usize = 1;
/// Number of neighbours, `(2 * SHIFT + 1)^3`.
pub const NEIGHBOURS: usize = 27;
const CENTER: usize = NEIGHBOURS / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrmConfig {
    pub features: usize,
    pub scale: usize,
    pub align: ZAlignment,
    pub yz_pass: bool,
    pub encoder_seed: u64,
}

impl Default for SrmConfig {
    fn default() -> Self {
        Self {
            features: 8,
            scale: 4,
            align: ZAlignment::Center,
            yz_pass: false,
            encoder_seed: 1234,
        }
    }
}

/// Frozen slice encoder `phi`.
#[derive(Debug, Clone)]
pub enum Encoder {
    /// `conv(silu(conv(x, w1)), w2)`, both 3x3 without bias.
    Conv { w1: Tensor, w2: Tensor },
    /// Single-channel pass-through.
    Identity,
}

impl Encoder {
    pub fn seeded(features: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scratch = ParamStore::new();
        let w1 = scratch.normal("w1", &[features, 1, 3, 3], he_std(9), &mut rng)?;
        let w2 = scratch.normal("w2", &[features, features, 3, 3], he_std(9 * features), &mut rng)?;
        Ok(Encoder::Conv {
            w1: w1.as_tensor().detach(),
            w2: w2.as_tensor().detach(),
        })
    }

    pub fn features(&self) -> usize {
        match self {
            Encoder::Conv { w2, .. } => w2.dims()[0],
            Encoder::Identity => 1,
        }
    }

    /// `(N, 1, H, W)` slices to `(N, d, H, W)` features.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Encoder::Conv { w1, w2 } => {
                let h = x.conv2d(&w1.to_dtype(x.dtype())?, 1, 1, 1, 1)?.silu()?;
                Ok(h.conv2d(&w2.to_dtype(x.dtype())?, 1, 1, 1, 1)?)
            }
            Encoder::Identity => Ok(x.clone()),
        }
    }
}

/// `d`-channel features on the `(H, W, s * C)` grid, stored as `(d, H, W, C')`.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub features: Tensor,
    pub source_dims: (usize, usize, usize),
    pub scale: usize,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn to_array(&self) -> Result<ndarray::Array4<f32>> {
        let dims = self.features.dims().to_vec();
        let v = self.features.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        ndarray::Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), v)
            .map_err(|e| Error::Dimension(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct SrmModel {
    pub config: SrmConfig,
    pub encoder: Encoder,
    pub store: ParamStore,
    /// Accumulator weights `(27, 27 d)` and bias `(27,)`.
    pub acc_weight: Var,
    pub acc_bias: Var,
    pub head: Conv2d,
}

impl SrmModel {
    /// Seeded frozen encoder, accumulator initialised to the centre one-hot
    /// and a zero decode head, so a fresh model is linear upsampling.
    pub fn new(config: SrmConfig) -> Result<Self> {
        let encoder = Encoder::seeded(config.features, config.encoder_seed)?;
        Self::with_encoder(config, encoder)
    }

    pub fn with_encoder(config: SrmConfig, encoder: Encoder) -> Result<Self> {
        if config.scale == 0 {
            return Err(Error::Config("SR scale must be at least 1".into()));
        }
        let d = encoder.features();
        let mut store = ParamStore::new();
        let acc_weight = store.constant("srm.acc.weight", &[NEIGHBOURS, NEIGHBOURS * d], 0.0)?;
        let mut bias = vec![0f32; NEIGHBOURS];
        bias[CENTER] = 1.0;
        let acc_bias = store.insert("srm.acc.bias", Tensor::from_vec(bias, NEIGHBOURS, &Device::Cpu)?)?;
        let head = Conv2d::zeros(&mut store, "srm.head", d, 1, 3)?;
        Ok(Self {
            config: SrmConfig { features: d, ..config },
            encoder,
            store,
            acc_weight,
            acc_bias,
            head,
        })
    }

    /// Overrides the accumulator with a constant per-element weighting.
    pub fn set_constant_theta(&self, theta: &[f32]) -> Result<()> {
        if theta.len() != NEIGHBOURS {
            return Err(Error::Dimension(format!("theta needs {NEIGHBOURS} entries, got {}", theta.len())));
        }
        self.acc_weight.set(&self.acc_weight.zeros_like()?)?;
        self.acc_bias.set(&Tensor::from_slice(theta, NEIGHBOURS, &Device::Cpu)?)?;
        Ok(())
    }

    /// Encodes the XY slices of `(B, H, W, C)` volumes and interpolates them
    /// onto `(B, d, H, W, s C)`.
    pub fn grid_batch(&self, lr: &Tensor, scale: usize) -> Result<Tensor> {
        let (b, h, w, c) = lr.dims4()?;
        let slices = lr.permute((0, 3, 1, 2))?.reshape((b * c, 1, h, w))?;
        let d = self.encoder.features();
        let f = self
            .encoder
            .encode(&slices)?
            .reshape((b, c, d, h, w))?
            .permute((0, 2, 3, 4, 1))?
            .contiguous()?;
        interp_last(&f, scale, self.config.align)
    }

    /// Neighbourhood-weighted refinement of a `(B, d, H, W, C')` grid with
    /// clamp-to-edge boundaries.
    pub fn accumulate_batch(&self, grid: &Tensor) -> Result<Tensor> {
        let dims = grid.dims().to_vec();
        let (b, d, h, w, c) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        let padded = grid
            .pad_with_same(2, SHIFT, SHIFT)?
            .pad_with_same(3, SHIFT, SHIFT)?
            .pad_with_same(4, SHIFT, SHIFT)?;
        let mut shifted = Vec::with_capacity(NEIGHBOURS);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    shifted.push(padded.narrow(2, i, h)?.narrow(3, j, w)?.narrow(4, k, c)?);
                }
            }
        }
        let nb = Tensor::stack(&shifted, 1)?;
        let n = h * w * c;
        let dt = grid.dtype();
        let flat = nb.reshape((b, NEIGHBOURS * d, n))?.transpose(1, 2)?.contiguous()?;
        let wt = self.acc_weight.as_tensor().to_dtype(dt)?.t()?.contiguous()?;
        let theta = flat
            .broadcast_matmul(&wt)?
            .broadcast_add(&self.acc_bias.as_tensor().to_dtype(dt)?)?
            .transpose(1, 2)?
            .reshape((b, NEIGHBOURS, 1, h, w, c))?;
        Ok(nb.broadcast_mul(&theta)?.sum(1)?)
    }

    /// Decodes every XZ plane (and optionally YZ) of a `(B, d, H, W, C')` grid
    /// into a `(B, H, W, C')` residual.
    pub fn decode_batch(&self, grid: &Tensor) -> Result<Tensor> {
        let dims = grid.dims().to_vec();
        let (b, d, h, w, c) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        let xz = grid.permute((0, 3, 1, 2, 4))?.reshape((b * w, d, h, c))?;
        let r_xz = self.head.forward(&xz)?.reshape((b, w, h, c))?.permute((0, 2, 1, 3))?;
        if !self.config.yz_pass {
            return Ok(r_xz);
        }
        let yz = grid.permute((0, 2, 1, 3, 4))?.reshape((b * h, d, w, c))?;
        let r_yz = self.head.forward(&yz)?.reshape((b, h, w, c))?;
        Ok(((r_xz + r_yz)? * 0.5)?)
    }

    /// Differentiable SR of `(B, H, W, C)` volumes to `(B, H, W, s C)`.
    pub fn forward_batch(&self, lr: &Tensor) -> Result<Tensor> {
        let s = self.config.scale;
        let grid = self.accumulate_batch(&self.grid_batch(lr, s)?)?;
        let residual = self.decode_batch(&grid)?;
        let base = interp_last(lr, s, self.config.align)?;
        Ok((base + residual)?)
    }
}

/// Linear interpolation of the last axis onto `scale` times as many samples.
pub fn interp_last(t: &Tensor, scale: usize, align: ZAlignment) -> Result<Tensor> {
    let last = t.rank() - 1;
    let c = t.dims()[last];
    if scale == 1 {
        return Ok(t.clone());
    }
    let taps = linear_taps(c, scale, align);
    let lo: Vec<u32> = taps.iter().map(|p| p.0 as u32).collect();
    let hi: Vec<u32> = taps.iter().map(|p| p.1 as u32).collect();
    let frac: Vec<f32> = taps.iter().map(|p| p.2).collect();
    let dev = t.device();
    let n = taps.len();
    let lo_v = t.index_select(&Tensor::from_vec(lo, n, dev)?, last)?;
    let hi_v = t.index_select(&Tensor::from_vec(hi, n, dev)?, last)?;
    let f = Tensor::from_vec(frac, n, dev)?.to_dtype(t.dtype())?;
    let g = f.affine(-1.0, 1.0)?;
    Ok((lo_v.broadcast_mul(&g)? + hi_v.broadcast_mul(&f)?)?)
}

fn volume_tensor(vol: &Volume3D) -> Result<Tensor> {
    let (h, w, c) = vol.dims();
    let data: Vec<f32> = vol.data().iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, h, w, c), &Device::Cpu)?)
}

fn tensor_volume(t: &Tensor, dims: (usize, usize, usize)) -> Result<Array3<f32>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec(dims, v).map_err(|e| Error::Dimension(e.to_string()))
}

/// Feature grid of a volume on the `s`-times axially upsampled grid.
pub fn build_feature_grid(vol: &Volume3D, model: &SrmModel, scale: usize) -> Result<FeatureGrid> {
    if scale == 0 {
        return Err(Error::Config("SR scale must be at least 1".into()));
    }
    let g = model.grid_batch(&volume_tensor(vol)?, scale)?;
    Ok(FeatureGrid {
        features: g.squeeze(0)?,
        source_dims: vol.dims(),
        scale,
    })
}

pub fn accumulate_neighbors(grid: &FeatureGrid, model: &SrmModel) -> Result<FeatureGrid> {
    if grid.channels() != model.encoder.features() {
        return Err(Error::Dimension(format!(
            "grid has {} channels, model expects {}",
            grid.channels(),
            model.encoder.features()
        )));
    }
    let out = model.accumulate_batch(&grid.features.unsqueeze(0)?)?;
    Ok(FeatureGrid {
        features: out.squeeze(0)?,
        ..grid.clone()
    })
}

/// Adds the decoded residual of the grid plane at `index` to the linearly
/// upsampled LR slice. `slice_lr` is `(H, C)` for XZ and `(W, C)` for YZ.
pub fn overlay_slice(
    slice_lr: ArrayView2<'_, f32>,
    plane: PlaneId,
    index: usize,
    grid: &FeatureGrid,
    model: &SrmModel,
) -> Result<Array2<f32>> {
    let (h, w, c) = grid.source_dims;
    let (axis, expect, count) = match plane {
        PlaneId::Xz => (2, (h, c), w),
        PlaneId::Yz => (1, (w, c), h),
        PlaneId::Xy => return Err(Error::Config("overlay applies to XZ or YZ slices only".into())),
    };
    if index >= count {
        return Err(Error::Dimension(format!("{plane} index {index} out of range 0..{count}")));
    }
    if slice_lr.dim() != expect {
        return Err(Error::Dimension(format!(
            "{plane} slice has shape {:?}, expected {expect:?}",
            slice_lr.dim()
        )));
    }
    let d = grid.channels();
    let cp = grid.features.dims()[3];
    let plane_feats = grid.features.narrow(axis, index, 1)?.squeeze(axis)?;
    let rows = expect.0;
    let residual = model.head.forward(&plane_feats.reshape((1, d, rows, cp))?)?;
    let residual = residual
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let up = upsample_slice_z(slice_lr, grid.scale, model.config.align);
    let res = Array2::from_shape_vec((rows, cp), residual).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(up + res)
}

/// Full SR pass: grid, accumulation, residual overlay, clip to range.
pub fn super_resolve_volume(vol_lr: &Volume3D, model: &SrmModel, scale: usize) -> Result<Volume3D> {
    if scale == 0 {
        return Err(Error::Config("SR scale must be at least 1".into()));
    }
    let (h, w, c) = vol_lr.dims();
    let grid = model.grid_batch(&volume_tensor(vol_lr)?, scale)?;
    let grid = model.accumulate_batch(&grid)?;
    let residual = tensor_volume(&model.decode_batch(&grid)?, (h, w, c * scale))?;
    let mut out = upsample_z(vol_lr.data().view(), scale, model.config.align);
    out += &residual;
    let [dx, dy, dz] = vol_lr.voxel_size();
    Ok(Volume3D::from_clamped(
        out,
        [dx, dy, dz / scale as f64],
        vol_lr.intensity_range(),
    )?)
}
