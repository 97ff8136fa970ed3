//! Axial (Z) resampling: Gaussian blur, block averaging and linear upsampling.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// How fine-grid positions project onto the coarse axial grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZAlignment {
    /// Fine index `c` samples coarse coordinate `(c + 0.5) / s - 0.5`, so each
    /// coarse sample sits at the centre of the block it averages.
    #[default]
    Center,
    /// Fine index `c` samples coarse coordinate `c / s`; coarse slice `z`
    /// coincides with fine index `s * z`.
    Corner,
}

impl ZAlignment {
    pub fn source_coord(self, fine: usize, scale: usize, coarse_len: usize) -> f64 {
        let s = scale as f64;
        let raw = match self {
            ZAlignment::Center => (fine as f64 + 0.5) / s - 0.5,
            ZAlignment::Corner => fine as f64 / s,
        };
        raw.clamp(0.0, (coarse_len - 1) as f64)
    }
}

/// Interpolation taps `(lo, hi, frac)` for every fine position.
pub fn linear_taps(coarse_len: usize, scale: usize, align: ZAlignment) -> Vec<(usize, usize, f32)> {
    (0..coarse_len * scale)
        .map(|c| {
            let z = align.source_coord(c, scale, coarse_len);
            let lo = z.floor() as usize;
            let hi = (lo + 1).min(coarse_len - 1);
            (lo, hi, (z - lo as f64) as f32)
        })
        .collect()
}

/// Normalized Gaussian taps of radius `ceil(3 sigma)`; `sigma == 0` gives the identity.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Gaussian blur along Z with clamp-to-edge boundaries.
pub fn blur_z(data: ArrayView3<'_, f32>, sigma: f64) -> Array3<f32> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return data.to_owned();
    }
    let radius = (kernel.len() / 2) as i64;
    let (h, w, c) = data.dim();
    Array3::from_shape_fn((h, w, c), |(x, y, z)| {
        let mut acc = 0.0f64;
        for (k, wgt) in kernel.iter().enumerate() {
            let zz = (z as i64 + k as i64 - radius).clamp(0, c as i64 - 1) as usize;
            acc += wgt * data[[x, y, zz]] as f64;
        }
        acc as f32
    })
}

/// Averages non-overlapping blocks of `scale` slices along Z.
pub fn block_average_z(data: ArrayView3<'_, f32>, scale: usize) -> Result<Array3<f32>> {
    let (h, w, c) = data.dim();
    if scale == 0 || c % scale != 0 {
        return Err(Error::Dimension(format!(
            "axial factor {scale} does not divide depth {c}"
        )));
    }
    Ok(Array3::from_shape_fn((h, w, c / scale), |(x, y, z)| {
        let sum: f64 = (0..scale).map(|k| data[[x, y, z * scale + k]] as f64).sum();
        (sum / scale as f64) as f32
    }))
}

/// Linear upsampling of axis 2 by `scale`.
pub fn upsample_z(data: ArrayView3<'_, f32>, scale: usize, align: ZAlignment) -> Array3<f32> {
    let (h, w, c) = data.dim();
    let taps = linear_taps(c, scale, align);
    Array3::from_shape_fn((h, w, c * scale), |(x, y, cz)| {
        let (lo, hi, f) = taps[cz];
        lerp(data[[x, y, lo]], data[[x, y, hi]], f)
    })
}

/// Linear upsampling of axis 1 (the Z axis of an XZ or YZ slice).
pub fn upsample_slice_z(slice: ArrayView2<'_, f32>, scale: usize, align: ZAlignment) -> Array2<f32> {
    let (n, c) = slice.dim();
    let taps = linear_taps(c, scale, align);
    Array2::from_shape_fn((n, c * scale), |(i, cz)| {
        let (lo, hi, f) = taps[cz];
        lerp(slice[[i, lo]], slice[[i, hi]], f)
    })
}

#[inline]
fn lerp(a: f32, b: f32, f: f32) -> f32 {
    if f == 0.0 {
        a
    } else {
        a + (b - a) * f
    }
}

/// Baseline upsampler: trilinear interpolation onto the `(H, W, s*C)` grid.
/// Lateral extents are unchanged, so only the Z taps are non-trivial.
pub fn trilinear_upsample(vol: &Volume3D, scale: usize) -> Result<Volume3D> {
    if scale == 0 {
        return Err(Error::Validation("upsampling factor must be at least 1".into()));
    }
    let up = upsample_z(vol.data().view(), scale, ZAlignment::Center);
    let [dx, dy, dz] = vol.voxel_size();
    Volume3D::from_clamped(up, [dx, dy, dz / scale as f64], vol.intensity_range())
}

/// Mean of the XY slices, handy for quick per-depth statistics.
pub fn slice_means(data: ArrayView3<'_, f32>) -> Vec<f64> {
    data.axis_iter(Axis(2))
        .map(|s| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64)
        .collect()
}
