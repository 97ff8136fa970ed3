//! Volume data model, the `VTCDVOL1` container and plane slicing.
//!
//! Volumes are indexed `[x][y][z]` with extents `(H, W, C)`: X and Y are the
//! high-resolution lateral axes, Z the coarse axial axis.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"VTCDVOL1";
pub const VOLUME_DTYPE: &str = "f32le";

/// Real-valued 3D intensity volume with voxel spacing in nanometres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Array3<f32>,
    voxel_size: [f64; 3],
    intensity_range: (f32, f32),
}

impl Volume3D {
    /// Validating constructor. Lateral extents must be at least 2; a single
    /// axial slice is allowed so that heavily downsampled stacks stay
    /// representable.
    pub fn new(data: Array3<f32>, voxel_size: [f64; 3], intensity_range: (f32, f32)) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < 2 || w < 2 || c < 1 {
            return Err(Error::Validation(format!(
                "volume extents must be at least 2x2x1, got {h}x{w}x{c}"
            )));
        }
        let (lo, hi) = intensity_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Validation(format!(
                "intensity range must be finite with lo < hi, got ({lo}, {hi})"
            )));
        }
        if voxel_size.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Validation(format!(
                "voxel size must be positive and finite, got {voxel_size:?}"
            )));
        }
        if let Some((idx, v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value {v} at {idx:?}")));
        }
        if let Some((idx, v)) = data.indexed_iter().find(|(_, v)| **v < lo || **v > hi) {
            return Err(Error::Validation(format!(
                "value {v} at {idx:?} outside intensity range [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            data,
            voxel_size,
            intensity_range,
        })
    }

    /// Unit-range volume with 1 nm isotropic spacing.
    pub fn from_data(data: Array3<f32>) -> Result<Self> {
        Self::new(data, [1.0, 1.0, 1.0], (0.0, 1.0))
    }

    /// Clamps `data` into `range` before validating, for outputs of
    /// restoration stages that may overshoot.
    pub fn from_clamped(mut data: Array3<f32>, voxel_size: [f64; 3], range: (f32, f32)) -> Result<Self> {
        data.mapv_inplace(|v| v.clamp(range.0, range.1));
        Self::new(data, voxel_size, range)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// `(H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn intensity_range(&self) -> (f32, f32) {
        self.intensity_range
    }

    /// Same metadata, new payload.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        Self::new(data, self.voxel_size, self.intensity_range)
    }

    pub fn xy_slice(&self, z: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(2), z)
    }
}

/// One of the three orthogonal slice families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaneId {
    Xy,
    Xz,
    Yz,
}

impl PlaneId {
    pub const ALL: [PlaneId; 3] = [PlaneId::Xy, PlaneId::Xz, PlaneId::Yz];

    /// Volume axis that indexes the slices of this family.
    pub fn index_axis(self) -> Axis {
        match self {
            PlaneId::Xy => Axis(2),
            PlaneId::Xz => Axis(1),
            PlaneId::Yz => Axis(0),
        }
    }

    /// `(slice count, slice shape)` for a volume of extents `dims`.
    pub fn layout(self, dims: (usize, usize, usize)) -> (usize, (usize, usize)) {
        let (h, w, c) = dims;
        match self {
            PlaneId::Xy => (c, (h, w)),
            PlaneId::Xz => (w, (h, c)),
            PlaneId::Yz => (h, (w, c)),
        }
    }
}

impl fmt::Display for PlaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlaneId::Xy => "xy",
            PlaneId::Xz => "xz",
            PlaneId::Yz => "yz",
        })
    }
}

impl FromStr for PlaneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xy" => Ok(PlaneId::Xy),
            "xz" => Ok(PlaneId::Xz),
            "yz" => Ok(PlaneId::Yz),
            other => Err(Error::Validation(format!("unknown plane '{other}' (expected xy, xz or yz)"))),
        }
    }
}

/// Ordered slices of one plane family plus the slice-index to diffusion-step map.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSet {
    pub plane: PlaneId,
    pub slices: Vec<Array2<f32>>,
    pub index_axis_len: usize,
    pub t_of_index: Vec<usize>,
    pub voxel_size: [f64; 3],
    pub intensity_range: (f32, f32),
}

/// Linear depth-to-step map `round(i * T / (n - 1))`; a single slice maps to 0.
pub fn step_for_index(index: usize, len: usize, steps: usize) -> usize {
    if len <= 1 {
        return 0;
    }
    let t = (index as f64 * steps as f64 / (len - 1) as f64).round();
    t as usize
}

pub fn slice_volume(vol: &Volume3D, plane: PlaneId, steps: usize) -> Result<SliceSet> {
    if steps < 1 {
        return Err(Error::Validation("diffusion step count T must be at least 1".into()));
    }
    let axis = plane.index_axis();
    let n = vol.data.len_of(axis);
    let slices = vol
        .data
        .axis_iter(axis)
        .map(|s| s.to_owned())
        .collect::<Vec<_>>();
    let t_of_index = (0..n).map(|i| step_for_index(i, n, steps)).collect();
    Ok(SliceSet {
        plane,
        slices,
        index_axis_len: n,
        t_of_index,
        voxel_size: vol.voxel_size,
        intensity_range: vol.intensity_range,
    })
}

pub fn reassemble_volume(ss: &SliceSet, dims: (usize, usize, usize)) -> Result<Volume3D> {
    let (count, shape) = ss.plane.layout(dims);
    if ss.slices.len() != count || ss.index_axis_len != count {
        return Err(Error::Dimension(format!(
            "{} slicing of {dims:?} needs {count} slices, got {}",
            ss.plane,
            ss.slices.len()
        )));
    }
    if let Some((i, s)) = ss.slices.iter().enumerate().find(|(_, s)| s.dim() != shape) {
        return Err(Error::Dimension(format!(
            "slice {i} has shape {:?}, expected {shape:?}",
            s.dim()
        )));
    }
    let mut data = Array3::<f32>::zeros(dims);
    let axis = ss.plane.index_axis();
    for (mut dst, src) in data.axis_iter_mut(axis).zip(&ss.slices) {
        dst.assign(src);
    }
    Volume3D::new(data, ss.voxel_size, ss.intensity_range)
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    dtype: String,
    range: [f32; 2],
}

/// Writes `vol` as `VTCDVOL1`: magic, u32 LE header length, JSON header,
/// then f32 LE payload ordered z-major, then x, then y.
pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "refusing to write non-finite volume to {}",
            path.display()
        )));
    }
    let (h, w, c) = vol.dims();
    let header = VolumeHeader {
        dims: [h, w, c],
        voxel_size: vol.voxel_size,
        dtype: VOLUME_DTYPE.to_string(),
        range: [vol.intensity_range.0, vol.intensity_range.1],
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut buf = Vec::with_capacity(12 + header.len() + 4 * h * w * c);
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for z in 0..c {
        for x in 0..h {
            for y in 0..w {
                buf.extend_from_slice(&vol.data[[x, y, z]].to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::format(path, "bad magic, expected VTCDVOL1"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::format(
            path,
            format!("header claims {header_len} bytes but file has {}", bytes.len() - 12),
        ));
    }
    let header: VolumeHeader =
        serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| Error::json(path, e))?;
    if header.dtype != VOLUME_DTYPE {
        return Err(Error::format(path, format!("unsupported dtype '{}'", header.dtype)));
    }
    let [h, w, c] = header.dims;
    let expected = 4 * h * w * c;
    let actual = bytes.len() - payload_start;
    if actual != expected {
        return Err(Error::format(
            path,
            format!("payload has {actual} bytes, expected {expected} for dims {h}x{w}x{c}"),
        ));
    }
    let mut data = Array3::<f32>::zeros((h, w, c));
    let mut chunks = bytes[payload_start..].chunks_exact(4);
    for z in 0..c {
        for x in 0..h {
            for y in 0..w {
                let b = chunks.next().expect("length checked");
                data[[x, y, z]] = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
        }
    }
    Volume3D::new(data, header.voxel_size, (header.range[0], header.range[1]))
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: (usize, usize, usize), seed: u64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn(dims, |_| rng.random::<f32>());
        Volume3D::from_data(data).unwrap()
    }

    #[test]
    fn xy_slicing_shapes() {
        let v = random_volume((4, 5, 6), 1);
        let ss = slice_volume(&v, PlaneId::Xy, 8).unwrap();
        assert_eq!(ss.slices.len(), 6);
        assert!(ss.slices.iter().all(|s| s.dim() == (4, 5)));
        let xz = slice_volume(&v, PlaneId::Xz, 8).unwrap();
        assert_eq!((xz.slices.len(), xz.slices[0].dim()), (5, (4, 6)));
        let yz = slice_volume(&v, PlaneId::Yz, 8).unwrap();
        assert_eq!((yz.slices.len(), yz.slices[0].dim()), (4, (5, 6)));
    }

    #[test]
    fn step_map_endpoints_and_midpoint() {
        let v = random_volume((2, 2, 5), 2);
        let ss = slice_volume(&v, PlaneId::Xy, 8).unwrap();
        assert_eq!(ss.t_of_index[0], 0);
        assert_eq!(ss.t_of_index[4], 8);
        // round(2 * 8 / 4)
        assert_eq!(ss.t_of_index[2], 4);
        assert!(ss.t_of_index.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_steps_rejected() {
        let v = random_volume((2, 2, 2), 3);
        assert!(matches!(slice_volume(&v, PlaneId::Xy, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn reassemble_rejects_bad_slice() {
        let v = random_volume((4, 4, 4), 4);
        let mut ss = slice_volume(&v, PlaneId::Xz, 4).unwrap();
        ss.slices[2] = Array2::zeros((4, 3));
        assert!(matches!(reassemble_volume(&ss, (4, 4, 4)), Err(Error::Dimension(_))));
        ss.slices.pop();
        assert!(matches!(reassemble_volume(&ss, (4, 4, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn xy_and_xz_reassemble_to_the_same_volume() {
        let v = random_volume((4, 4, 4), 5);
        let a = reassemble_volume(&slice_volume(&v, PlaneId::Xy, 3).unwrap(), v.dims()).unwrap();
        let b = reassemble_volume(&slice_volume(&v, PlaneId::Xz, 3).unwrap(), v.dims()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, v);
    }

    #[test]
    fn nan_volume_is_rejected() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[1, 0, 1]] = f32::NAN;
        assert!(matches!(Volume3D::from_data(data), Err(Error::Validation(_))));
    }

    #[test]
    fn out_of_range_volume_is_rejected() {
        let data = Array3::<f32>::from_elem((2, 2, 2), 1.5);
        assert!(Volume3D::from_data(data.clone()).is_err());
        assert!(Volume3D::new(data, [1.0; 3], (0.0, 2.0)).is_ok());
    }

    #[test]
    fn plane_parsing() {
        assert_eq!("XZ".parse::<PlaneId>().unwrap(), PlaneId::Xz);
        assert!("zz".parse::<PlaneId>().is_err());
        assert_eq!(PlaneId::Yz.to_string(), "yz");
    }
}
