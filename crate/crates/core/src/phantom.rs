//! Synthetic membrane phantoms, the depth-ramp/axial degradation model and
//! on-disk dataset construction.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{block_average_z, blur_z};
use crate::volume::{load_volume, save_volume, Volume3D};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const PLACEMENT_ATTEMPTS: usize = 1000;
/// Minimum centre spacing as a fraction of the summed mean radii.
const MIN_SPACING: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub num_cells: usize,
    pub radius_range: [f64; 2],
    pub membrane_thickness: f64,
    pub background_level: f32,
    pub membrane_level: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            num_cells: 5,
            radius_range: [5.0, 9.0],
            membrane_thickness: 2.0,
            background_level: 0.1,
            membrane_level: 0.8,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.dims;
        if h < 2 || w < 2 || c < 2 {
            return Err(Error::Validation(format!("phantom dims must be at least 2, got {:?}", self.dims)));
        }
        let [rmin, rmax] = self.radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::Validation(format!("bad radius range {:?}", self.radius_range)));
        }
        if !(self.membrane_thickness > 0.0) {
            return Err(Error::Validation("membrane thickness must be positive".into()));
        }
        let smallest = h.min(w).min(c) as f64;
        if 2.0 * (rmax + self.membrane_thickness) > smallest {
            return Err(Error::Validation(format!(
                "radius {rmax} plus membrane {} does not fit in extent {smallest}",
                self.membrane_thickness
            )));
        }
        let levels_ok = (0.0..=1.0).contains(&self.background_level)
            && (0.0..=1.0).contains(&self.membrane_level)
            && self.membrane_level > self.background_level;
        if !levels_ok {
            return Err(Error::Validation(format!(
                "need 0 <= background ({}) < membrane ({}) <= 1",
                self.background_level, self.membrane_level
            )));
        }
        Ok(())
    }
}

/// One ellipsoidal cell, in voxel-index coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Cell {
    /// Approximate distance of `p` to the shell: `|rho - 1| * mean radius`
    /// with `rho` the normalized ellipsoidal radius.
    pub fn shell_distance(&self, p: [f64; 3]) -> f64 {
        let rho = (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let mean_r = self.radii.iter().sum::<f64>() / 3.0;
        (rho - 1.0).abs() * mean_r
    }
}

/// Raised-cosine membrane profile: 1 within half a thickness of the shell,
/// falling to 0 over one further thickness. Crosses 0.5 at `dist == thickness`.
pub fn membrane_profile(dist: f64, thickness: f64) -> f64 {
    let half = 0.5 * thickness;
    if dist <= half {
        1.0
    } else if dist >= half + thickness {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (dist - half) / thickness).cos())
    }
}

/// Seeded rejection sampling of cell geometry.
pub fn place_cells(spec: &PhantomSpec) -> Result<Vec<Cell>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [rmin, rmax] = spec.radius_range;
    let mut cells: Vec<Cell> = Vec::with_capacity(spec.num_cells);
    for i in 0..spec.num_cells {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let radii = [0, 1, 2].map(|_| rng.random_range(rmin..=rmax));
            let mut center = [0.0; 3];
            for a in 0..3 {
                let margin = radii[a] + spec.membrane_thickness;
                let hi = (spec.dims[a] - 1) as f64 - margin;
                center[a] = if hi > margin { rng.random_range(margin..hi) } else { margin };
            }
            let cand = Cell { center, radii };
            let mean_r = |c: &Cell| c.radii.iter().sum::<f64>() / 3.0;
            let clear = cells.iter().all(|o| {
                let d2: f64 = (0..3).map(|a| (o.center[a] - cand.center[a]).powi(2)).sum();
                d2.sqrt() >= MIN_SPACING * (mean_r(o) + mean_r(&cand))
            });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(c) => cells.push(c),
            None => {
                return Err(Error::Placement(format!(
                    "could not place cell {} of {} after {PLACEMENT_ATTEMPTS} attempts",
                    i + 1,
                    spec.num_cells
                )))
            }
        }
    }
    Ok(cells)
}

/// Renders `cells` as soft shells over a constant background.
pub fn render_cells(spec: &PhantomSpec, cells: &[Cell]) -> Array3<f32> {
    let [h, w, c] = spec.dims;
    let mut coverage = Array3::<f64>::zeros((h, w, c));
    let reach = 1.5 * spec.membrane_thickness;
    for cell in cells {
        // Outside rho * r_a > r_a + reach the profile is zero on every axis.
        let lo_hi = |a: usize| {
            let ext = cell.radii[a] * (1.0 + reach / cell.radii.iter().cloned().fold(f64::MAX, f64::min));
            let lo = (cell.center[a] - ext).floor().max(0.0) as usize;
            let hi = ((cell.center[a] + ext).ceil() as usize).min(spec.dims[a] - 1);
            (lo, hi)
        };
        let ((x0, x1), (y0, y1), (z0, z1)) = (lo_hi(0), lo_hi(1), lo_hi(2));
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    let p = membrane_profile(cell.shell_distance([x as f64, y as f64, z as f64]), spec.membrane_thickness);
                    let slot = &mut coverage[[x, y, z]];
                    if p > *slot {
                        *slot = p;
                    }
                }
            }
        }
    }
    let bg = spec.background_level as f64;
    let span = (spec.membrane_level - spec.background_level) as f64;
    coverage.mapv(|p| (bg + span * p).clamp(0.0, 1.0) as f32)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume3D> {
    let cells = place_cells(spec)?;
    Volume3D::from_data(render_cells(spec, &cells))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub sigma0: f64,
    pub sigma1: f64,
    pub axial_factor: usize,
    pub axial_blur_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            sigma0: 0.03,
            sigma1: 0.12,
            axial_factor: 4,
            axial_blur_sigma: 1.0,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 >= 0.0 && self.sigma1 >= 0.0) {
            return Err(Error::Validation(format!(
                "noise levels must be non-negative, got ({}, {})",
                self.sigma0, self.sigma1
            )));
        }
        if self.axial_factor < 1 {
            return Err(Error::Validation("axial factor must be at least 1".into()));
        }
        if !(self.axial_blur_sigma >= 0.0) {
            return Err(Error::Validation("axial blur sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Noise std of degraded slice `z` out of `depth`.
    pub fn noise_std(&self, z: usize, depth: usize) -> f64 {
        if depth <= 1 {
            self.sigma0
        } else {
            self.sigma0 + self.sigma1 * z as f64 / (depth - 1) as f64
        }
    }

    /// Noise-free part of the pipeline: axial blur then block averaging.
    pub fn apply_optics(&self, data: &Array3<f32>) -> Result<Array3<f32>> {
        let (_, _, c) = data.dim();
        if c % self.axial_factor != 0 {
            return Err(Error::Dimension(format!(
                "axial factor {} does not divide depth {c}",
                self.axial_factor
            )));
        }
        let blurred = blur_z(data.view(), self.axial_blur_sigma);
        block_average_z(blurred.view(), self.axial_factor)
    }
}

/// Blur along Z, block-average by `s`, add depth-ramped Gaussian noise, clip.
pub fn degrade_volume(clean: &Volume3D, deg: &DegradationSpec) -> Result<Volume3D> {
    deg.validate()?;
    let mut low = deg.apply_optics(clean.data())?;
    let (h, w, depth) = low.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(deg.seed);
    for z in 0..depth {
        let std = deg.noise_std(z, depth);
        for x in 0..h {
            for y in 0..w {
                let n: f64 = rng.sample(StandardNormal);
                let v = &mut low[[x, y, z]];
                *v = (*v as f64 + std * n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let [dx, dy, dz] = clean.voxel_size();
    Volume3D::new(low, [dx, dy, dz * deg.axial_factor as f64], (0.0, 1.0))
}

/// Robust per-slice noise estimate: `1.4826 * MAD / sqrt(2)` of horizontal
/// neighbour differences, which ignores the sparse membrane edges.
pub fn slice_noise_std(slice: ArrayView2<'_, f32>) -> f64 {
    let (h, w) = slice.dim();
    let mut diffs: Vec<f64> = Vec::with_capacity(h * (w - 1));
    for x in 0..h {
        for y in 0..w - 1 {
            diffs.push((slice[[x, y + 1]] - slice[[x, y]]) as f64);
        }
    }
    let med = median(&mut diffs);
    let mut dev: Vec<f64> = diffs.iter().map(|d| (d - med).abs()).collect();
    1.4826 * median(&mut dev) / std::f64::consts::SQRT_2
}

pub fn noise_std_profile(vol: &Volume3D) -> Vec<f64> {
    vol.data().axis_iter(Axis(2)).map(slice_noise_std).collect()
}

/// Per-slice sample std of `degraded` over the constant-background region
/// of its noise-free counterpart (`deg.apply_optics(clean)` equal to
/// `background`). Clipping at 0 compresses the blind estimate above once
/// the noise exceeds the background level; the masked std keeps rising.
pub fn background_noise_profile(
    degraded: &Volume3D,
    clean: &Volume3D,
    deg: &DegradationSpec,
    background: f32,
) -> Result<Vec<f64>> {
    let optics = deg.apply_optics(clean.data())?;
    if optics.dim() != degraded.dims() {
        return Err(Error::Dimension(format!(
            "degraded {:?} does not match degraded clean {:?}",
            degraded.dims(),
            optics.dim()
        )));
    }
    let mut out = Vec::with_capacity(optics.dim().2);
    for (noisy, reference) in degraded.data().axis_iter(Axis(2)).zip(optics.axis_iter(Axis(2))) {
        let vals: Vec<f64> = noisy
            .iter()
            .zip(reference.iter())
            .filter(|(_, r)| (**r - background).abs() < 1e-6)
            .map(|(v, _)| *v as f64)
            .collect();
        if vals.len() < 2 {
            return Err(Error::Validation("slice has fewer than 2 background voxels".into()));
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        out.push((vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    }
    Ok(out)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    pub phantom_spec: PhantomSpec,
    pub degradation_spec: DegradationSpec,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Dataset index. Entry paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
    pub split: SplitIds,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("manifest version {} (expected {MANIFEST_VERSION})", m.format_version),
            ));
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_degraded(&self, entry: &ManifestEntry) -> Result<Volume3D> {
        load_volume(self.resolve(&entry.degraded_path))
    }

    pub fn load_clean(&self, entry: &ManifestEntry) -> Result<Volume3D> {
        load_volume(self.resolve(&entry.clean_path))
    }
}

/// Number of training entries out of `n`: floor(0.8 n), at least one.
pub fn train_count(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        (4 * n / 5).max(1)
    }
}

/// Generates `n` clean/degraded pairs with seeds `seed + i` and writes them
/// plus `manifest.json` into `out_dir`.
pub fn build_dataset(
    n: usize,
    pspec: &PhantomSpec,
    dspec: &DegradationSpec,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    pspec.validate()?;
    dspec.validate()?;
    if pspec.dims[2] % dspec.axial_factor != 0 {
        return Err(Error::Dimension(format!(
            "axial factor {} does not divide phantom depth {}",
            dspec.axial_factor, pspec.dims[2]
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n_train = train_count(n);
    let mut entries = Vec::with_capacity(n);
    let mut split = SplitIds::default();
    for i in 0..n {
        let phantom_spec = PhantomSpec {
            seed: pspec.seed.wrapping_add(i as u64),
            ..pspec.clone()
        };
        let degradation_spec = DegradationSpec {
            seed: dspec.seed.wrapping_add(i as u64),
            ..dspec.clone()
        };
        let clean = generate_phantom(&phantom_spec)?;
        let degraded = degrade_volume(&clean, &degradation_spec)?;
        let clean_path = PathBuf::from(format!("clean_{i:04}.vtcd"));
        let degraded_path = PathBuf::from(format!("degraded_{i:04}.vtcd"));
        save_volume(&clean, out_dir.join(&clean_path))?;
        save_volume(&degraded, out_dir.join(&degraded_path))?;
        let which = if i < n_train { Split::Train } else { Split::Eval };
        match which {
            Split::Train => split.train.push(i),
            Split::Eval => split.eval.push(i),
        }
        entries.push(ManifestEntry {
            id: i,
            clean_path,
            degraded_path,
            phantom_spec,
            degradation_spec,
            split: which,
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        entries,
        split,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn profile_crosses_half_at_thickness() {
        assert_eq!(membrane_profile(0.0, 2.0), 1.0);
        assert_eq!(membrane_profile(1.0, 2.0), 1.0);
        assert!((membrane_profile(2.0, 2.0) - 0.5).abs() < 1e-12);
        assert_eq!(membrane_profile(3.0, 2.0), 0.0);
    }

    #[test]
    fn zero_cells_gives_constant_background() {
        let spec = PhantomSpec {
            num_cells: 0,
            dims: [8, 8, 8],
            radius_range: [1.0, 2.0],
            membrane_thickness: 1.0,
            ..Default::default()
        };
        let v = generate_phantom(&spec).unwrap();
        assert!(v.data().iter().all(|&x| x == spec.background_level));
    }

    #[test]
    fn overcrowded_spec_fails_placement() {
        let spec = PhantomSpec {
            num_cells: 200,
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Placement(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = PhantomSpec::default();
        spec.membrane_level = 0.05;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::default();
        spec.radius_range = [10.0, 20.0];
        assert!(spec.validate().is_err());
        let deg = DegradationSpec {
            sigma0: -0.1,
            ..Default::default()
        };
        assert!(deg.validate().is_err());
    }

    #[test]
    fn identity_degradation() {
        let spec = PhantomSpec {
            dims: [24, 24, 16],
            num_cells: 2,
            radius_range: [3.0, 4.0],
            ..Default::default()
        };
        let clean = generate_phantom(&spec).unwrap();
        let deg = DegradationSpec {
            sigma0: 0.0,
            sigma1: 0.0,
            axial_factor: 1,
            axial_blur_sigma: 0.0,
            seed: 3,
        };
        let out = degrade_volume(&clean, &deg).unwrap();
        assert_eq!(out.data(), clean.data());
    }

    #[test]
    fn degradation_shape_and_divisibility() {
        let clean = Volume3D::from_data(Array3::from_elem((4, 4, 32), 0.5)).unwrap();
        let out = degrade_volume(&clean, &DegradationSpec::default()).unwrap();
        assert_eq!(out.dims(), (4, 4, 8));
        let bad = DegradationSpec {
            axial_factor: 5,
            ..Default::default()
        };
        assert!(matches!(degrade_volume(&clean, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(train_count(5), 4);
        assert_eq!(train_count(20), 16);
        assert_eq!(train_count(2), 1);
        assert_eq!(train_count(1), 1);
    }

    #[test]
    fn mad_estimator_on_pure_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = ndarray::Array2::from_shape_fn((128, 128), |_| 0.05 * rng.sample::<f64, _>(StandardNormal) as f32);
        let est = slice_noise_std(s.view());
        assert!((est - 0.05).abs() < 0.003, "estimate {est}");
    }
}
