//! Full-reference image metrics and the evaluation report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayBase, ArrayView2, ArrayView3, Axis, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{PlaneId, Volume3D};

/// Reported in place of +inf when prediction and reference coincide.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes<D: Dimension>(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

pub fn mse<A, S1, S2, D>(pred: &ArrayBase<S1, D>, reference: &ArrayBase<S2, D>) -> Result<f64>
where
    A: Copy + Into<f64>,
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
    D: Dimension,
{
    check_shapes::<D>(pred.shape(), reference.shape(), "mse")?;
    let n = pred.len().max(1) as f64;
    let sum: f64 = pred
        .iter()
        .zip(reference.iter())
        .map(|(&a, &b)| {
            let d = a.into() - b.into();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// `10 log10(range^2 / MSE)`, capped at [`PSNR_CAP_DB`] for identical inputs.
pub fn psnr<A, S1, S2, D>(pred: &ArrayBase<S1, D>, reference: &ArrayBase<S2, D>, range: f64) -> Result<f64>
where
    A: Copy + Into<f64>,
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
    D: Dimension,
{
    if !(range > 0.0) {
        return Err(Error::Validation(format!("PSNR range must be positive, got {range}")));
    }
    let m = mse(pred, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (range * range / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-0.5 * ((i as f64 - r) / SSIM_SIGMA).powi(2)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filtering over the valid region only.
fn filter_valid(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = win.len();
    let rows: Array2<f64> =
        Array2::from_shape_fn((h - k + 1, w), |(i, j)| (0..k).map(|t| win[t] * img[[i + t, j]]).sum::<f64>());
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(i, j)| (0..k).map(|t| win[t] * rows[[i, j + t]]).sum())
}

/// Single-scale SSIM with an 11-tap Gaussian window (sigma 1.5) and
/// stabilizers `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, averaged over the valid map.
pub fn ssim(pred: ArrayView2<'_, f32>, reference: ArrayView2<'_, f32>, range: f64) -> Result<f64> {
    check_shapes::<ndarray::Ix2>(pred.shape(), reference.shape(), "ssim")?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let win = gaussian_window();
    let x = pred.mapv(|v| v as f64);
    let y = reference.mapv(|v| v as f64);
    let mu_x = filter_valid(&x, &win);
    let mu_y = filter_valid(&y, &win);
    let e_xx = filter_valid(&(&x * &x), &win);
    let e_yy = filter_valid(&(&y * &y), &win);
    let e_xy = filter_valid(&(&x * &y), &win);
    let mut total = 0.0;
    for (((&mx, &my), (&xx, &yy)), &xy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(e_xx.iter().zip(e_yy.iter()))
        .zip(e_xy.iter())
    {
        let var_x = xx - mx * mx;
        let var_y = yy - my * my;
        let cov = xy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

/// Mean per-slice TV over XY slices, normalized by the voxel count:
/// `(1/hwc) sum sqrt(dx^2 + dy^2)` over the interior `x < h-1, y < w-1`.
pub fn total_variation(data: ArrayView3<'_, f32>) -> f64 {
    let (h, w, c) = data.dim();
    let mut acc = 0.0;
    for z in 0..c {
        for x in 0..h.saturating_sub(1) {
            for y in 0..w.saturating_sub(1) {
                let v = data[[x, y, z]] as f64;
                let dy = data[[x, y + 1, z]] as f64 - v;
                let dx = data[[x + 1, y, z]] as f64 - v;
                acc += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    acc / (h * w * c) as f64
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    pearson(&ra, &rb)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub slices: usize,
}

/// One evaluated volume. `tv_in` is the TV statistic of the reference,
/// `tv_out` that of the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub tv_in: f64,
    pub tv_out: f64,
    #[serde(default)]
    pub planes: BTreeMap<PlaneId, PlaneMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let k = sorted.len();
        let median = if k % 2 == 1 {
            sorted[k / 2]
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
        };
        Some(Self {
            mean,
            median,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr_db: Summary,
    pub ssim: Summary,
    pub tv_in: Summary,
    pub tv_out: Summary,
}

impl Aggregates {
    pub fn of(entries: &[VolumeMetrics]) -> Option<Self> {
        let col = |f: fn(&VolumeMetrics) -> f64| entries.iter().map(f).collect::<Vec<_>>();
        Some(Self {
            psnr_db: Summary::of(&col(|e| e.psnr_db))?,
            ssim: Summary::of(&col(|e| e.ssim))?,
            tv_in: Summary::of(&col(|e| e.tv_in))?,
            tv_out: Summary::of(&col(|e| e.tv_out))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub per_volume: Vec<VolumeMetrics>,
    pub aggregates: Option<Aggregates>,
}

impl MetricsBlock {
    pub fn new(per_volume: Vec<VolumeMetrics>) -> Self {
        let aggregates = Aggregates::of(&per_volume);
        Self {
            per_volume,
            aggregates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_volume: Vec<VolumeMetrics>,
    pub aggregates: Option<Aggregates>,
    #[serde(default)]
    pub baseline: Option<MetricsBlock>,
}

impl MetricsReport {
    pub fn new(per_volume: Vec<VolumeMetrics>, baseline: Option<Vec<VolumeMetrics>>) -> Self {
        let aggregates = Aggregates::of(&per_volume);
        Self {
            per_volume,
            aggregates,
            baseline: baseline.map(MetricsBlock::new),
        }
    }
}

fn plane_metrics(pred: &Volume3D, gt: &Volume3D, plane: PlaneId, range: f64) -> Result<Option<PlaneMetrics>> {
    let axis = plane.index_axis();
    let (count, (sh, sw)) = plane.layout(pred.dims());
    if sh < SSIM_WINDOW || sw < SSIM_WINDOW {
        return Ok(None);
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (p, g) in pred.data().axis_iter(axis).zip(gt.data().axis_iter(axis)) {
        psnr_sum += psnr(&p, &g, range)?;
        ssim_sum += ssim(p, g, range)?;
    }
    Ok(Some(PlaneMetrics {
        psnr_db: psnr_sum / count as f64,
        ssim: ssim_sum / count as f64,
        slices: count,
    }))
}

/// Volume-level PSNR over all voxels; volume-level SSIM is the mean of the
/// slice-averaged SSIM over every plane family whose slices fit the window.
/// `planes` selects which per-plane entries are reported.
pub fn evaluate_volume(id: &str, pred: &Volume3D, gt: &Volume3D, planes: &[PlaneId]) -> Result<VolumeMetrics> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    let (lo, hi) = gt.intensity_range();
    let range = (hi - lo) as f64;
    let psnr_db = psnr(pred.data(), gt.data(), range)?;
    let mut all = BTreeMap::new();
    for plane in PlaneId::ALL {
        if let Some(m) = plane_metrics(pred, gt, plane, range)? {
            all.insert(plane, m);
        }
    }
    let ssim = if all.is_empty() {
        return Err(Error::Dimension(format!(
            "no plane of {:?} is large enough for a {SSIM_WINDOW}-wide SSIM window",
            pred.dims()
        )));
    } else {
        all.values().map(|m| m.ssim).sum::<f64>() / all.len() as f64
    };
    let planes = all.into_iter().filter(|(p, _)| planes.contains(p)).collect();
    Ok(VolumeMetrics {
        id: id.to_string(),
        psnr_db,
        ssim,
        tv_in: total_variation(gt.data().view()),
        tv_out: total_variation(pred.data().view()),
        planes,
    })
}

/// Writes the report as pretty JSON with lexicographically sorted keys.
pub fn write_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let value = serde_json::to_value(report).map_err(|e| Error::json(path, e))?;
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Per-slice PSNR along one plane family, for diagnostics and tests.
pub fn per_slice_psnr(pred: &Volume3D, gt: &Volume3D, plane: PlaneId) -> Result<Vec<f64>> {
    let (lo, hi) = gt.intensity_range();
    let axis: Axis = plane.index_axis();
    pred.data()
        .axis_iter(axis)
        .zip(gt.data().axis_iter(axis))
        .map(|(p, g)| psnr(&p, &g, (hi - lo) as f64))
        .collect()
}
