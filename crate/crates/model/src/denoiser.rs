//! Hyperplane-guided conditional diffusion denoiser for XY slices.
//!
//! A small U-shaped noise predictor sees the noisy slice concatenated with a
//! condition slice plus a learned step embedding. Its bottleneck features
//! double as the latent space in which the low/high-noise hyperplane is fitted
//! and in which guided edits are applied.

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtcd_core::diffusion::{gaussian_field, reverse_step, NoiseSchedule};
use vtcd_core::volume::step_for_index;
use vtcd_core::Volume3D;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::ParamStore;

/// Unit normal of the separating hyperplane between low- and high-noise latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub n: Vec<f64>,
    pub fit_accuracy: f64,
    /// True when the classifier weight was negated to satisfy the orientation
    /// convention (low-noise latents on the positive side).
    pub flipped: bool,
}

impl Hyperplane {
    pub fn dim(&self) -> usize {
        self.n.len()
    }
}

const LOGREG_L2: f64 = 1e-3;
const LOGREG_MAX_ITERS: usize = 100;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fits an L2-regularized logistic regression (low = 1, high = 0) by damped
/// Newton iterations and returns its normalized weight vector.
pub fn fit_hyperplane(low: &[Vec<f64>], high: &[Vec<f64>]) -> Result<Hyperplane> {
    if low.len() < 2 || high.len() < 2 {
        return Err(Error::Config(format!(
            "hyperplane fit needs at least 2 samples per class, got {} and {}",
            low.len(),
            high.len()
        )));
    }
    let dim = low[0].len();
    if dim == 0 || low.iter().chain(high).any(|v| v.len() != dim) {
        return Err(Error::Dimension("hyperplane fit: latent vectors differ in dimension".into()));
    }
    let first = &low[0];
    if low.iter().chain(high).all(|v| v == first) {
        return Err(Error::Degenerate("all latents are identical".into()));
    }

    let rows: Vec<(&Vec<f64>, f64)> = low
        .iter()
        .map(|v| (v, 1.0))
        .chain(high.iter().map(|v| (v, 0.0)))
        .collect();
    let n = rows.len() as f64;
    let p = dim + 1;
    let x = DMatrix::from_fn(rows.len(), p, |i, j| if j < dim { rows[i].0[j] } else { 1.0 });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));

    let objective = |w: &DVector<f64>| -> f64 {
        let z = &x * w;
        let nll: f64 = z.iter().zip(y.iter()).map(|(zi, yi)| log1p_exp(*zi) - yi * zi).sum();
        nll / n + 0.5 * LOGREG_L2 * w.rows(0, dim).norm_squared()
    };

    let mut w = DVector::<f64>::zeros(p);
    let mut f = objective(&w);
    for _ in 0..LOGREG_MAX_ITERS {
        let z = &x * &w;
        let prob = z.map(sigmoid);
        let mut grad = x.transpose() * (&prob - &y) / n;
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..rows.len() {
            let s = prob[i] * (1.0 - prob[i]) / n;
            let xi = x.row(i);
            hess += s * xi.transpose() * xi;
        }
        for j in 0..dim {
            grad[j] += LOGREG_L2 * w[j];
            hess[(j, j)] += LOGREG_L2;
        }
        hess[(dim, dim)] += 1e-12;
        let Some(chol) = hess.clone().cholesky() else {
            break;
        };
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut improved = false;
        while scale > 1e-8 {
            let cand = &w - scale * &step;
            let fc = objective(&cand);
            if fc <= f {
                w = cand;
                improved = f - fc > 1e-14 * f.abs().max(1.0);
                f = fc;
                break;
            }
            scale *= 0.5;
        }
        if !improved || step.norm() * scale < 1e-12 {
            break;
        }
    }

    let weights = w.rows(0, dim).into_owned();
    let norm = weights.norm();
    if !(norm > 1e-8) {
        return Err(Error::Degenerate("classes are not linearly distinguishable".into()));
    }
    let correct = rows
        .iter()
        .enumerate()
        .filter(|(i, r)| ((x.row(*i) * &w)[0] > 0.0) == (r.1 > 0.5))
        .count();
    let mut normal: Vec<f64> = weights.iter().map(|v| v / norm).collect();
    let mean_d = |set: &[Vec<f64>]| set.iter().map(|v| dot(v, &normal)).sum::<f64>() / set.len() as f64;
    let flipped = mean_d(low) <= mean_d(high);
    if flipped {
        normal.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(Hyperplane {
        n: normal,
        fit_accuracy: correct as f64 / rows.len() as f64,
        flipped,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Signed distance `n^T x` to the hyperplane through the origin.
pub fn semantic_distance(x: &[f64], h: &Hyperplane) -> Result<f64> {
    if x.len() != h.dim() {
        return Err(Error::Dimension(format!(
            "latent has {} entries, hyperplane normal has {}",
            x.len(),
            h.dim()
        )));
    }
    Ok(dot(x, &h.n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub lambda: f64,
    /// Inclusive step interval `[t_lo, t_hi]` in which edits are applied.
    pub apply_range: (usize, usize),
}

impl EditConfig {
    pub fn new(lambda: f64, apply_range: (usize, usize)) -> Result<Self> {
        let cfg = Self { lambda, apply_range };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Edits at every step of a `steps`-long chain.
    pub fn full_range(lambda: f64, steps: usize) -> Self {
        Self {
            lambda,
            apply_range: (1, steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!("edit strength must be finite, got {}", self.lambda)));
        }
        if self.apply_range.0 > self.apply_range.1 {
            return Err(Error::Config(format!("edit range {:?} is empty", self.apply_range)));
        }
        Ok(())
    }

    pub fn active_at(&self, t: usize) -> bool {
        self.lambda != 0.0 && (self.apply_range.0..=self.apply_range.1).contains(&t)
    }
}

/// `x + lambda * (n^T x) * n`.
pub fn edit_latent(x: &[f64], h: &Hyperplane, cfg: &EditConfig) -> Result<Vec<f64>> {
    let d = semantic_distance(x, h)?;
    if cfg.lambda == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(x.iter().zip(&h.n).map(|(xi, ni)| xi + cfg.lambda * d * ni).collect())
}

/// The same edit applied at every pixel of a `(N, K, h, w)` feature map.
pub fn edit_feature_map(e: &Tensor, n: &Tensor, lambda: f64) -> Result<Tensor> {
    let n = n.to_dtype(e.dtype())?.reshape((1, n.elem_count(), 1, 1))?;
    let d = e.broadcast_mul(&n)?.sum_keepdim(1)?;
    Ok((e + d.broadcast_mul(&n)?.affine(lambda, 0.0)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { channels: 8, steps: 16 }
    }
}

/// Conditional noise predictor `eps(x_t, cond, t)`.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    inp: Conv2d,
    step_embed: Var,
    down: Conv2d,
    mid: Conv2d,
    up: Conv2d,
    out: Conv2d,
}

/// Per-pixel latent edit along a unit normal.
#[derive(Debug, Clone)]
pub struct LatentEdit {
    pub normal: Tensor,
    pub lambda: f64,
}

impl LatentEdit {
    pub fn new(h: &Hyperplane, lambda: f64) -> Result<Self> {
        let n: Vec<f32> = h.n.iter().map(|v| *v as f32).collect();
        Ok(Self {
            normal: Tensor::from_vec(n, h.dim(), &Device::Cpu)?,
            lambda,
        })
    }
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.channels == 0 || config.steps == 0 {
            return Err(Error::Config(format!("bad denoiser config {config:?}")));
        }
        let c = config.channels;
        let mut store = ParamStore::new();
        let inp = Conv2d::new(&mut store, "den.inp", 2, c, 3, 1, true, rng)?;
        let step_embed = store.normal("den.step_embed", &[config.steps + 1, c], 0.1, rng)?;
        let down = Conv2d::new(&mut store, "den.down", c, 2 * c, 3, 2, true, rng)?;
        let mid = Conv2d::new(&mut store, "den.mid", 2 * c, 2 * c, 3, 1, true, rng)?;
        let up = Conv2d::new(&mut store, "den.up", 2 * c, c, 3, 1, true, rng)?;
        let out = Conv2d::new(&mut store, "den.out", c, 1, 3, 1, true, rng)?;
        Ok(Self {
            config,
            store,
            inp,
            step_embed,
            down,
            mid,
            up,
            out,
        })
    }

    /// Dimension of the bottleneck latent vectors.
    pub fn latent_dim(&self) -> usize {
        2 * self.config.channels
    }

    fn check_steps(&self, t: &[usize], n: usize) -> Result<()> {
        if t.len() != n {
            return Err(Error::Dimension(format!("{} step indices for a batch of {n}", t.len())));
        }
        if let Some(bad) = t.iter().find(|s| **s > self.config.steps) {
            return Err(Error::Config(format!("step {bad} exceeds T = {}", self.config.steps)));
        }
        Ok(())
    }

    /// Skip and bottleneck features for `(N, 1, H, W)` inputs with even `H, W`.
    fn features(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<(Tensor, Tensor)> {
        let n = x_t.dims()[0];
        self.check_steps(t, n)?;
        let ids = Tensor::from_vec(t.iter().map(|v| *v as u32).collect::<Vec<_>>(), n, x_t.device())?;
        let emb = self
            .step_embed
            .as_tensor()
            .to_dtype(x_t.dtype())?
            .index_select(&ids, 0)?
            .reshape((n, self.config.channels, 1, 1))?;
        let h = Tensor::cat(&[x_t, cond], 1)?;
        let e1 = self.inp.forward(&h)?.broadcast_add(&emb)?.silu()?;
        let e2 = self.down.forward(&e1)?.silu()?;
        Ok((e1, e2))
    }

    /// Predicted noise for a batch of `(N, 1, H, W)` slices at steps `t`.
    pub fn forward(&self, x_t: &Tensor, cond: &Tensor, t: &[usize], edit: Option<&LatentEdit>) -> Result<Tensor> {
        if x_t.dims() != cond.dims() || x_t.rank() != 4 || x_t.dims()[1] != 1 {
            return Err(Error::Dimension(format!(
                "denoiser expects matching (N, 1, H, W) inputs, got {:?} and {:?}",
                x_t.dims(),
                cond.dims()
            )));
        }
        let (h, w) = (x_t.dims()[2], x_t.dims()[3]);
        let pad = |v: &Tensor| -> Result<Tensor> { Ok(v.pad_with_same(2, 0, h % 2)?.pad_with_same(3, 0, w % 2)?) };
        let (xp, cp) = (pad(x_t)?, pad(cond)?);
        let (e1, mut e2) = self.features(&xp, &cp, t)?;
        if let Some(edit) = edit {
            if edit.lambda != 0.0 {
                e2 = edit_feature_map(&e2, &edit.normal, edit.lambda)?;
            }
        }
        let m = self.mid.forward(&e2)?.silu()?;
        let (hp, wp) = (e1.dims()[2], e1.dims()[3]);
        let u = (self.up.forward(&m.upsample_nearest2d(hp, wp)?)?.silu()? + e1)?;
        let eps = self.out.forward(&u)?;
        Ok(eps.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Spatially pooled bottleneck latent of a slice at step `T`, conditioned
    /// on itself. This is the encoder used for hyperplane fitting.
    pub fn pooled_latent(&self, slice: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
        let x = slice_tensor(slice)?;
        let (h, w) = slice.dim();
        let xp = x.pad_with_same(2, 0, h % 2)?.pad_with_same(3, 0, w % 2)?;
        let (_, e2) = self.features(&xp, &xp, &[self.config.steps])?;
        let pooled = e2.mean_keepdim(3)?.mean_keepdim(2)?.flatten_all()?;
        Ok(pooled.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Fits the hyperplane on latents of the first and last depth quartiles.
    pub fn fit_hyperplane_on(&self, volumes: &[&Volume3D]) -> Result<Hyperplane> {
        let mut low = Vec::new();
        let mut high = Vec::new();
        for vol in volumes {
            let c = vol.dims().2;
            let q = (c / 4).max(1);
            for z in 0..q {
                low.push(self.pooled_latent(vol.xy_slice(z))?);
            }
            for z in c.saturating_sub(q)..c {
                high.push(self.pooled_latent(vol.xy_slice(z))?);
            }
        }
        fit_hyperplane(&low, &high)
    }
}

/// `(1, 1, H, W)` tensor from a slice.
pub fn slice_tensor(slice: ArrayView2<'_, f32>) -> Result<Tensor> {
    let (h, w) = slice.dim();
    let data: Vec<f32> = slice.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, 1, h, w), &Device::Cpu)?)
}

/// Inverse of [`slice_tensor`] for any tensor with `H * W` elements.
pub fn tensor_slice(t: &Tensor, shape: (usize, usize)) -> Result<Array2<f32>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec(shape, v).map_err(|e| Error::Dimension(e.to_string()))
}

/// Anything that predicts the noise of `x_t` given a condition slice.
pub trait ConditionalPredictor {
    fn predict_eps(
        &self,
        x_t: ArrayView2<'_, f32>,
        cond: ArrayView2<'_, f32>,
        t: usize,
        edit: Option<&LatentEdit>,
    ) -> Result<Array2<f32>>;
}

impl ConditionalPredictor for DenoiserModel {
    fn predict_eps(
        &self,
        x_t: ArrayView2<'_, f32>,
        cond: ArrayView2<'_, f32>,
        t: usize,
        edit: Option<&LatentEdit>,
    ) -> Result<Array2<f32>> {
        if x_t.dim() != cond.dim() {
            return Err(Error::Dimension(format!(
                "slice {:?} and condition {:?} differ",
                x_t.dim(),
                cond.dim()
            )));
        }
        let eps = self.forward(&slice_tensor(x_t)?, &slice_tensor(cond)?, &[t], edit)?;
        tensor_slice(&eps, x_t.dim())
    }
}

/// A slice-level point on the reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x_t: Array2<f32>,
    pub t: usize,
    pub z: Option<Array2<f32>>,
}

/// Conditional noise prediction (with the latent edit when `t` is inside the
/// configured range) followed by one plain reverse step.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step<P: ConditionalPredictor + ?Sized>(
    state: &DiffusionState,
    cond: ArrayView2<'_, f32>,
    model: &P,
    h: Option<&Hyperplane>,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
    z: ArrayView2<'_, f32>,
) -> Result<DiffusionState> {
    if state.t == 0 {
        return Err(Error::Config("cannot step below t = 0".into()));
    }
    let edit = match h {
        Some(h) if cfg.active_at(state.t) => Some(LatentEdit::new(h, cfg.lambda)?),
        _ => None,
    };
    let eps = model.predict_eps(state.x_t.view(), cond, state.t, edit.as_ref())?;
    let next = reverse_step(state.x_t.view(), eps.view(), state.t, sched, z)?;
    Ok(DiffusionState {
        x_t: next,
        t: state.t - 1,
        z: Some(z.to_owned()),
    })
}

/// Runs the guided chain from `state.t` to 0, drawing one noise field per step.
#[allow(clippy::too_many_arguments)]
pub fn guided_chain<P: ConditionalPredictor + ?Sized>(
    mut state: DiffusionState,
    cond: ArrayView2<'_, f32>,
    model: &P,
    h: Option<&Hyperplane>,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    while state.t > 0 {
        let z = gaussian_field(rng, state.x_t.dim());
        state = guided_reverse_step(&state, cond, model, h, cfg, sched, z.view())?;
    }
    Ok(state.x_t)
}

/// Refines XY slices in depth order. Slice `z` is scaled to its mapped step
/// `t(z)`, run down the guided chain conditioned on the refined slice `z - 1`,
/// then clipped to the intensity range. Slice 0 passes through unchanged.
pub fn denoise_volume<P: ConditionalPredictor + ?Sized>(
    vol: &Volume3D,
    model: &P,
    h: Option<&Hyperplane>,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Volume3D> {
    cfg.validate()?;
    let (_, _, c) = vol.dims();
    let (lo, hi) = vol.intensity_range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Array3<f32> = vol.data().clone();
    let mut prev = vol.xy_slice(0).to_owned();
    for z in 1..c {
        let t = step_for_index(z, c, sched.steps());
        let slice = vol.xy_slice(z);
        let scale = sched.alpha_bar(t).sqrt() as f32;
        let start = DiffusionState {
            x_t: slice.mapv(|v| v * scale),
            t,
            z: None,
        };
        let refined = guided_chain(start, prev.view(), model, h, cfg, sched, &mut rng)?;
        out.index_axis_mut(Axis(2), z).assign(&refined.mapv(|v| v.clamp(lo, hi)));
        prev = refined;
    }
    Ok(vol.with_data(out)?)
}
