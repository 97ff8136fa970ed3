//! Noise schedule and the closed-form forward / single-step reverse kernels.
//!
//! Steps are 1-based: `beta(t)`, `alpha_bar(t)` and `sigma(t)` are defined for
//! `t in 1..=T`, with `alpha_bar(0) == 1`.

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas with the fixed-variance reverse
    /// noise `sigma_t = sqrt(beta_t)` and `sigma_1 = 0`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Validation(format!("beta {b} outside (0, 1)")));
        }
        let mut alphas_bar = Vec::with_capacity(betas.len() + 1);
        alphas_bar.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alphas_bar.push(prod);
        }
        let sigmas = betas
            .iter()
            .enumerate()
            .map(|(i, b)| if i == 0 { 0.0 } else { b.sqrt() })
            .collect();
        Ok(Self {
            betas,
            alphas_bar,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar(1..=T)`.
    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar[1..]
    }

    /// Copy with every reverse-noise scale multiplied by `eta`; `eta = 0`
    /// turns the reverse chain deterministic.
    pub fn with_sigma_scale(&self, eta: f64) -> Self {
        Self {
            sigmas: self.sigmas.iter().map(|s| s * eta).collect(),
            ..self.clone()
        }
    }

    fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return Err(Error::Validation(format!(
                "step {t} outside [{lo}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Reverse-mean coefficients `(1/sqrt(1-b), b/(sqrt(1-abar) sqrt(1-b)))`.
    pub fn reverse_coefficients(&self, t: usize) -> (f64, f64) {
        let b = self.beta(t);
        let inv = 1.0 / (1.0 - b).sqrt();
        (inv, b / (1.0 - self.alpha_bar(t)).sqrt() * inv)
    }
}

/// Linearly spaced betas in `[beta_start, beta_end]`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Validation("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Validation(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

fn same_shape(a: &ArrayView2<'_, f32>, b: &ArrayView2<'_, f32>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`; `t = 0` returns `x0`.
pub fn q_sample(x0: ArrayView2<'_, f32>, t: usize, eps: ArrayView2<'_, f32>, sched: &NoiseSchedule) -> Result<Array2<f32>> {
    same_shape(&x0, &eps, "q_sample")?;
    sched.check_step(t, true)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| (a * x as f64 + b * e as f64) as f32))
}

/// One reverse step:
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(1 - beta_t) + sigma_t z`.
pub fn reverse_step(
    x_t: ArrayView2<'_, f32>,
    eps_pred: ArrayView2<'_, f32>,
    t: usize,
    sched: &NoiseSchedule,
    z: ArrayView2<'_, f32>,
) -> Result<Array2<f32>> {
    same_shape(&x_t, &eps_pred, "reverse_step eps_pred")?;
    same_shape(&x_t, &z, "reverse_step z")?;
    sched.check_step(t, false)?;
    let (inv, c_eps) = sched.reverse_coefficients(t);
    let sigma = sched.sigma(t);
    Ok(Zip::from(&x_t)
        .and(&eps_pred)
        .and(&z)
        .map_collect(|&x, &e, &n| (inv * x as f64 - c_eps * e as f64 + sigma * n as f64) as f32))
}

/// Anything that predicts the noise in `x_t` at step `t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: ArrayView2<'_, f32>, t: usize) -> Result<Array2<f32>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(ArrayView2<'_, f32>, usize) -> Result<Array2<f32>>,
{
    fn predict(&self, x_t: ArrayView2<'_, f32>, t: usize) -> Result<Array2<f32>> {
        self(x_t, t)
    }
}

/// Standard-normal field drawn from `rng` in row-major order.
pub fn gaussian_field(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    })
}

/// Runs `reverse_step` from `T` down to 1. One noise field is drawn per step
/// from a `ChaCha8Rng` seeded with `seed`, whether or not `sigma_t` is zero.
pub fn full_reverse(
    x_big_t: ArrayView2<'_, f32>,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x_big_t.to_owned();
    for t in (1..=sched.steps()).rev() {
        let eps = predictor.predict(x.view(), t)?;
        if eps.dim() != x.dim() {
            return Err(Error::Contract(format!(
                "predictor returned shape {:?} for input {:?} at step {t}",
                eps.dim(),
                x.dim()
            )));
        }
        let z = gaussian_field(&mut rng, x.dim());
        x = reverse_step(x.view(), eps.view(), t, sched, z.view())?;
    }
    Ok(x)
}
