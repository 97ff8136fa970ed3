//! Training objectives as differentiable candle expressions, plus the
//! weighted loss bookkeeping shared by the trainer and its logs.
//!
//! Every loss returns a rank-0 tensor in the dtype of its inputs, so the same
//! code runs in f32 for training and in f64 for gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `sqrt(s)` with the value and gradient taken as 0 wherever `s == 0`.
fn safe_sqrt(s: &Tensor) -> Result<Tensor> {
    let positive = s.gt(0.0)?;
    let ones = s.ones_like()?;
    let root = positive.where_cond(s, &ones)?.sqrt()?;
    Ok(positive.where_cond(&root, &s.zeros_like()?)?)
}

/// Least-squares discriminator objective `mean((D(real) - 1)^2) + mean(D(fake)^2)`.
pub fn adversarial_d(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real = d_real.affine(1.0, -1.0)?.sqr()?.mean_all()?;
    let fake = d_fake.sqr()?.mean_all()?;
    Ok((real + fake)?)
}

/// Least-squares generator objective `mean((D(fake) - 1)^2)`.
pub fn adversarial_g(d_fake: &Tensor) -> Result<Tensor> {
    Ok(d_fake.affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

/// Mean absolute error between an input and its round trip.
pub fn cycle_consistency(x: &Tensor, x_reconstructed: &Tensor) -> Result<Tensor> {
    same_shape(x, x_reconstructed, "cycle loss")?;
    Ok((x - x_reconstructed)?.abs()?.mean_all()?)
}

/// Mean absolute error between an in-domain input and the generator applied to it.
pub fn identity_loss(x: &Tensor, g_of_x: &Tensor) -> Result<Tensor> {
    same_shape(x, g_of_x, "identity loss")?;
    Ok((x - g_of_x)?.abs()?.mean_all()?)
}

/// Isotropic total variation over the last two axes `(i, j)`, summed over the
/// interior `i < h-1, j < w-1` and divided by the element count. Leading axes
/// are independent channels.
pub fn tv_loss(img: &Tensor) -> Result<Tensor> {
    let rank = img.rank();
    if rank < 2 {
        return Err(Error::Dimension(format!("TV needs at least 2 axes, got shape {:?}", img.dims())));
    }
    let (h, w) = (img.dims()[rank - 2], img.dims()[rank - 1]);
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!("TV needs h, w >= 2, got shape {:?}", img.dims())));
    }
    let base = img.narrow(rank - 2, 0, h - 1)?.narrow(rank - 1, 0, w - 1)?;
    let right = img.narrow(rank - 2, 0, h - 1)?.narrow(rank - 1, 1, w - 1)?;
    let down = img.narrow(rank - 2, 1, h - 1)?.narrow(rank - 1, 0, w - 1)?;
    let sq = ((&right - &base)?.sqr()? + (&down - &base)?.sqr()?)?;
    let total = safe_sqrt(&sq)?.sum_all()?;
    Ok(total.affine(1.0 / img.elem_count() as f64, 0.0)?)
}

/// `||phi(pred) - phi(ref)||_2` divided by the feature element count.
pub fn content_loss<F>(pred: &Tensor, reference: &Tensor, encoder: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    same_shape(pred, reference, "content loss")?;
    let (fp, fr) = (encoder(pred)?, encoder(reference)?);
    same_shape(&fp, &fr, "content loss features")?;
    let sq = (&fp - &fr)?.sqr()?.sum_all()?;
    Ok(safe_sqrt(&sq)?.affine(1.0 / fp.elem_count() as f64, 0.0)?)
}

/// Noise-prediction mean squared error.
pub fn diffusion_loss(eps_true: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    same_shape(eps_true, eps_pred, "diffusion loss")?;
    Ok((eps_true - eps_pred)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Denoise,
    Sr,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Denoise, Phase::Sr, Phase::Joint];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Denoise => "DENOISE",
            Phase::Sr => "SR",
            Phase::Joint => "JOINT",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DENOISE" => Ok(Phase::Denoise),
            "SR" => Ok(Phase::Sr),
            "JOINT" => Ok(Phase::Joint),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

/// Optional per-phase replacements for individual weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightOverrides {
    pub w_adv: Option<f64>,
    pub w_cyc: Option<f64>,
    pub w_id: Option<f64>,
    pub w_tv: Option<f64>,
    pub w_content: Option<f64>,
    pub w_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_cyc: f64,
    pub w_id: f64,
    pub w_tv: f64,
    pub w_content: f64,
    pub w_diff: f64,
    pub phase_schedule: BTreeMap<Phase, WeightOverrides>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_adv: 1.0,
            w_cyc: 10.0,
            w_id: 5.0,
            w_tv: 0.1,
            w_content: 1.0,
            w_diff: 1.0,
            phase_schedule: BTreeMap::new(),
        }
    }
}

/// The six weights in effect at one point of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveWeights {
    pub w_adv: f64,
    pub w_cyc: f64,
    pub w_id: f64,
    pub w_tv: f64,
    pub w_content: f64,
    pub w_diff: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.base()];
        all.extend(Phase::ALL.iter().map(|p| self.active(*p)));
        for w in all {
            let v = [w.w_adv, w.w_cyc, w.w_id, w.w_tv, w.w_content, w.w_diff];
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w:?}")));
            }
        }
        Ok(())
    }

    pub fn base(&self) -> ActiveWeights {
        ActiveWeights {
            w_adv: self.w_adv,
            w_cyc: self.w_cyc,
            w_id: self.w_id,
            w_tv: self.w_tv,
            w_content: self.w_content,
            w_diff: self.w_diff,
        }
    }

    /// Base weights with the phase's overrides applied.
    pub fn active(&self, phase: Phase) -> ActiveWeights {
        let mut w = self.base();
        if let Some(o) = self.phase_schedule.get(&phase) {
            w.w_adv = o.w_adv.unwrap_or(w.w_adv);
            w.w_cyc = o.w_cyc.unwrap_or(w.w_cyc);
            w.w_id = o.w_id.unwrap_or(w.w_id);
            w.w_tv = o.w_tv.unwrap_or(w.w_tv);
            w.w_content = o.w_content.unwrap_or(w.w_content);
            w.w_diff = o.w_diff.unwrap_or(w.w_diff);
        }
        w
    }
}

/// Unweighted loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cyc: f64,
    pub id: f64,
    pub tv: f64,
    pub content: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cyc: f64,
    pub id: f64,
    pub tv: f64,
    pub content: f64,
    pub diff: f64,
    pub total: f64,
}

impl ActiveWeights {
    /// Adversarial group (both directions), denoising-cycle group (diffusion
    /// and TV), SR-cycle group (cycle and content) and the identity term.
    pub fn total(&self, p: &LossParts) -> f64 {
        let adversarial = self.w_adv * (p.adv_g + p.adv_d);
        let denoise_cycle = self.w_diff * p.diff + self.w_tv * p.tv;
        let sr_cycle = self.w_cyc * p.cyc + self.w_content * p.content;
        let identity = self.w_id * p.id;
        adversarial + denoise_cycle + sr_cycle + identity
    }
}

pub fn total_loss(parts: LossParts, weights: &LossWeights, phase: Phase) -> LossBreakdown {
    let total = weights.active(phase).total(&parts);
    LossBreakdown {
        adv_g: parts.adv_g,
        adv_d: parts.adv_d,
        cyc: parts.cyc,
        id: parts.id,
        tv: parts.tv,
        content: parts.content,
        diff: parts.diff,
        total,
    }
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            adv_g: self.adv_g,
            adv_d: self.adv_d,
            cyc: self.cyc,
            id: self.id,
            tv: self.tv,
            content: self.content,
            diff: self.diff,
        }
    }

    pub fn is_finite(&self) -> bool {
        let p = self.parts();
        [p.adv_g, p.adv_d, p.cyc, p.id, p.tv, p.content, p.diff, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Reads a rank-0 tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
