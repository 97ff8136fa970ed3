//! Progressive training: DENOISE, then SR, then JOINT.
//!
//! DENOISE fits the noise predictor on shallow (low-noise) XY slices, with TV,
//! identity and adversarial terms on one-step estimates of deep slices.
//! SR trains the propagation module on denoised training volumes through the
//! HR to LR cycle. JOINT chains a one-step denoise of every slice into the SR
//! module and optimizes all terms together.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, Device, Tensor};
use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vtcd_core::diffusion::{make_linear_schedule, NoiseSchedule};
use vtcd_core::phantom::{DatasetManifest, Split};
use vtcd_core::volume::step_for_index;
use vtcd_core::Volume3D;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
use crate::degrade::{AxialDegrader, ReverseMode};
use crate::denoiser::{denoise_volume, DenoiserConfig, DenoiserModel, EditConfig, Hyperplane};
use crate::disc::PatchDiscriminator;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d, adversarial_g, content_loss, cycle_consistency, diffusion_loss, identity_loss, scalar, total_loss,
    tv_loss, ActiveWeights, LossBreakdown, LossParts, LossWeights, Phase, WeightOverrides,
};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::params::{ParamStore, TensorRecord};
use crate::srm::{SrmConfig, SrmModel};

pub const CHECKPOINT_FILE: &str = "checkpoint.vtcd";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_phase: [usize; 3],
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
    pub batch_size: usize,
    #[serde(rename = "T")]
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub sr_scale: usize,
    /// Blur of the analytic HR to LR operator, in fine voxels.
    pub axial_blur_sigma: f64,
    pub reverse_mode: ReverseMode,
    pub denoiser_channels: usize,
    pub srm: SrmConfig,
    pub disc_width: usize,
    /// Lateral crop size and batch size of SR and JOINT volume batches.
    pub sr_crop: usize,
    pub sr_batch: usize,
    pub edit_lambda: f64,
    /// Defaults to `[1, T]`.
    pub edit_range: Option<(usize, usize)>,
    /// Reverse-noise multiplier used at restoration time.
    pub sample_eta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut schedule = BTreeMap::new();
        schedule.insert(
            Phase::Denoise,
            WeightOverrides {
                w_adv: Some(0.05),
                w_id: Some(1.0),
                ..Default::default()
            },
        );
        schedule.insert(
            Phase::Sr,
            WeightOverrides {
                w_adv: Some(0.05),
                ..Default::default()
            },
        );
        schedule.insert(
            Phase::Joint,
            WeightOverrides {
                w_adv: Some(0.05),
                w_id: Some(1.0),
                ..Default::default()
            },
        );
        Self {
            epochs_per_phase: [6, 4, 2],
            steps_per_epoch: 50,
            learning_rate: 5e-3,
            weight_decay: 1e-5,
            amsgrad: true,
            batch_size: 8,
            diffusion_steps: 16,
            beta_start: 1e-4,
            beta_end: 2.6e-3,
            seed: 0,
            loss_weights: LossWeights {
                phase_schedule: schedule,
                ..LossWeights::default()
            },
            sr_scale: 4,
            axial_blur_sigma: 1.0,
            reverse_mode: ReverseMode::Analytic,
            denoiser_channels: 8,
            srm: SrmConfig::default(),
            disc_width: 8,
            sr_crop: 16,
            sr_batch: 2,
            edit_lambda: 0.1,
            edit_range: None,
            sample_eta: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("T", self.diffusion_steps),
            ("sr_scale", self.sr_scale),
            ("denoiser_channels", self.denoiser_channels),
            ("disc_width", self.disc_width),
            ("sr_crop", self.sr_crop),
            ("sr_batch", self.sr_batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.sample_eta >= 0.0 && self.sample_eta.is_finite()) {
            return Err(Error::Config("sample_eta must be >= 0".into()));
        }
        self.loss_weights.validate()?;
        self.schedule()?;
        self.edit()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)?)
    }

    pub fn edit(&self) -> Result<EditConfig> {
        EditConfig::new(self.edit_lambda, self.edit_range.unwrap_or((1, self.diffusion_steps)))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            amsgrad: self.amsgrad,
            ..AdamConfig::default()
        }
    }

    fn srm_config(&self) -> SrmConfig {
        SrmConfig {
            scale: self.sr_scale,
            ..self.srm
        }
    }
}

/// Every network touched by training.
#[derive(Debug, Clone)]
pub struct Models {
    pub denoiser: DenoiserModel,
    pub srm: SrmModel,
    pub disc_a: PatchDiscriminator,
    pub disc_b: PatchDiscriminator,
    pub reverse: AxialDegrader,
}

const GROUPS: [&str; 5] = ["den", "srm", "disc_a", "disc_b", "rev"];

impl Models {
    pub fn init(config: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let denoiser = DenoiserModel::new(
            DenoiserConfig {
                channels: config.denoiser_channels,
                steps: config.diffusion_steps,
            },
            &mut rng,
        )?;
        let disc_a = PatchDiscriminator::new("dA", config.disc_width, &mut rng)?;
        let disc_b = PatchDiscriminator::new("dB", config.disc_width, &mut rng)?;
        let srm = SrmModel::new(config.srm_config())?;
        let reverse = AxialDegrader::new(config.sr_scale, config.axial_blur_sigma, config.reverse_mode)?;
        Ok(Self {
            denoiser,
            srm,
            disc_a,
            disc_b,
            reverse,
        })
    }

    pub fn group(&self, name: &str) -> &ParamStore {
        match name {
            "den" => &self.denoiser.store,
            "srm" => &self.srm.store,
            "disc_a" => &self.disc_a.store,
            "disc_b" => &self.disc_b.store,
            _ => &self.reverse.store,
        }
    }

    pub fn export(&self) -> Result<Vec<TensorRecord>> {
        let mut out = Vec::new();
        for g in GROUPS {
            for mut rec in self.group(g).export()? {
                rec.name = format!("param/{}", rec.name);
                out.push(rec);
            }
        }
        Ok(out)
    }

    pub fn import(&self, ckpt: &Checkpoint) -> Result<()> {
        for g in GROUPS {
            let store = self.group(g);
            let records: Vec<TensorRecord> = store
                .names()
                .map(|n| {
                    ckpt.tensor(&format!("param/{n}"))
                        .map(|r| TensorRecord {
                            name: n.to_string(),
                            ..r.clone()
                        })
                        .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {n}")))
                })
                .collect::<Result<_>>()?;
            store.import(&records)?;
        }
        Ok(())
    }

    /// Rebuilds the networks described by a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let models = Self::init(&ckpt.config, ckpt.config.seed)?;
        models.import(ckpt)?;
        Ok(models)
    }
}

struct Optimizers {
    adams: Vec<Adam>,
}

impl Optimizers {
    fn new(models: &Models, cfg: AdamConfig) -> Result<Self> {
        let adams = GROUPS
            .iter()
            .map(|g| Adam::new(models.group(g).vars(), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { adams })
    }

    fn step(&mut self, group: &str, grads: &GradStore) -> Result<()> {
        let i = GROUPS.iter().position(|g| *g == group).expect("known group");
        self.adams[i].step(grads)
    }

    fn export(&self) -> (BTreeMap<String, Vec<u64>>, Vec<TensorRecord>) {
        let mut steps = BTreeMap::new();
        let mut records = Vec::new();
        for (g, adam) in GROUPS.iter().zip(&self.adams) {
            steps.insert(g.to_string(), adam.state().iter().map(|m| m.step).collect());
            for (i, m) in adam.state().iter().enumerate() {
                for (tag, buf) in [("m", &m.m), ("v", &m.v), ("v_max", &m.v_max)] {
                    records.push(TensorRecord {
                        name: format!("adam/{g}/{i}/{tag}"),
                        shape: vec![buf.len()],
                        data: buf.clone(),
                    });
                }
            }
        }
        (steps, records)
    }

    fn import(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (g, adam) in GROUPS.iter().zip(self.adams.iter_mut()) {
            let steps = ckpt
                .optimizer_steps
                .get(*g)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state for {g}")))?;
            let mut state = Vec::with_capacity(steps.len());
            for (i, step) in steps.iter().enumerate() {
                let buf = |tag: &str| -> Result<Vec<f32>> {
                    ckpt.tensor(&format!("adam/{g}/{i}/{tag}"))
                        .map(|r| r.data.clone())
                        .ok_or_else(|| Error::Config(format!("checkpoint lacks adam/{g}/{i}/{tag}")))
                };
                state.push(Moments {
                    step: *step,
                    m: buf("m")?,
                    v: buf("v")?,
                    v_max: buf("v_max")?,
                });
            }
            adam.set_state(state)?;
        }
        Ok(())
    }
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    /// 1-based epoch index within the phase.
    pub epoch: usize,
    pub steps: usize,
    pub weights: ActiveWeights,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Weighted total of every optimization step, in order.
    pub step_totals: Vec<(Phase, f64)>,
}

/// Slices for the denoising objectives.
struct DenoiseData {
    /// Shallow slices and their conditions (the previous slice, or itself at z = 0).
    shallow: Vec<(Array2<f32>, Array2<f32>)>,
    /// Deep slices, their conditions and mapped steps.
    deep: Vec<(Array2<f32>, Array2<f32>, usize)>,
    shape: (usize, usize),
}

impl DenoiseData {
    fn new(volumes: &[Volume3D], steps: usize) -> Result<Self> {
        let mut shallow = Vec::new();
        let mut deep = Vec::new();
        for vol in volumes {
            let c = vol.dims().2;
            if c < 2 {
                return Err(Error::Config("training volumes need at least 2 XY slices".into()));
            }
            let q = (c / 4).max(1);
            for z in 0..q {
                shallow.push((vol.xy_slice(z).to_owned(), vol.xy_slice(z.saturating_sub(1)).to_owned()));
            }
            for z in (c / 2).max(1)..c {
                deep.push((
                    vol.xy_slice(z).to_owned(),
                    vol.xy_slice(z - 1).to_owned(),
                    step_for_index(z, c, steps),
                ));
            }
        }
        let (h, w, _) = volumes[0].dims();
        Ok(Self {
            shallow,
            deep,
            shape: (h, w),
        })
    }
}

fn stack_slices(slices: &[Array2<f32>]) -> Result<Tensor> {
    let (h, w) = slices[0].dim();
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        data.extend(s.iter().copied());
    }
    Ok(Tensor::from_vec(data, (slices.len(), 1, h, w), &Device::Cpu)?)
}

fn flip(s: &Array2<f32>, bits: u8) -> Array2<f32> {
    let mut v = s.view();
    if bits & 1 != 0 {
        v.invert_axis(Axis(0));
    }
    if bits & 2 != 0 {
        v.invert_axis(Axis(1));
    }
    v.to_owned()
}

/// Per-sample `sqrt((1 - abar_t) / abar_t)` as an `(N, 1, 1, 1)` tensor.
fn x0_coef(sched: &NoiseSchedule, t: &[usize]) -> Result<Tensor> {
    let v: Vec<f32> = t
        .iter()
        .map(|s| {
            let ab = sched.alpha_bar(*s);
            ((1.0 - ab) / ab).sqrt() as f32
        })
        .collect();
    Ok(Tensor::from_vec(v, (t.len(), 1, 1, 1), &Device::Cpu)?)
}

/// `(B, H, W, C)` to the stack of its XY slices `(B C, 1, H, W)`.
fn xy_slices(t: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = t.dims4()?;
    Ok(t.permute((0, 3, 1, 2))?.reshape((b * c, 1, h, w))?)
}

/// `(B, H, W, C)` to the stack of its XZ slices `(B W, 1, H, C)`.
fn xz_slices(t: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = t.dims4()?;
    Ok(t.permute((0, 2, 1, 3))?.reshape((b * w, 1, h, c))?)
}

struct DenoiseTerms {
    diff: Tensor,
    tv: Tensor,
    id: Tensor,
    adv_g: Tensor,
    real: Tensor,
    fake: Tensor,
}

struct SrTerms {
    cyc: Tensor,
    content: Tensor,
    adv_g: Tensor,
    real: Tensor,
    fake: Tensor,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    sched: NoiseSchedule,
    models: Models,
    opts: Optimizers,
    rng: ChaCha8Rng,
    raw: Vec<Volume3D>,
    denoise_data: DenoiseData,
    sr_volumes: Option<Vec<Volume3D>>,
    hyperplane: Option<Hyperplane>,
    completed: [usize; 3],
    last_phase: Phase,
    out_dir: PathBuf,
    log: Vec<EpochLog>,
    step_totals: Vec<(Phase, f64)>,
}

impl<'a> Trainer<'a> {
    fn denoise_terms(&mut self) -> Result<DenoiseTerms> {
        let b = self.config.batch_size;
        let steps = self.config.diffusion_steps;
        let data = &self.denoise_data;
        let (h, w) = data.shape;
        let mut x0 = Vec::with_capacity(b);
        let mut cond = Vec::with_capacity(b);
        let mut t = Vec::with_capacity(3 * b);
        let mut noisy = Vec::with_capacity(b);
        let mut eps = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.rng.random_range(0..data.shallow.len());
            let bits: u8 = self.rng.random_range(0..4);
            let ti = self.rng.random_range(1..=steps);
            let e = Array2::from_shape_simple_fn((h, w), || {
                let v: f64 = self.rng.sample(StandardNormal);
                v as f32
            });
            let (s, c) = &data.shallow[i];
            let (s, c) = (flip(s, bits), flip(c, bits));
            let ab = self.sched.alpha_bar(ti);
            let (a, bb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            noisy.push(&s * a + &e * bb);
            x0.push(s);
            cond.push(c);
            eps.push(e);
            t.push(ti);
        }
        let mut deep = Vec::with_capacity(b);
        let mut deep_cond = Vec::with_capacity(b);
        let mut deep_scaled = Vec::with_capacity(b);
        let mut deep_t = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.rng.random_range(0..data.deep.len());
            let bits: u8 = self.rng.random_range(0..4);
            let (s, c, ti) = &data.deep[i];
            let s = flip(s, bits);
            let a = self.sched.alpha_bar(*ti).sqrt() as f32;
            deep_scaled.push(&s * a);
            deep.push(s);
            deep_cond.push(flip(c, bits));
            deep_t.push(*ti);
        }
        let ab1 = self.sched.alpha_bar(1).sqrt() as f32;
        let id_in: Vec<Array2<f32>> = x0.iter().map(|s| s * ab1).collect();

        let mut inputs = noisy;
        inputs.extend(deep_scaled);
        inputs.extend(id_in);
        let mut conds = cond.clone();
        conds.extend(deep_cond);
        conds.extend(cond);
        t.extend(deep_t.iter().copied());
        t.extend(std::iter::repeat_n(1, b));

        let eps_pred = self
            .models
            .denoiser
            .forward(&stack_slices(&inputs)?, &stack_slices(&conds)?, &t, None)?;
        let eps_true = stack_slices(&eps)?;
        let x0_t = stack_slices(&x0)?;
        let deep_t_tensor = stack_slices(&deep)?;

        let diff = diffusion_loss(&eps_true, &eps_pred.narrow(0, 0, b)?)?;
        let deep_hat = (&deep_t_tensor - eps_pred.narrow(0, b, b)?.broadcast_mul(&x0_coef(&self.sched, &deep_t)?)?)?;
        let tv = tv_loss(&deep_hat)?;
        let id_hat = (&x0_t - eps_pred.narrow(0, 2 * b, b)?.broadcast_mul(&x0_coef(&self.sched, &vec![1; b])?)?)?;
        let id = identity_loss(&x0_t, &id_hat)?;
        let adv_g = adversarial_g(&self.models.disc_a.forward(&deep_hat)?)?;
        Ok(DenoiseTerms {
            diff,
            tv,
            id,
            adv_g,
            real: x0_t,
            fake: deep_hat,
        })
    }

    /// Random lateral crops of `batch` volumes, full depth, as `(B, h, w, C)`.
    fn crops(&mut self, source_sr: bool) -> Result<Tensor> {
        let vols = if source_sr {
            self.sr_volumes.as_ref().expect("SR volumes prepared")
        } else {
            &self.raw
        };
        let (h, w, c) = vols[0].dims();
        let (ch, cw) = (self.config.sr_crop.min(h), self.config.sr_crop.min(w));
        let b = self.config.sr_batch;
        let mut out = Array4::<f32>::zeros((b, ch, cw, c));
        for k in 0..b {
            let i = self.rng.random_range(0..vols.len());
            let x0 = self.rng.random_range(0..=h - ch);
            let y0 = self.rng.random_range(0..=w - cw);
            let src = vols[i].data().slice(ndarray::s![x0..x0 + ch, y0..y0 + cw, ..]);
            out.index_axis_mut(Axis(0), k).assign(&src);
        }
        let data: Vec<f32> = out.iter().copied().collect();
        Ok(Tensor::from_vec(data, (b, ch, cw, c), &Device::Cpu)?)
    }

    /// Differentiable one-step denoise of every slice `z >= 1` of a
    /// `(B, h, w, C)` batch, conditioned on the raw slice `z - 1`.
    fn one_step_denoise(&self, lr: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = lr.dims4()?;
        let steps = self.config.diffusion_steps;
        let slices = lr.permute((0, 3, 1, 2))?.contiguous()?;
        let cur = slices.narrow(1, 1, c - 1)?.reshape((b * (c - 1), 1, h, w))?;
        let prev = slices.narrow(1, 0, c - 1)?.reshape((b * (c - 1), 1, h, w))?;
        let ts: Vec<usize> = (0..b).flat_map(|_| (1..c).map(|z| step_for_index(z, c, steps))).collect();
        let scale: Vec<f32> = ts.iter().map(|t| self.sched.alpha_bar(*t).sqrt() as f32).collect();
        let scale = Tensor::from_vec(scale, (ts.len(), 1, 1, 1), &Device::Cpu)?;
        let eps = self.models.denoiser.forward(&cur.broadcast_mul(&scale)?, &prev, &ts, None)?;
        let hat = (&cur - eps.broadcast_mul(&x0_coef(&self.sched, &ts)?)?)?;
        let hat = hat.reshape((b, c - 1, h, w))?;
        let all = Tensor::cat(&[&slices.narrow(1, 0, 1)?, &hat], 1)?;
        Ok(all.permute((0, 2, 3, 1))?.contiguous()?)
    }

    /// The cycle target is detached so that a denoiser feeding `lr` cannot
    /// shrink the cycle by collapsing its own output.
    fn sr_terms(&self, lr: &Tensor) -> Result<SrTerms> {
        let out = self.models.srm.forward_batch(lr)?;
        let rec = self.models.reverse.forward(&out)?;
        let target = lr.detach();
        let cyc = cycle_consistency(&target, &rec)?;
        let encoder = &self.models.srm.encoder;
        let content = content_loss(&xy_slices(&rec)?, &xy_slices(&target)?, |x| encoder.encode(x))?;
        let fake = xz_slices(&out)?;
        let adv_g = adversarial_g(&self.models.disc_b.forward(&fake)?)?;
        Ok(SrTerms {
            cyc,
            content,
            adv_g,
            real: xy_slices(&lr.detach())?,
            fake,
        })
    }

    fn step(&mut self, phase: Phase, w: &ActiveWeights) -> Result<LossBreakdown> {
        let zero = Tensor::zeros((), candle_core::DType::F32, &Device::Cpu)?;
        let mut parts = LossParts::default();
        let mut g_loss = zero.clone();
        let mut d_loss = zero;

        let den = if phase != Phase::Sr { Some(self.denoise_terms()?) } else { None };
        let sr = match phase {
            Phase::Denoise => None,
            Phase::Sr => {
                let lr = self.crops(true)?;
                Some(self.sr_terms(&lr)?)
            }
            Phase::Joint => {
                let lr = self.crops(false)?;
                let den_lr = self.one_step_denoise(&lr)?.detach();
                Some(self.sr_terms(&den_lr)?)
            }
        };

        if let Some(d) = &den {
            g_loss = (g_loss
                + (d.diff.affine(w.w_diff, 0.0)?
                    + d.tv.affine(w.w_tv, 0.0)?
                    + d.id.affine(w.w_id, 0.0)?
                    + d.adv_g.affine(w.w_adv, 0.0)?)?)?;
            parts.diff = scalar(&d.diff)?;
            parts.tv = scalar(&d.tv)?;
            parts.id = scalar(&d.id)?;
            parts.adv_g += scalar(&d.adv_g)?;
        }
        if let Some(s) = &sr {
            g_loss = (g_loss
                + (s.cyc.affine(w.w_cyc, 0.0)? + s.content.affine(w.w_content, 0.0)? + s.adv_g.affine(w.w_adv, 0.0)?)?)?;
            parts.cyc = scalar(&s.cyc)?;
            parts.content = scalar(&s.content)?;
            parts.adv_g += scalar(&s.adv_g)?;
        }
        let g_value = scalar(&g_loss)?;
        if !g_value.is_finite() {
            return Ok(total_loss_nan(parts));
        }
        let grads = g_loss.backward()?;
        if den.is_some() {
            self.opts.step("den", &grads)?;
        }
        if sr.is_some() {
            self.opts.step("srm", &grads)?;
            if phase == Phase::Joint && self.config.reverse_mode == ReverseMode::Learned {
                self.opts.step("rev", &grads)?;
            }
        }

        if let Some(d) = &den {
            let a = adversarial_d(
                &self.models.disc_a.forward(&d.real)?,
                &self.models.disc_a.forward(&d.fake.detach())?,
            )?;
            parts.adv_d += scalar(&a)?;
            d_loss = (d_loss + a.affine(w.w_adv, 0.0)?)?;
        }
        if let Some(s) = &sr {
            let a = adversarial_d(
                &self.models.disc_b.forward(&s.real)?,
                &self.models.disc_b.forward(&s.fake.detach())?,
            )?;
            parts.adv_d += scalar(&a)?;
            d_loss = (d_loss + a.affine(w.w_adv, 0.0)?)?;
        }
        if !scalar(&d_loss)?.is_finite() {
            return Ok(total_loss_nan(parts));
        }
        if w.w_adv > 0.0 {
            let grads = d_loss.backward()?;
            if den.is_some() {
                self.opts.step("disc_a", &grads)?;
            }
            if sr.is_some() {
                self.opts.step("disc_b", &grads)?;
            }
        }
        Ok(total_loss(parts, &self.config.loss_weights, phase))
    }

    fn prepare_sr_volumes(&mut self) -> Result<()> {
        if self.sr_volumes.is_some() {
            return Ok(());
        }
        let sched = self.sched.with_sigma_scale(self.config.sample_eta);
        let edit = self.config.edit()?;
        let vols = self
            .raw
            .iter()
            .enumerate()
            .map(|(i, v)| {
                denoise_volume(
                    v,
                    &self.models.denoiser,
                    self.hyperplane.as_ref(),
                    &edit,
                    &sched,
                    self.config.seed.wrapping_add(i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        self.sr_volumes = Some(vols);
        Ok(())
    }

    fn refit_hyperplane(&mut self) -> Result<()> {
        let refs: Vec<&Volume3D> = self.raw.iter().collect();
        self.hyperplane = Some(self.models.denoiser.fit_hyperplane_on(&refs)?);
        Ok(())
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let (optimizer_steps, moments) = self.opts.export();
        let mut tensors = self.models.export()?;
        tensors.extend(moments);
        Ok(Checkpoint {
            format_version: CHECKPOINT_VERSION,
            phase: self.last_phase,
            epoch: self.completed[self.last_phase.index()],
            completed: self.completed,
            config: self.config.clone(),
            rng: RngState::capture(&self.rng),
            hyperplane: self.hyperplane.clone(),
            optimizer_steps,
            tensors,
        })
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_FILE)
    }

    fn append_log(&self, entry: &EpochLog) -> Result<()> {
        let path = self.out_dir.join(LOG_FILE);
        let line = serde_json::to_string(entry).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn run(&mut self) -> Result<()> {
        for phase in Phase::ALL {
            let target = self.config.epochs_per_phase[phase.index()];
            if self.completed[phase.index()] >= target {
                continue;
            }
            if phase == Phase::Sr {
                self.prepare_sr_volumes()?;
            }
            let weights = self.config.loss_weights.active(phase);
            while self.completed[phase.index()] < target {
                let epoch = self.completed[phase.index()] + 1;
                let mut sum = LossBreakdown::default();
                for step in 0..self.config.steps_per_epoch {
                    let b = self.step(phase, &weights)?;
                    if !b.is_finite() {
                        return Err(Error::NonFinite {
                            phase: phase.to_string(),
                            epoch,
                            step,
                            checkpoint: self.checkpoint_path(),
                        });
                    }
                    self.step_totals.push((phase, b.total));
                    accumulate(&mut sum, &b);
                }
                let n = self.config.steps_per_epoch as f64;
                let mean = LossBreakdown {
                    adv_g: sum.adv_g / n,
                    adv_d: sum.adv_d / n,
                    cyc: sum.cyc / n,
                    id: sum.id / n,
                    tv: sum.tv / n,
                    content: sum.content / n,
                    diff: sum.diff / n,
                    total: sum.total / n,
                };
                self.completed[phase.index()] = epoch;
                self.last_phase = phase;
                if epoch == target && phase != Phase::Sr {
                    self.refit_hyperplane()?;
                }
                let entry = EpochLog {
                    phase,
                    epoch,
                    steps: self.config.steps_per_epoch,
                    weights,
                    losses: mean,
                };
                self.append_log(&entry)?;
                self.log.push(entry);
                save_checkpoint(&self.checkpoint()?, self.checkpoint_path())?;
            }
        }
        Ok(())
    }
}

fn total_loss_nan(parts: LossParts) -> LossBreakdown {
    LossBreakdown {
        total: f64::NAN,
        ..total_loss(parts, &LossWeights::default(), Phase::Denoise)
    }
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    sum.adv_g += b.adv_g;
    sum.adv_d += b.adv_d;
    sum.cyc += b.cyc;
    sum.id += b.id;
    sum.tv += b.tv;
    sum.content += b.content;
    sum.diff += b.diff;
    sum.total += b.total;
}

/// Degraded training volumes of the manifest's train split.
pub fn load_training_volumes(manifest: &DatasetManifest) -> Result<Vec<Volume3D>> {
    let vols = manifest
        .entries_in(Split::Train)
        .map(|e| manifest.load_degraded(e))
        .collect::<vtcd_core::Result<Vec<_>>>()?;
    if vols.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let dims = vols[0].dims();
    if vols.iter().any(|v| v.dims() != dims) {
        return Err(Error::Config("training volumes must share one shape".into()));
    }
    Ok(vols)
}

fn prepare_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))
}

fn build<'a>(config: &'a TrainConfig, volumes: Vec<Volume3D>, out_dir: &Path) -> Result<Trainer<'a>> {
    config.validate()?;
    if volumes.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (_, _, c) = volumes[0].dims();
    if c < 2 {
        return Err(Error::Config(format!("training volumes need depth >= 2, got {c}")));
    }
    let models = Models::init(config, config.seed)?;
    let opts = Optimizers::new(&models, config.adam())?;
    let denoise_data = DenoiseData::new(&volumes, config.diffusion_steps)?;
    Ok(Trainer {
        config,
        sched: config.schedule()?,
        models,
        opts,
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed)),
        raw: volumes,
        denoise_data,
        sr_volumes: None,
        hyperplane: None,
        completed: [0; 3],
        last_phase: Phase::Denoise,
        out_dir: out_dir.to_path_buf(),
        log: Vec::new(),
        step_totals: Vec::new(),
    })
}

/// Trains from scratch on in-memory degraded volumes.
pub fn train_volumes(config: &TrainConfig, volumes: Vec<Volume3D>, out_dir: impl AsRef<Path>) -> Result<TrainReport> {
    let out_dir = out_dir.as_ref();
    prepare_out_dir(out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    fs::write(&log_path, b"").map_err(|e| Error::io(&log_path, e))?;
    let mut t = build(config, volumes, out_dir)?;
    save_checkpoint(&t.checkpoint()?, t.checkpoint_path())?;
    t.run()?;
    Ok(TrainReport {
        checkpoint: t.checkpoint()?,
        log: t.log,
        step_totals: t.step_totals,
    })
}

/// Trains from scratch on the manifest's train split, writing the epoch log
/// and checkpoints into `out_dir`.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest, out_dir: impl AsRef<Path>) -> Result<TrainReport> {
    train_volumes(config, load_training_volumes(manifest)?, out_dir)
}

/// Continues the run saved in `checkpoint` under `config`, which may extend
/// the epoch counts but must otherwise match the saved configuration.
pub fn resume_volumes(
    checkpoint: &Checkpoint,
    config: &TrainConfig,
    volumes: Vec<Volume3D>,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    let comparable = TrainConfig {
        epochs_per_phase: checkpoint.config.epochs_per_phase,
        ..config.clone()
    };
    if comparable != checkpoint.config {
        return Err(Error::Config(
            "resume config differs from the checkpoint beyond epochs_per_phase".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    prepare_out_dir(out_dir)?;
    let mut t = build(config, volumes, out_dir)?;
    t.models.import(checkpoint)?;
    t.opts.import(checkpoint)?;
    t.rng = checkpoint.rng.restore();
    t.hyperplane = checkpoint.hyperplane.clone();
    t.completed = checkpoint.completed;
    t.last_phase = checkpoint.phase;
    t.run()?;
    Ok(TrainReport {
        checkpoint: t.checkpoint()?,
        log: t.log,
        step_totals: t.step_totals,
    })
}

pub fn resume(
    checkpoint_path: impl AsRef<Path>,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    resume_volumes(&ckpt, config, load_training_volumes(manifest)?, out_dir)
}
