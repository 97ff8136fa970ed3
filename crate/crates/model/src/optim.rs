//! Adam with the AMSGrad correction and L2 weight decay.

use candle_core::{backprop::GradStore, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            amsgrad: true,
        }
    }
}

/// Per-parameter moment buffers. `step == 0` means the parameter has not
/// received a gradient yet.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub v_max: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    vars: Vec<Var>,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        let state = vars.iter().map(|_| Moments::default()).collect();
        Ok(Self { config, vars, state })
    }

    /// Updates every variable that has a gradient in `grads`; variables
    /// without one are left untouched, state included.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let c = self.config;
        for (var, st) in self.vars.iter().zip(self.state.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.flatten_all()?.to_vec1::<f32>()?;
            let mut p = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            if st.step == 0 {
                st.m = vec![0.0; p.len()];
                st.v = vec![0.0; p.len()];
                st.v_max = if c.amsgrad { vec![0.0; p.len()] } else { Vec::new() };
            }
            st.step += 1;
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            let bias1 = 1.0 - c.beta1.powi(st.step as i32);
            let bias2_sqrt = (1.0 - c.beta2.powi(st.step as i32)).sqrt() as f32;
            let step_size = (c.lr / bias1) as f32;
            let (wd, eps) = (c.weight_decay as f32, c.eps as f32);
            for i in 0..p.len() {
                let gi = g[i] + wd * p[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let v_hat = if c.amsgrad {
                    st.v_max[i] = st.v_max[i].max(st.v[i]);
                    st.v_max[i]
                } else {
                    st.v[i]
                };
                let denom = v_hat.sqrt() / bias2_sqrt + eps;
                p[i] -= step_size * st.m[i] / denom;
            }
            var.set(&Tensor::from_vec(p, var.dims(), &Device::Cpu)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> &[Moments] {
        &self.state
    }

    pub fn set_state(&mut self, state: Vec<Moments>) -> Result<()> {
        if state.len() != self.vars.len() {
            return Err(Error::Config(format!(
                "optimizer state for {} parameters, expected {}",
                state.len(),
                self.vars.len()
            )));
        }
        for (var, st) in self.vars.iter().zip(&state) {
            let n = var.elem_count();
            let sized = |b: &Vec<f32>| b.is_empty() || b.len() == n;
            if !(sized(&st.m) && sized(&st.v) && sized(&st.v_max)) {
                return Err(Error::Config("optimizer moment buffer has the wrong length".into()));
            }
        }
        self.state = state;
        Ok(())
    }
}
