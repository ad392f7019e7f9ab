use super::{ParamStore, Tensor};
use crate::error::{input_err, shape_err, Result};

/// Step-wise exponential learning-rate decay: `base * factor^(step / interval)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        let interval = self.decay_interval.max(1);
        self.base * self.decay_factor.powi((step / interval) as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-4,
            decay_factor: 0.9,
            decay_interval: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            schedule: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a store, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        AdamState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Learning rate applied by the next update.
    pub fn effective_lr(&self) -> f64 {
        self.config.schedule.at(self.step)
    }

    /// One bias-corrected Adam step. `grads` is indexed like `params`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return shape_err(format!(
                "{} parameters but {} gradients and {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for (id, name, p) in params.iter() {
            let g = &grads[id.index()];
            if g.shape() != p.shape() {
                return shape_err(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            if !g.is_finite() {
                return input_err(format!("non-finite gradient for {name}"));
            }
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let lr = self.effective_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
