//! Adam with weight decay and the poly learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Adam state: bias-corrected moments per parameter and a global step.
///
/// Update: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments of a parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.moments
            .get(id.index())
            .and_then(|m| m.as_ref())
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Restore saved state (checkpoint loading).
    pub fn restore(&mut self, step: u64, id: ParamId, m: Vec<T>, v: Vec<T>) {
        self.step = step;
        if self.moments.len() <= id.index() {
            self.moments.resize(id.index() + 1, None);
        }
        self.moments[id.index()] = Some((m, v));
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    /// Any non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.kind(*id) != ParamKind::Trainable {
                return Err(Error::contract(format!("`{}` is not trainable", store.name(*id))));
            }
            if g.len() != store.get(*id).numel() {
                return Err(Error::dim(format!(
                    "gradient for `{}` has {} entries, parameter has {}",
                    store.name(*id),
                    g.len(),
                    store.get(*id).numel()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    "adam_step",
                    format!("non-finite gradient {} in `{}` at flat index {i}", g[i], store.name(*id)),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let (lr, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let n = g.len();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let theta = store.get_mut(*id).data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + ob1 * g[i];
                v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                let mh = m[i] * inv_bc1;
                let vh = v[i] * inv_bc2;
                theta[i] -= lr * (mh / (vh.sqrt() + eps) + wd * theta[i]);
            }
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / max_iter)^power`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: u64,
}

impl PolySchedule {
    pub fn new(base_lr: f64, max_iter: u64) -> Self {
        PolySchedule { base_lr, power: 0.9, max_iter }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.power > 0.0) || !(self.base_lr >= 0.0) {
            return Err(Error::Config(format!("invalid poly schedule {self:?}")));
        }
        Ok(())
    }

    /// Past `max_iter` the rate is 0 (with a warning).
    pub fn lr(&self, iter: u64) -> f64 {
        if iter > self.max_iter {
            log::warn!("iteration {iter} is past the schedule end {}; learning rate is 0", self.max_iter);
            return 0.0;
        }
        let frac = 1.0 - iter as f64 / self.max_iter as f64;
        self.base_lr * frac.powf(self.power)
    }
}
