use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Moments keyed by parameter name, created lazily on first update.
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn slot(store: &mut Vec<(String, Tensor)>, name: &str, shape: &[usize]) -> usize {
        match store.iter().position(|(n, _)| n == name) {
            Some(i) => i,
            None => {
                store.push((name.to_string(), Tensor::zeros(shape)));
                store.len() - 1
            }
        }
    }

    /// Updates every parameter accepted by `trainable`. Each of them must
    /// carry a gradient.
    pub fn step(&mut self, params: &mut ParamSet, trainable: impl Fn(&str) -> bool) -> Result<()> {
        if let Some(p) = params.iter().find(|p| trainable(&p.name) && p.grad.is_none()) {
            return Err(Error::Config(format!("parameter {} has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for p in params.iter_mut().filter(|p| trainable(&p.name)) {
            let g = p.grad.as_ref().unwrap();
            if g.shape() != p.value.shape() {
                return Err(Error::Numeric(format!("gradient shape mismatch for {}", p.name)));
            }
            let mi = Self::slot(&mut self.m, &p.name, p.value.shape());
            let vi = Self::slot(&mut self.v, &p.name, p.value.shape());
            let m = self.m[mi].1.data_mut();
            let v = self.v[vi].1.data_mut();
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= self.lr * (mh / (vh.sqrt() + ADAM_EPS) + self.weight_decay * w[k]);
            }
        }
        Ok(())
    }
}

/// Step decay: `base` before `decay_epoch`, `base / 10` from it on.
/// `None` keeps the rate constant.
pub fn lr_schedule(epoch: usize, base: f64, decay_epoch: Option<usize>) -> f64 {
    match decay_epoch {
        Some(e) if epoch >= e => base / 10.0,
        _ => base,
    }
}
