//! Adam over the flat parameter vector `(alpha, beta)`.

use crate::error::{Error, Result};
use crate::net::NetParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.eps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid Adam hyperparameters: lr={}, beta1={}, beta2={}, eps={} \
                 (need lr > 0, 0 <= beta < 1, eps > 0)",
                self.lr, self.beta1, self.beta2, self.eps
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }

    /// One bias-corrected Adam update.
    ///
    /// On `Err` neither `params` nor `self` has been modified.
    pub fn step(&mut self, params: &mut NetParams, grads: &NetParams) -> Result<()> {
        let len = params.len();
        if grads.len() != len || self.first_moment.len() != len {
            return Err(Error::Shape(format!(
                "Adam: params {len}, grads {}, state {}",
                grads.len(),
                self.first_moment.len()
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step + 1;
        let t_exp = i32::try_from(t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t_exp);
        let c2 = 1.0 - beta2.powi(t_exp);

        let mut new_m = Vec::with_capacity(len);
        let mut new_v = Vec::with_capacity(len);
        let mut new_p = Vec::with_capacity(len);
        for (k, &g) in grads.as_slice().iter().enumerate() {
            let m = beta1 * self.first_moment[k] + (1.0 - beta1) * g;
            let v = beta2 * self.second_moment[k] + (1.0 - beta2) * g * g;
            let p = params.as_slice()[k] - lr * (m / c1) / ((v / c2).sqrt() + eps);
            if !(p.is_finite() && m.is_finite() && v.is_finite()) {
                return Err(Error::OptimizerDiverged(k));
            }
            new_m.push(m);
            new_v.push(v);
            new_p.push(p);
        }
        params.as_mut_slice().copy_from_slice(&new_p);
        self.first_moment = new_m;
        self.second_moment = new_v;
        self.step = t;
        Ok(())
    }
}
