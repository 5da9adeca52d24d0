use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Bias-corrected Adam over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    state: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let state = params
            .iter()
            .map(|(name, p)| {
                let n = p.numel();
                (name.to_string(), Moments { m: vec![0.0; n], v: vec![0.0; n] })
            })
            .collect();
        Adam { config, t: 0, state }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// Restores a saved timestep and buffers.
    pub fn restore(&mut self, t: u64, state: IndexMap<String, Moments>) -> Result<()> {
        for (name, cur) in &self.state {
            let new = state.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if new.m.len() != cur.m.len() || new.v.len() != cur.v.len() {
                return Err(Error::shape("adam_restore", format!("moment buffers of {name} have the wrong size")));
            }
        }
        if state.len() != self.state.len() {
            return Err(Error::InvalidArgument("moment state names do not match the parameters".into()));
        }
        self.t = t;
        self.state = state;
        Ok(())
    }

    /// One update from the gradients currently stored on `params`. Fails
    /// before touching anything if a parameter has no gradient.
    pub fn step(&mut self, params: &ParamStore) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad_ref().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
            if !self.state.contains_key(name) {
                return Err(Error::UnknownParam(name.to_string()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter() {
            let st = self.state.get_mut(name).expect("checked above");
            let grad = p.grad_ref();
            let g = grad.as_ref().expect("checked above");
            let mut data = p.data_mut();
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let m = beta1 * st.m[i] as f64 + (1.0 - beta1) * gi;
                let v = beta2 * st.v[i] as f64 + (1.0 - beta2) * gi * gi;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                data[i] = (data[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
