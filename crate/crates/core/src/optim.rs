use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(len: usize) -> Self {
        AdamMoments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `step` counts from 1.
pub fn adam_step<T: Scalar>(param: &mut [T], grad: &[T], state: &mut AdamMoments<T>, step: u64, cfg: &AdamConfig) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::dim("adam_step", "len", format!("param {} grad {} state {}", param.len(), grad.len(), state.m.len())));
    }
    if step == 0 {
        return Err(Error::Config("adam step counter starts at 1".into()));
    }
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<AdamMoments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Adam {
            config,
            step: 0,
            moments: params.into_iter().map(|p| AdamMoments::zeros(p.numel())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut Tensor<T>, &'a Tensor<T>)>) -> Result<()> {
        self.step += 1;
        let mut count = 0;
        for (i, (p, g)) in params.into_iter().enumerate() {
            let state = self
                .moments
                .get_mut(i)
                .ok_or_else(|| Error::Config("more parameters than optimizer state".into()))?;
            adam_step(p.data_mut(), g.data(), state, self.step, &self.config)?;
            count += 1;
        }
        if count != self.moments.len() {
            return Err(Error::Config(format!("optimizer tracks {} tensors, step got {count}", self.moments.len())));
        }
        Ok(())
    }
}
