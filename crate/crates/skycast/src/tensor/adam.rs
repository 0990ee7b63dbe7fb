//! Adam optimizer with bias correction.

use super::{Element, Result, Tensor, TensorError};

/// Adam hyperparameters. The defaults are the ones from the original
/// Adam formulation: β1=0.9, β2=0.999, ε=1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamParams {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Per-parameter optimizer state: first and second moment estimates plus
/// the step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub params: AdamParams,
}

impl<T: Element> AdamState<T> {
    pub fn new(numel: usize, params: AdamParams) -> Self {
        AdamState {
            m: vec![T::zero(); numel],
            v: vec![T::zero(); numel],
            t: 0,
            params,
        }
    }

    /// One bias-corrected Adam update of `value` in place.
    ///
    /// `name` is only used for error reporting when shapes disagree.
    pub fn step(&mut self, name: &str, value: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != value.shape() || self.m.len() != value.numel() {
            return Err(TensorError::MissingGrad { name: name.into() });
        }
        self.t += 1;
        let b1 = T::from_f64_lossy(self.params.beta1);
        let b2 = T::from_f64_lossy(self.params.beta2);
        let eps = T::from_f64_lossy(self.params.epsilon);
        let one = T::one();
        // Fold both bias corrections into the step size.
        let corr = self.params.learning_rate
            * (1.0 - self.params.beta2.powi(self.t as i32)).sqrt()
            / (1.0 - self.params.beta1.powi(self.t as i32));
        let lr_t = T::from_f64_lossy(corr);

        let data = value.data_mut();
        for ((p, &g), (m, v)) in data
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - lr_t * *m / (v.sqrt() + eps);
        }
        Ok(())
    }
}
