use serde::{Deserialize, Serialize};

use crate::numkernel::Tensor2;

/// Adam with weight decay applied directly to the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor2>,
    pub second: Vec<Tensor2>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor2>) -> Self {
        let zeros: Vec<Tensor2> = params.into_iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
        Self { step: 0, first: zeros.clone(), second: zeros }
    }
}

impl AdamW {
    /// One update of every parameter in place.
    ///
    /// ```text
    /// θ ← θ − λ_wd·θ
    /// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
    /// θ ← θ − lr · m̂ / (√v̂ + ε),  m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
    /// ```
    pub fn update(&self, params: &mut [&mut Tensor2], grads: &[Tensor2], state: &mut OptimizerState) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), state.first.len(), "optimizer state does not match parameters");
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, param) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = state.first[k].data_mut();
            let v = state.second[k].data_mut();
            for (i, theta) in param.data_mut().iter_mut().enumerate() {
                *theta -= self.weight_decay * *theta;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// `shadow ← d·shadow + (1−d)·param` for each tensor.
pub fn ema_update(shadow: &mut [Tensor2], params: &[&Tensor2], decay: f64) {
    for (s, p) in shadow.iter_mut().zip(params) {
        for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = decay * *sv + (1.0 - decay) * pv;
        }
    }
}
