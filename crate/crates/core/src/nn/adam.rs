use serde::{Deserialize, Serialize};

use super::{Parameterized, Real};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<T>,
}

/// Optimizer moments and step counter; part of any resumable training state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            state: AdamState { step: 0, m: Vec::new(), v: Vec::new() },
        }
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState<T>) {
        self.state = state;
    }

    pub fn reset(&mut self) {
        self.state = AdamState { step: 0, m: Vec::new(), v: Vec::new() };
    }

    pub fn step<P: Parameterized<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut gs: Vec<Vec<T>> = Vec::new();
        grads.visit_params(&mut |g| gs.push(g.to_vec()));
        if self.state.m.is_empty() {
            self.state.m = gs.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.state.v = self.state.m.clone();
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = T::c(lr * c2.sqrt() / c1);
        let eps = T::c(self.eps * c2.sqrt());
        let (one, state) = (T::one(), &mut self.state);
        let mut idx = 0;
        params.visit_params_mut(&mut |p| {
            let (m, v, g) = (&mut state.m[idx], &mut state.v[idx], &gs[idx]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
            idx += 1;
        });
    }
}

impl<T: Real> AdamState<T> {
    /// First moments followed by second moments, one tensor per parameter.
    pub fn to_tensors(&self) -> Vec<Vec<T>> {
        self.m.iter().chain(&self.v).cloned().collect()
    }

    /// Inverse of [`AdamState::to_tensors`].
    pub fn from_tensors(step: u64, mut tensors: Vec<Vec<T>>) -> Self {
        let v = tensors.split_off(tensors.len() / 2);
        Self { step, m: tensors, v }
    }
}
