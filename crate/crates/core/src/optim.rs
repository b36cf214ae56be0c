use crate::params::{ModelState, ParamId};

/// Adam without weight decay or schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every non-frozen parameter that holds a gradient.
    pub fn step(&mut self, state: &mut ModelState) {
        let ids: Vec<ParamId> = state.ids().collect();
        self.step_params(state, &ids);
    }

    /// Updates only the listed parameters (skipping frozen ones).
    pub fn step_params(&mut self, state: &mut ModelState, ids: &[ParamId]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < state.len() {
            self.moments.resize(state.len(), None);
        }
        for &id in ids {
            if state.is_frozen(id) {
                continue;
            }
            let Some(grad) = state.grad(id).map(|g| g.data().to_vec()) else {
                continue;
            };
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let value = state.value_mut(id).data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
