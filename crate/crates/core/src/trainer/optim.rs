use ndarray::{Array2, Zip};

use crate::backbone::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Linear warm-up from 0 to `peak` over `ceil(warmup_ratio · total)` steps,
/// then cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        Schedule {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64 - 1e-9).ceil().max(0.0) as usize,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment buffers for the trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    moments: Vec<(ParamId, Array2<T>, Array2<T>)>,
    step: i32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            moments: params
                .trainable_ids()
                .map(|i| {
                    let dim = params.get(i).dim();
                    (i, Array2::zeros(dim), Array2::zeros(dim))
                })
                .collect(),
            step: 0,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>, grads: &Grads<T>, state: &mut AdamState<T>, lr: f64) {
        state.step += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(state.step));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(state.step));
        let eps = T::from_f64_lossy(self.eps);
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::from_f64_lossy(lr * self.weight_decay);
        for (id, m, v) in &mut state.moments {
            let Some(g) = grads.get(*id) else { continue };
            Zip::from(params.get_mut(*id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p = *p - decay * *p - lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
