use serde::{Deserialize, Serialize};

use super::{Parameters, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the trainable tensors of
/// the parameter set in enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: Parameters<T>>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .filter(|t| t.trainable)
            .map(|t| vec![T::zero(); t.data.len()])
            .collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let grads = grads.tensors();
        let mut slot = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grads) {
            if !p.trainable {
                continue;
            }
            debug_assert_eq!(p.name, g.name);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (((w, &gv), mv), vv) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            slot += 1;
        }
    }
}
