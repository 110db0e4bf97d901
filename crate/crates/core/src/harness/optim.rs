//! AdamW with decoupled weight decay.

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    /// Number of updates taken so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        AdamW {
            lr,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient or marked frozen are left
    /// untouched, including by weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim("adamw", store.len(), grads.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powf(self.t as f64);
        let bc2 = 1.0 - BETA2.powf(self.t as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if g.len() != p.data.len() {
                return Err(Error::dim("adamw", p.data.len(), g.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                p.data[k] -= self.lr * self.weight_decay * p.data[k];
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p.data[k] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Shape;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Shape::new(1, 2), vec![1.0, -1.0]).unwrap();
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store, &[Some(vec![2.0, -0.5])]).unwrap();
        // bias-corrected first step is lr·sign(g) up to the epsilon
        let p = &store.get(id).data;
        assert!((p[0] - 0.9).abs() < 1e-8 && (p[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("x", Shape::new(1, 1), vec![2.0]).unwrap();
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        opt.step(&mut store, &[Some(vec![0.0])]).unwrap();
        assert_eq!(store.get(id).data[0], 2.0 - 0.1 * 0.5 * 2.0);
    }
}
