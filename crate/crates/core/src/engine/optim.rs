use crate::nn::{EntryKind, Grads, ParamStore};

use super::TrainConfig;

/// Learning rate for a 0-based epoch: `lr_init` multiplied by `lr_decay`
/// once for every milestone already reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    config.lr_init * config.lr_decay.powi(passed as i32)
}

/// Adam over the weights of one [`ParamStore`]; buffers are left alone.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store
            .entries()
            .iter()
            .map(|e| match e.kind {
                EntryKind::Weight => vec![0.0; e.data.len()],
                EntryKind::Buffer => Vec::new(),
            })
            .collect();
        Adam {
            beta1: beta1 as f32,
            beta2: beta2 as f32,
            eps: eps as f32,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.kind != EntryKind::Weight {
                continue;
            }
            let g = &grads.buffers()[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..entry.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                entry.data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
