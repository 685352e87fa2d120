use super::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step that touches a parameter and kept for the rest of training.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every parameter that requires grad. A trainable parameter
    /// without a gradient buffer is a contract violation.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.requires_grad && p.grad.is_none()) {
            return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let n = p.value.numel();
            let g = p.grad.as_ref().expect("checked above");
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let data = p.value.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
