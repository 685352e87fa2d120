use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
    /// Populated by `ParamStore::zero_grad` and accumulated into by backward.
    pub grad: Option<Vec<f64>>,
}

/// Owns every parameter of a model, addressed by `ParamId` or name.
///
/// Each store gets a process-unique `uid` (kept by clones), so a tape can
/// hold leaves from several stores without mixing up their ids.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    uid: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(0);
        Self { params: Vec::new(), by_name: HashMap::new(), uid: NEXT.fetch_add(1, Ordering::Relaxed) }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, requires_grad: true, grad: None });
        id
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![v; numel]).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Mark exactly the ids in `trainable` as requiring grad.
    pub fn set_trainable(&mut self, trainable: &[ParamId]) {
        for p in &mut self.params {
            p.requires_grad = false;
            p.grad = None;
        }
        for &id in trainable {
            self.params[id.0].requires_grad = true;
        }
    }

    pub fn set_all_trainable(&mut self) {
        for p in &mut self.params {
            p.requires_grad = true;
        }
    }

    /// Populate zeroed gradient buffers for every parameter requiring grad.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.requires_grad {
                match &mut p.grad {
                    Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                    None => p.grad = Some(vec![0.0; p.value.numel()]),
                }
            } else {
                p.grad = None;
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        let buf = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    /// Global L2 norm of all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id.0].value.numel()).sum()
    }

    /// SHA-256 over the raw little-endian bytes of the given parameters,
    /// truncated to 16 hex characters.
    pub fn checksum(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// A new store holding copies of `ids`, in the given order.
    pub fn subset(&self, ids: &[ParamId]) -> ParamStore {
        let mut out = ParamStore::new();
        for &id in ids {
            let p = &self.params[id.0];
            out.add(p.name.clone(), p.value.clone());
        }
        out
    }

    /// Copy values from another store that has identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let src = other.value(src);
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
