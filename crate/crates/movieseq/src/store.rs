//! Named-tensor parameter store. Holds every weight of a run (frozen and
//! trainable), their gradients, and Adam moments, in a fixed insertion order
//! so updates, checkpoints, and checksums are deterministic.

use std::collections::HashMap;

use crate::rng::{hash_bytes, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
    /// Adam first/second moments; empty for frozen tensors.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Gauss { std: f64 },
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a tensor. Initialization is seeded by (run seed, tensor name), so
    /// the values of any given tensor do not depend on creation order or on
    /// which other tensors exist.
    pub fn add(
        &mut self,
        name: &str,
        dims: &[usize],
        trainable: bool,
        init: Init,
        seed: u64,
    ) -> TensorId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate tensor name {name}"
        );
        let n: usize = dims.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Gauss { std } => {
                let mut rng = Rng::new(stream(seed, hash_bytes(name.as_bytes())));
                (0..n).map(|_| rng.gauss() * std).collect()
            }
        };
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
            grad: vec![0.0; n],
            trainable,
            m: if trainable { vec![0.0; n] } else { Vec::new() },
            v: if trainable { vec![0.0; n] } else { Vec::new() },
        });
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.by_name.get(name).map(|&i| TensorId(i))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn data_mut(&mut self, id: TensorId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].grad
    }

    /// Accumulate into a tensor's gradient; ignored for frozen tensors.
    pub fn add_grad(&mut self, id: TensorId, contrib: &[f64]) {
        let t = &mut self.tensors[id.0];
        if !t.trainable {
            return;
        }
        for (g, c) in t.grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.iter().map(|t| t.name.clone()).collect()
    }

    /// One decoupled Adam update over trainable tensors. `t` is the 1-based
    /// global step used for bias correction.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64) {
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for tensor in &mut self.tensors {
            if !tensor.trainable {
                continue;
            }
            for i in 0..tensor.data.len() {
                let g = tensor.grad[i];
                tensor.m[i] = beta1 * tensor.m[i] + (1.0 - beta1) * g;
                tensor.v[i] = beta2 * tensor.v[i] + (1.0 - beta2) * g * g;
                let mhat = tensor.m[i] / bc1;
                let vhat = tensor.v[i] / bc2;
                tensor.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Round every parameter and moment to f32 precision. Applied at epoch
    /// boundaries so that resuming from an f32 checkpoint replays the exact
    /// same trajectory as an uninterrupted run.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for x in t.data.iter_mut() {
                *x = *x as f32 as f64;
            }
            for x in t.m.iter_mut() {
                *x = *x as f32 as f64;
            }
            for x in t.v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Order-sensitive FNV-1a checksum over the raw bytes of the selected
    /// tensors' data.
    pub fn checksum(&self, only_frozen: bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tensors {
            if only_frozen && t.trainable {
                continue;
            }
            for x in &t.data {
                for b in x.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// (trainable, frozen) parameter counts.
    pub fn count_params(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for t in &self.tensors {
            if t.trainable {
                trainable += t.numel();
            } else {
                frozen += t.numel();
            }
        }
        (trainable, frozen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new();
        a.add("x", &[4, 4], true, Init::Gauss { std: 1.0 }, 7);
        a.add("y", &[4], true, Init::Gauss { std: 1.0 }, 7);
        let mut b = ParamStore::new();
        b.add("y", &[4], true, Init::Gauss { std: 1.0 }, 7);
        b.add("x", &[4, 4], true, Init::Gauss { std: 1.0 }, 7);
        assert_eq!(a.by_name("x").unwrap().data, b.by_name("x").unwrap().data);
        assert_eq!(a.by_name("y").unwrap().data, b.by_name("y").unwrap().data);
    }

    #[test]
    fn frozen_tensors_ignore_gradients() {
        let mut s = ParamStore::new();
        let id = s.add("w", &[2], false, Init::Ones, 0);
        s.add_grad(id, &[1.0, 1.0]);
        s.adam_step(0.1, 0.9, 0.999, 1e-8, 1);
        assert_eq!(s.data(id), &[1.0, 1.0]);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("w", &[1], true, Init::Zeros, 0);
        s.add_grad(id, &[2.0]);
        s.adam_step(0.1, 0.9, 0.999, 1e-8, 1);
        assert!(s.data(id)[0] < 0.0);
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut s = ParamStore::new();
        s.add("w", &[8], true, Init::Gauss { std: 1.0 }, 3);
        s.quantize_f32();
        let once = s.by_name("w").unwrap().data.clone();
        s.quantize_f32();
        assert_eq!(once, s.by_name("w").unwrap().data);
    }
}
