//! Named, insertion-ordered collection of learnable tensors with paired
//! gradient and ADAM moment buffers, plus the optimizer step and the
//! fan-in normal initializer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// What a parameter is, which determines its fan-in for initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// (C_out, C_in, k, k): fan_in = C_in * k * k
    ConvWeight,
    /// (C_in, C_out, k, k): fan_in = C_in * k * k
    DeconvWeight,
    Bias,
}

pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

#[derive(Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore::default()
    }

    pub fn register(&mut self, name: &str, kind: ParamKind, shape: [usize; 4]) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.index_of(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i].value)
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry {
        &mut self.entries[i]
    }

    /// Insertion-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.data().iter().map(|&g| g as f64 * g as f64).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Clip gradients to a global L2 norm.
    pub fn clip_grads(&mut self, max_norm: f32) {
        let norm = self.grad_norm() as f32;
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for e in &mut self.entries {
                for g in e.grad.data_mut() {
                    *g *= k;
                }
            }
        }
    }
}

/// Bias-corrected ADAM update applied in place to every entry; gradients
/// are left untouched (the caller zeroes them).
pub fn adam_step(
    store: &mut ParameterStore,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
) -> Result<()> {
    if t < 1 {
        return Err(Error::invalid("adam_step requires t >= 1".to_string()));
    }
    let bc1 = 1.0 - (beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(t as i32);
    for e in &mut store.entries {
        let g = e.grad.data();
        let m = e.adam_m.data_mut();
        let v = e.adam_v.data_mut();
        let w = e.value.data_mut();
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            w[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}

/// He fan-in normal init for conv/deconv weights, zeros for biases.
/// Deterministic given the generator state; draws in insertion order.
pub fn init_weights(store: &mut ParameterStore, rng: &mut Rng) {
    for e in &mut store.entries {
        match e.kind {
            ParamKind::Bias => e.value.data_mut().fill(0.0),
            ParamKind::ConvWeight | ParamKind::DeconvWeight => {
                let [d0, d1, kh, kw] = e.value.shape();
                let cin = match e.kind {
                    ParamKind::ConvWeight => d1,
                    _ => d0,
                };
                let std = (2.0 / (cin * kh * kw) as f32).sqrt();
                for v in e.value.data_mut() {
                    *v = rng.normal(std);
                }
            }
        }
    }
}
