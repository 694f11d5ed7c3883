//! Dense f64 tensors, named parameter sets, reverse-mode autodiff, and Adam.
//!
//! Everything is 64-bit and CPU-resident. The autodiff tape ([`tape::Tape`])
//! is rebuilt per training step; parameters live in a [`ParamSet`] whose
//! flattening order (registration order, then element order) is frozen so
//! that flattened gradients and alignment scores are reproducible run to run.

pub mod tape;

pub use tape::{Tape, ValueId};

use crate::{Error, Result};
use std::collections::HashMap;

/// A dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// L2 norm of all elements.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One named parameter: a value tensor and an optional gradient buffer of the
/// same shape. The gradient is absent until a backward pass populates it.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.value.numel() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.value.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn set_grad(&mut self, g: Vec<f64>) -> Result<()> {
        if g.len() != self.value.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                lhs: self.value.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// An ordered collection of named parameters.
///
/// Iteration and flattening always follow registration order; this order is
/// the contract behind [`ParamSet::flatten`], [`flat_dot`], and every
/// checkpoint format in the crate.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let idx = self.params.len();
        self.index.insert(name.to_string(), idx);
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn at(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    /// Registration-order iterator.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries across all parameters.
    pub fn flat_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Concatenates all parameter values in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Writes a flat vector back into the parameters. Inverse of [`flatten`].
    ///
    /// [`flatten`]: ParamSet::flatten
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::InvalidArgument(format!(
                "flat vector has {} entries, parameter set has {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Concatenates all gradients in registration order. Errors if any
    /// parameter has no gradient.
    pub fn flatten_grads(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.params {
            let g = p.grad().ok_or_else(|| {
                Error::InvalidArgument(format!("parameter {:?} has no gradient", p.name))
            })?;
            out.extend_from_slice(g);
        }
        Ok(out)
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.clear_grad();
        }
    }

    /// Global L2 norm over all gradients. Errors if any gradient is missing.
    pub fn grad_l2_norm(&self) -> Result<f64> {
        let mut acc = 0.0;
        for p in &self.params {
            let g = p.grad().ok_or_else(|| {
                Error::InvalidArgument(format!("parameter {:?} has no gradient", p.name))
            })?;
            acc += g.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(acc.sqrt())
    }

    /// Scales all gradients so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> Result<f64> {
        let norm = self.grad_l2_norm()?;
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.params {
                if let Some(g) = p.grad.as_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        Ok(norm)
    }
}

/// Selects a subset of parameters by registration index.
#[derive(Debug, Clone)]
pub struct ParamMask {
    selected: Vec<bool>,
}

impl ParamMask {
    pub fn all(set: &ParamSet) -> Self {
        Self {
            selected: vec![true; set.len()],
        }
    }

    pub fn none(set: &ParamSet) -> Self {
        Self {
            selected: vec![false; set.len()],
        }
    }

    pub fn from_names(set: &ParamSet, names: &[&str]) -> Result<Self> {
        let mut mask = Self::none(set);
        for name in names {
            let idx = set.index_of(name).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown parameter {name:?} in mask"))
            })?;
            mask.selected[idx] = true;
        }
        Ok(mask)
    }

    pub fn is_selected(&self, idx: usize) -> bool {
        self.selected[idx]
    }

    pub fn any(&self) -> bool {
        self.selected.iter().any(|&s| s)
    }
}

/// Inner product of two gradient sets restricted to the masked parameters.
///
/// Both sets must share the flattening order and shapes; the sum runs over
/// masked entries only, in registration order.
pub fn flat_dot(a: &ParamSet, b: &ParamSet, mask: &ParamMask) -> Result<f64> {
    if a.len() != b.len() || mask.selected.len() != a.len() {
        return Err(Error::InvalidArgument(format!(
            "flat_dot over mismatched sets: {} vs {} params, mask {}",
            a.len(),
            b.len(),
            mask.selected.len()
        )));
    }
    if !mask.any() {
        return Err(Error::InvalidArgument(
            "flat_dot mask selects no parameters".into(),
        ));
    }
    let mut acc = 0.0;
    for idx in 0..a.len() {
        if !mask.is_selected(idx) {
            continue;
        }
        let pa = a.at(idx);
        let pb = b.at(idx);
        if pa.value.shape() != pb.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "flat_dot",
                lhs: pa.value.shape.clone(),
                rhs: pb.value.shape.clone(),
            });
        }
        let ga = pa.grad().ok_or_else(|| {
            Error::InvalidArgument(format!("parameter {:?} has no gradient", pa.name))
        })?;
        let gb = pb.grad().ok_or_else(|| {
            Error::InvalidArgument(format!("parameter {:?} has no gradient", pb.name))
        })?;
        for (x, y) in ga.iter().zip(gb) {
            acc += x * y;
        }
    }
    Ok(acc)
}

/// Adam optimizer state: per-parameter moment buffers plus a step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_hyperparams(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Gradients are left untouched; the caller
/// decides when to reset them.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state covers {} params, set has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (idx, p) in params.params.iter().enumerate() {
        let g = p.grad().ok_or_else(|| {
            Error::InvalidArgument(format!("parameter {:?} has no gradient", p.name))
        })?;
        if g.len() != state.m[idx].len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![g.len()],
                rhs: vec![state.m[idx].len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (idx, p) in params.params.iter_mut().enumerate() {
        let g = p.grad.as_ref().expect("checked above");
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = p.value.data_mut();
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Plain gradient-descent update: `p -= lr * g`.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    for p in &mut params.params {
        let g = p.grad.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("parameter {:?} has no gradient", p.name))
        })?;
        let data = p.value.data_mut();
        for i in 0..g.len() {
            data[i] -= lr * g[i];
        }
    }
    Ok(())
}
