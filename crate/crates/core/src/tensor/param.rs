use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BnStats, Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A trainable tensor with its Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let n = tensor.numel();
        Self {
            name: name.into(),
            tensor,
            grad: None,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step_count: 0,
        }
    }

    fn cast<U: Real>(&self) -> Parameter<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
        Parameter {
            name: self.name.clone(),
            tensor: self.tensor.cast(),
            grad: self.grad.as_ref().map(Tensor::cast),
            adam_m: conv(&self.adam_m),
            adam_v: conv(&self.adam_v),
            step_count: self.step_count,
        }
    }
}

/// Named trainable parameters plus non-trainable buffers (running statistics).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Parameter<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        self.params.insert(name.clone(), Parameter::new(name, tensor));
    }

    pub fn insert_parameter(&mut self, param: Parameter<T>) {
        self.params.insert(param.name.clone(), param);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.buffers.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Moves all parameters and buffers of `other` into `self`.
    pub fn extend(&mut self, other: ParamSet<T>) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// The subset whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            params: self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
            buffers: self.buffers.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and values of parameters and buffers.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut bytes = Vec::new();
        let entries = self.params.iter().map(|(k, p)| (k, &p.tensor)).chain(self.buffers.iter());
        for (name, t) in entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            bytes.clear();
            t.data().iter().for_each(|v| v.write_le(&mut bytes));
            h.update(&bytes);
        }
        hex::encode(h.finalize())
    }

    /// Adds the gradients recorded for bound parameters and folds batch
    /// statistics into running averages.
    pub fn absorb(&mut self, bindings: Bindings<T>, grads: Option<&Gradients<T>>, bn_momentum: f64) -> Result<()> {
        if let Some(grads) = grads {
            for (name, var) in &bindings.bound {
                let Some(g) = grads.get(*var) else { continue };
                let p = self.params.get_mut(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
                match &mut p.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => p.grad = Some(Tensor::new(p.tensor.shape().to_vec(), g.to_vec())?),
                }
            }
        }
        let m = T::of(bn_momentum);
        for (prefix, stats) in bindings.pending {
            for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let key = format!("{prefix}.{suffix}");
                let buf = self.buffers.get_mut(&key).ok_or_else(|| Error::Contract(format!("unknown buffer {key}")))?;
                buf.data_mut().iter_mut().zip(fresh).for_each(|(r, &f)| *r = (T::one() - m) * *r + m * f);
            }
        }
        Ok(())
    }
}

/// Bound parameter handles and pending batch-norm statistics of one pass.
#[derive(Debug, Default)]
pub struct Bindings<T> {
    bound: BTreeMap<String, Var>,
    pending: PendingStats<T>,
}

pub type PendingStats<T> = Vec<(String, BnStats<T>)>;

/// Binds parameters of a [`ParamSet`] into a tape, once per name.
///
/// A frozen binder records parameters as constants, so no gradient work is
/// spent on them.
#[derive(Debug)]
pub struct Binder<'a, T: Real> {
    params: &'a ParamSet<T>,
    trainable: bool,
    bindings: Bindings<T>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn trainable(params: &'a ParamSet<T>) -> Self {
        Self { params, trainable: true, bindings: Bindings { bound: BTreeMap::new(), pending: Vec::new() } }
    }

    pub fn frozen(params: &'a ParamSet<T>) -> Self {
        Self { params, trainable: false, bindings: Bindings { bound: BTreeMap::new(), pending: Vec::new() } }
    }

    pub fn param(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.bound.get(name) {
            return Ok(*v);
        }
        let p = self.params.get(name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let v = if self.trainable { tape.variable(p.tensor.clone()) } else { tape.constant(p.tensor.clone()) };
        self.bindings.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses an already recorded `var` for parameter `name`.
    pub fn prebind(&mut self, name: &str, var: Var) {
        self.bindings.bound.insert(name.to_string(), var);
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.params.buffer(name).ok_or_else(|| Error::Contract(format!("missing buffer {name}")))
    }

    pub fn record_stats(&mut self, prefix: &str, stats: BnStats<T>) {
        self.bindings.pending.push((prefix.to_string(), stats));
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bindings.bound.get(name).copied()
    }

    pub fn into_bindings(self) -> Bindings<T> {
        self.bindings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every parameter in the set; gradients
/// are cleared afterwards.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = params.params().find(|p| p.grad.is_none()) {
        return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for p in params.params_mut() {
        let grad = p.grad.take().expect("checked above");
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = T::of(1.0 - cfg.beta1.powi(t));
        let c2 = T::of(1.0 - cfg.beta2.powi(t));
        for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(grad.data()).zip(&mut p.adam_m).zip(&mut p.adam_v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
