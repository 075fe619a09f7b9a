//! AdamW with decoupled weight decay and the warmup / linear-decay schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers for a fixed set of registered parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    ids: Vec<ParamId>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step_count: u64,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let first = ids.iter().map(|&i| Tensor::zeros(store.value(i).shape())).collect();
        let second = ids.iter().map(|&i| Tensor::zeros(store.value(i).shape())).collect();
        Self {
            hyper,
            ids,
            first,
            second,
            step_count: 0,
        }
    }

    /// Registers every parameter in the store.
    pub fn for_all(hyper: AdamWHyper, store: &ParamStore) -> Self {
        Self::new(hyper, store, store.ids().collect())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn registered(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn first_moment(&self, slot: usize) -> &Tensor {
        &self.first[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &Tensor {
        &self.second[slot]
    }

    /// One update with a single learning rate for all parameters.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step_grouped(store, |_| lr)
    }

    /// One update; `lr` picks each parameter's learning rate from its group.
    pub fn step_grouped(&mut self, store: &mut ParamStore, lr: impl Fn(Group) -> f64) -> Result<()> {
        let mut rates = Vec::with_capacity(self.ids.len());
        for &id in &self.ids {
            let p = store.get(id);
            if p.grad.is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
            let group = p.group.ok_or_else(|| Error::UntaggedParameter(p.name.clone()))?;
            let rate = lr(group);
            if !(rate >= 0.0) {
                return Err(invalid(format!("learning rate {rate} for {}", p.name)));
            }
            rates.push(rate);
        }
        self.step_count += 1;
        let AdamWHyper {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let t = self.step_count as i32;
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);
        for (slot, &id) in self.ids.iter().enumerate() {
            let rate = rates[slot];
            let p = store.get_mut(id);
            let grad = p.grad.as_ref().expect("checked above");
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= rate * weight_decay * *w;
                *w -= rate * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_ratio * total_steps`, then
/// linear decay to 0 at `total_steps`.
pub fn schedule_lr(step: usize, total_steps: usize, peak_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if step > total_steps {
        return Err(invalid(format!("step {step} beyond total {total_steps}")));
    }
    if !(warmup_ratio > 0.0 && warmup_ratio < 1.0) {
        return Err(invalid(format!("warmup ratio {warmup_ratio} outside (0, 1)")));
    }
    let total = total_steps as f64;
    let warmup = warmup_ratio * total;
    let s = step as f64;
    Ok(if s < warmup {
        peak_lr * s / warmup
    } else {
        peak_lr * (total - s) / (total - warmup)
    })
}
