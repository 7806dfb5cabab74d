//! SGD with momentum and weight decay, a cosine learning-rate schedule, and the plain
//! gradient-descent optimizer used for architecture logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `lr0 · ½(1 + cos(π t / total))`, annealing from `lr0` at `t = 0` to 0 at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Config(format!("cosine_lr: step {t} of {total}")));
    }
    if t == total {
        return Ok(0.0);
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

fn checked_grad<'a>(store: &'a ParamStore, id: ParamId) -> Result<&'a Tensor> {
    let p = store.get(id);
    if !p.requires_grad {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    if !p.grad.all_finite() {
        return Err(Error::Numeric(format!("gradient of {} is not finite", p.name)));
    }
    Ok(&p.grad)
}

/// Heavy-ball SGD: `v ← μ·v + (g + λ·p)`, then `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(id.index()).and_then(Option::as_ref)
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        for &id in ids {
            checked_grad(store, id)?;
        }
        for &id in ids {
            if self.velocity.len() <= id.index() {
                self.velocity.resize(id.index() + 1, None);
            }
            let p = store.get_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros_like(&p.value));
            let (vd, gd) = (v.data_mut(), p.grad.data());
            let pd = p.value.data_mut();
            for i in 0..pd.len() {
                vd[i] = self.momentum * vd[i] + (gd[i] + self.weight_decay * pd[i]);
                pd[i] -= lr * vd[i];
            }
        }
        Ok(())
    }
}

/// Fixed-rate gradient descent without weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientDescent {
    pub lr: f64,
}

impl GradientDescent {
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            checked_grad(store, id)?;
        }
        for &id in ids {
            let p = store.get_mut(id);
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= self.lr * g;
            }
        }
        Ok(())
    }
}
