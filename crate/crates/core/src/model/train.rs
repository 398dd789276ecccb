use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::forward::{Bound, NoHooks};
use super::{BaseModel, ParamId};
use crate::error::{Error, Result};
use crate::synthlang::Utterance;
use crate::tensor::{Tape, Tensor};

/// Base parameters that receive gradients in a pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableSet(BTreeSet<ParamId>);

impl TrainableSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(model: &BaseModel) -> Self {
        Self(model.param_ids().collect())
    }

    pub fn from_ids(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self(ids.into_iter().collect())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.iter().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { peak_lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-9, warmup_steps: 200, clip_norm: 5.0 }
    }
}

impl AdamConfig {
    /// Linear warmup to `peak_lr`, then inverse-square-root decay.
    /// `step` counts from 1.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Adam over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} params but {} grads", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() {
            return Err(Error::Shape("parameter list changed between steps".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let lr = c.lr(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                *x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}

/// One optimizer step of the hybrid loss on `batch`; returns the mean loss.
///
/// Only parameters in `trainable` move. A frozen model accepts only an
/// empty trainable set.
pub fn train_step(model: &mut BaseModel, batch: &[&Utterance], trainable: &TrainableSet, opt: &mut Optimizer) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if model.frozen && !trainable.is_empty() {
        return Err(Error::Config("model is frozen; base parameters cannot be trained".into()));
    }
    let (loss, grads) = {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&mut tape, model, trainable, NoHooks);
        let mut terms = Vec::with_capacity(batch.len());
        for u in batch {
            terms.push(bound.utterance_loss(&mut tape, &u.features, &u.tokens)?.total);
        }
        let total = if terms.len() == 1 {
            terms[0]
        } else {
            let cat = tape.concat_rows(&terms)?;
            tape.mean(cat)
        };
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        if trainable.is_empty() {
            return Ok(loss);
        }
        tape.backward(total)?;
        let grads: Vec<Tensor> = trainable
            .iter()
            .map(|id| tape.grad(bound.var(id)).unwrap_or_else(|| Tensor::zeros(model.param(id).shape())))
            .collect();
        (loss, grads)
    };
    let ids: BTreeSet<ParamId> = trainable.0.clone();
    let mut refs: Vec<&mut Tensor> = model
        .params
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| ids.contains(&ParamId(*i)))
        .map(|(_, p)| p)
        .collect();
    opt.step(&mut refs, &grads)?;
    Ok(loss)
}
