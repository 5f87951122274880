//! Next-token likelihood training and the optimizers shared with DPO.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use seamkit::token::TokenSequence;

use crate::model::{check_complete, encode_condition_node, path_logprob_node, Condition, ModelError};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Mat;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} ({detail})")]
    NonFinite { loss: f64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A conditioning input with its target sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub condition: Condition,
    pub tokens: TokenSequence,
}

fn predicted_tokens(batch: &[Example]) -> usize {
    batch.iter().map(|e| e.tokens.len() - 1).sum()
}

/// Mean next-token negative log-likelihood over every predicted token.
pub fn nll_loss(params: &ParamStore, batch: &[Example]) -> Result<f64, TrainError> {
    Ok(nll_eval(params, batch, false)?.0)
}

/// Loss and its gradient, one matrix per parameter.
pub fn nll_loss_and_grads(params: &ParamStore, batch: &[Example]) -> Result<(f64, Vec<Mat>), TrainError> {
    let (loss, grads) = nll_eval(params, batch, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn nll_eval(params: &ParamStore, batch: &[Example], with_grads: bool) -> Result<(f64, Option<Vec<Mat>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    for e in batch {
        check_complete(&e.tokens)?;
    }
    let count = predicted_tokens(batch) as f64;
    let per_example: Vec<(f64, Option<Vec<Mat>>)> = batch
        .par_iter()
        .map(|e| -> Result<_, ModelError> {
            let mut tape = Tape::new(params);
            let cond = encode_condition_node(&mut tape, &e.condition);
            let lp = path_logprob_node(&mut tape, &e.tokens.tokens, cond)?;
            let value = tape.value(lp).data[0];
            let grads = with_grads.then(|| {
                let mut g = params.zero_grads();
                tape.backward(lp, -1.0 / count, &mut g);
                g
            });
            Ok((value, grads))
        })
        .collect::<Result<_, _>>()?;
    // Reduction in batch order keeps results independent of scheduling.
    let mut total = 0.0;
    let mut grads: Option<Vec<Mat>> = None;
    for (lp, g) in per_example {
        total += lp;
        if let Some(g) = g {
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
    }
    let loss = -total / count;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            loss,
            detail: format!("summed log-probability {total} over {count} tokens"),
        });
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

/// First-order optimizer state. Parameters of a frozen geometry encoder are
/// never touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    trainable: Vec<bool>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let freeze = params.config.freeze_geometry;
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
            trainable: params
                .names()
                .iter()
                .map(|n| !(freeze && n.starts_with("enc.geom.")))
                .collect(),
        }
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (id, g) in grads.iter().enumerate() {
            if !self.trainable[id] {
                continue;
            }
            let p = params.tensor_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in p.data.iter_mut().zip(&g.data) {
                        *x -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[id], &mut self.v[id]);
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                        v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                        let mhat = m.data[i] / c1;
                        let vhat = v.data[i] / c2;
                        p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

pub(crate) fn first_non_finite(params: &ParamStore, grads: &[Mat]) -> Option<String> {
    grads
        .iter()
        .position(|g| !g.is_finite())
        .map(|i| format!("non-finite gradient in {}", params.name(i)))
}

/// One optimizer step on the mean next-token NLL. Returns the loss before
/// the step.
pub fn nll_train_step(params: &mut ParamStore, batch: &[Example], opt: &mut Optimizer) -> Result<f64, TrainError> {
    let (loss, grads) = nll_loss_and_grads(params, batch)?;
    if let Some(detail) = first_non_finite(params, &grads) {
        return Err(TrainError::NonFinite { loss, detail });
    }
    opt.apply(params, &grads);
    Ok(loss)
}
