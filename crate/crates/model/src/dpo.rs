//! Direct preference optimization against a frozen reference model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use seamkit::token::TokenSequence;

use crate::model::{check_complete, encode_condition_node, path_logprob_node, sequence_logprob, Condition, ModelError};
use crate::params::ParamStore;
use crate::tape::{sigmoid, Tape};
use crate::tensor::Mat;
use crate::train::{first_non_finite, Optimizer, OptimizerKind};

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    /// Consecutive steps above ten times ln 2 that count as divergence.
    pub divergence_window: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            lr: 1e-6,
            steps: 2500,
            optimizer: OptimizerKind::Adam,
            divergence_window: 100,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DpoError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DpoError::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.divergence_window == 0 {
            return Err(DpoError::Config("divergence_window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpoError {
    #[error("invalid DPO configuration: {0}")]
    Config(String),
    #[error("pair {pair}: {detail}")]
    NonFinite { pair: usize, detail: String },
    #[error("pair {pair}: {source}")]
    Model { pair: usize, source: ModelError },
    #[error("policy and reference have different parameter layouts")]
    Mismatch,
    #[error("diverged at step {step}: loss {loss} above {threshold} for {window} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        threshold: f64,
        window: usize,
    },
    #[error("non-finite gradient at step {step}: {detail}")]
    Gradient { step: usize, detail: String },
}

/// A preferred and a dispreferred seam sequence for one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoPair {
    pub condition: Condition,
    pub positive: TokenSequence,
    pub negative: TokenSequence,
}

/// Numerically stable −log σ(x).
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Loss from per-pair (Δ⁺, Δ⁻), where Δ is the policy-minus-reference log-prob.
pub fn dpo_loss_value(beta: f64, deltas: &[(f64, f64)]) -> f64 {
    let total: f64 = deltas.iter().map(|(p, n)| neg_log_sigmoid(beta * (p - n))).sum();
    total / deltas.len() as f64
}

/// Sequence log-probabilities of (positive, negative) under `params`.
pub fn pair_logprobs(params: &ParamStore, pairs: &[DpoPair]) -> Result<Vec<(f64, f64)>, DpoError> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let wrap = |source| DpoError::Model { pair: i, source };
            let pos = sequence_logprob(params, &p.positive, &p.condition).map_err(wrap)?;
            let neg = sequence_logprob(params, &p.negative, &p.condition).map_err(wrap)?;
            if !(pos.is_finite() && neg.is_finite()) {
                return Err(DpoError::NonFinite {
                    pair: i,
                    detail: format!("log-probabilities {pos} / {neg}"),
                });
            }
            Ok((pos, neg))
        })
        .collect()
}

/// Reference log-probabilities, computed once since the reference is frozen.
pub fn reference_logprobs(reference: &ParamStore, pairs: &[DpoPair]) -> Result<Vec<(f64, f64)>, DpoError> {
    pair_logprobs(reference, pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoEval {
    pub loss: f64,
    /// Fraction of pairs with Δ⁺ > Δ⁻.
    pub accuracy: f64,
    pub mean_margin: f64,
}

fn summarize(beta: f64, policy: &[(f64, f64)], reference: &[(f64, f64)]) -> DpoEval {
    let deltas: Vec<(f64, f64)> = policy
        .iter()
        .zip(reference)
        .map(|(p, r)| (p.0 - r.0, p.1 - r.1))
        .collect();
    let n = deltas.len() as f64;
    DpoEval {
        loss: dpo_loss_value(beta, &deltas),
        accuracy: deltas.iter().filter(|(p, q)| p > q).count() as f64 / n,
        mean_margin: deltas.iter().map(|(p, q)| p - q).sum::<f64>() / n,
    }
}

pub fn dpo_loss(policy: &ParamStore, reference: &[(f64, f64)], pairs: &[DpoPair], beta: f64) -> Result<DpoEval, DpoError> {
    let lp = pair_logprobs(policy, pairs)?;
    Ok(summarize(beta, &lp, reference))
}

/// Loss, accuracy and the gradient with respect to the policy parameters.
pub fn dpo_loss_and_grads(
    policy: &ParamStore,
    reference: &[(f64, f64)],
    pairs: &[DpoPair],
    beta: f64,
) -> Result<(DpoEval, Vec<Mat>), DpoError> {
    assert_eq!(reference.len(), pairs.len(), "one reference entry per pair");
    let batch = pairs.len() as f64;
    let per_pair: Vec<((f64, f64), Vec<Mat>)> = pairs
        .par_iter()
        .zip(reference)
        .enumerate()
        .map(|(i, (p, r))| {
            let wrap = |source| DpoError::Model { pair: i, source };
            check_complete(&p.positive).map_err(wrap)?;
            check_complete(&p.negative).map_err(wrap)?;
            let mut tape = Tape::new(policy);
            let cond = encode_condition_node(&mut tape, &p.condition);
            let pos = path_logprob_node(&mut tape, &p.positive.tokens, cond).map_err(wrap)?;
            let neg = path_logprob_node(&mut tape, &p.negative.tokens, cond).map_err(wrap)?;
            let lp = (tape.value(pos).data[0], tape.value(neg).data[0]);
            if !(lp.0.is_finite() && lp.1.is_finite()) {
                return Err(DpoError::NonFinite {
                    pair: i,
                    detail: format!("log-probabilities {} / {}", lp.0, lp.1),
                });
            }
            let margin = beta * ((lp.0 - r.0) - (lp.1 - r.1));
            let negated = tape.scale(neg, -1.0);
            let diff = tape.add(pos, negated);
            let mut grads = policy.zero_grads();
            tape.backward(diff, -beta * sigmoid(-margin) / batch, &mut grads);
            Ok((lp, grads))
        })
        .collect::<Result<_, _>>()?;
    let mut lps = Vec::with_capacity(per_pair.len());
    let mut total: Option<Vec<Mat>> = None;
    for (lp, g) in per_pair {
        lps.push(lp);
        match &mut total {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let grads = total.unwrap_or_else(|| policy.zero_grads());
    Ok((summarize(beta, &lps, reference), grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Loss before each step.
    pub losses: Vec<f64>,
}

/// Full-batch DPO. The reference is only read; an empty dataset or zero steps
/// leave the policy untouched.
pub fn dpo_train(
    policy: &mut ParamStore,
    reference: &ParamStore,
    pairs: &[DpoPair],
    config: &DpoConfig,
) -> Result<DpoReport, DpoError> {
    config.validate()?;
    if policy.names() != reference.names() {
        return Err(DpoError::Mismatch);
    }
    if pairs.is_empty() {
        log::info!("empty preference dataset, nothing to train");
        return Ok(DpoReport {
            steps: 0,
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            final_accuracy: f64::NAN,
            losses: Vec::new(),
        });
    }
    let ref_lp = reference_logprobs(reference, pairs)?;
    let mut opt = Optimizer::new(config.optimizer, config.lr, policy);
    let threshold = 10.0 * std::f64::consts::LN_2;
    let mut above = 0;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (eval, grads) = dpo_loss_and_grads(policy, &ref_lp, pairs, config.beta)?;
        losses.push(eval.loss);
        if step % 25 == 0 {
            log::info!(
                "dpo step {step}: loss {:.6} accuracy {:.3} margin {:.4}",
                eval.loss,
                eval.accuracy,
                eval.mean_margin
            );
        }
        above = if eval.loss > threshold { above + 1 } else { 0 };
        if above >= config.divergence_window {
            return Err(DpoError::Diverged {
                step,
                loss: eval.loss,
                threshold,
                window: config.divergence_window,
            });
        }
        if let Some(detail) = first_non_finite(policy, &grads) {
            return Err(DpoError::Gradient { step, detail });
        }
        opt.apply(policy, &grads);
    }
    let last = dpo_loss(policy, &ref_lp, pairs, config.beta)?;
    log::info!("dpo done: loss {:.6} accuracy {:.3}", last.loss, last.accuracy);
    Ok(DpoReport {
        steps: config.steps,
        initial_loss: losses.first().copied().unwrap_or(last.loss),
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::init_params;
    use crate::train::tests::{example, gradient_check};
    use std::f64::consts::LN_2;

    fn pair(config: &ModelConfig, seed: u64, segments: (usize, usize)) -> DpoPair {
        let a = example(config, seed, segments.0);
        let b = example(config, seed + 1000, segments.1);
        DpoPair {
            condition: a.condition,
            positive: a.tokens,
            negative: b.tokens,
        }
    }

    #[test]
    fn scalar_identities() {
        assert!((neg_log_sigmoid(2.0) - 0.126928).abs() < 1e-6);
        assert!((dpo_loss_value(1.0, &[(1.0, -1.0)]) - 0.126928).abs() < 1e-6);
        assert_eq!(neg_log_sigmoid(0.0), LN_2);
        for beta in [1e-3, 1e-6, 1e-9] {
            for deltas in [[(3.0, -2.0)], [(-3.0, 2.0)]] {
                assert!((dpo_loss_value(beta, &deltas) - LN_2).abs() < 5.0 * beta);
            }
        }
        // Stable far in both tails.
        assert_eq!(neg_log_sigmoid(800.0), 0.0);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn equal_models_give_ln2() {
        let config = ModelConfig::tiny();
        let policy = init_params(&config);
        let pairs = vec![pair(&config, 1, (1, 2)), pair(&config, 2, (2, 0))];
        let reference = reference_logprobs(&policy.as_reference(), &pairs).unwrap();
        for beta in [0.01, 0.1, 1.0] {
            let (eval, _) = dpo_loss_and_grads(&policy, &reference, &pairs, beta).unwrap();
            assert!((eval.loss - LN_2).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let config = ModelConfig::tiny();
        let reference = init_params(&config);
        // Move the policy off the reference so the margin is non-zero.
        let mut policy = reference.clone();
        for id in 0..policy.len() {
            for (k, x) in policy.tensor_mut(id).data.iter_mut().enumerate() {
                *x += 0.01 * ((k * 7 + id * 3) % 11) as f64 / 11.0;
            }
        }
        let pairs = vec![pair(&config, 3, (1, 2)), pair(&config, 5, (2, 1))];
        let ref_lp = reference_logprobs(&reference, &pairs).unwrap();
        let beta = 0.5;
        let (_, grads) = dpo_loss_and_grads(&policy, &ref_lp, &pairs, beta).unwrap();
        let worst = gradient_check(&policy, &grads, |p| dpo_loss(p, &ref_lp, &pairs, beta).unwrap().loss, 20, 9);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn one_step_widens_the_margin() {
        let config = ModelConfig::tiny();
        let mut policy = init_params(&config);
        let reference = policy.as_reference();
        let pairs = vec![pair(&config, 4, (1, 2))];
        let ref_lp = reference_logprobs(&reference, &pairs).unwrap();
        let config = DpoConfig {
            lr: 1e-4,
            steps: 1,
            optimizer: OptimizerKind::Sgd,
            beta: 1.0,
            ..DpoConfig::default()
        };
        dpo_train(&mut policy, &reference, &pairs, &config).unwrap();
        let after = dpo_loss(&policy, &ref_lp, &pairs, 1.0).unwrap();
        assert!(after.mean_margin > 0.0, "{}", after.mean_margin);
        assert!(after.loss < LN_2);
    }

    #[test]
    fn empty_dataset_and_zero_steps_are_no_ops() {
        let config = ModelConfig::tiny();
        let mut policy = init_params(&config);
        let reference = policy.as_reference();
        let before = policy.to_checkpoint_bytes();
        let report = dpo_train(&mut policy, &reference, &[], &DpoConfig::default()).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(policy.to_checkpoint_bytes(), before);
        let pairs = vec![pair(&config, 1, (1, 1))];
        let zero = DpoConfig { steps: 0, ..DpoConfig::default() };
        dpo_train(&mut policy, &reference, &pairs, &zero).unwrap();
        assert_eq!(policy.to_checkpoint_bytes(), before);
    }

    #[test]
    fn rejects_bad_config_and_incomplete_pairs() {
        let config = ModelConfig::tiny();
        let mut policy = init_params(&config);
        let reference = policy.as_reference();
        let mut pairs = vec![pair(&config, 1, (1, 1)), pair(&config, 2, (1, 1))];
        let bad = DpoConfig { beta: 0.0, ..DpoConfig::default() };
        assert!(matches!(dpo_train(&mut policy, &reference, &pairs, &bad), Err(DpoError::Config(_))));
        pairs[1].negative.tokens.pop();
        let err = dpo_train(&mut policy, &reference, &pairs, &DpoConfig::default()).unwrap_err();
        assert!(matches!(err, DpoError::Model { pair: 1, .. }), "{err}");
    }

    #[test]
    fn converges_on_one_pair() {
        let config = ModelConfig::desk();
        let mut policy = init_params(&config);
        let reference = policy.as_reference();
        let ref_bytes = reference.to_checkpoint_bytes();
        let pairs = vec![pair(&config, 6, (3, 3))];
        let dpo = DpoConfig {
            lr: 1e-4,
            steps: 300,
            ..DpoConfig::default()
        };
        let report = dpo_train(&mut policy, &reference, &pairs, &dpo).unwrap();
        assert!(report.final_loss < LN_2, "{report:?}");
        assert_eq!(report.final_accuracy, 1.0);
        assert_eq!(reference.to_checkpoint_bytes(), ref_bytes);
    }
}
