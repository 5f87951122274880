//! Autoregressive sampling with temperature and nucleus truncation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seamkit::token::{repair, TokenSequence, BOS, EOS};

use crate::model::{last_logits, ModelError};
use crate::params::ParamStore;
use crate::tape::log_softmax;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    /// Overrides the model's token cap when set.
    pub max_tokens: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            seed: 0,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    /// Tokens as generated, starting with BOS.
    pub raw: Vec<u16>,
    /// Well-formed sequence after truncation to the last complete segment.
    pub tokens: TokenSequence,
    pub repaired: bool,
    /// Untempered model log-probability of each generated token.
    pub step_logprobs: Vec<f64>,
}

/// Candidate tokens with renormalized probabilities after temperature scaling
/// and top-p truncation, most likely first (ties by lower token id).
pub fn next_token_distribution(logits: &[f64], temperature: f64, top_p: f64) -> Result<Vec<(usize, f64)>, ModelError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ModelError::InvalidSampling(format!("temperature {temperature} must be positive")));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(ModelError::InvalidSampling(format!("top_p {top_p} must lie in (0, 1]")));
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        // top_p = 1 disables truncation even when rounding reaches 1 early.
        if top_p < 1.0 && mass >= top_p {
            break;
        }
    }
    kept.iter_mut().for_each(|(_, p)| *p /= mass);
    Ok(kept)
}

/// Inverse-CDF draw from a distribution returned by
/// [`next_token_distribution`].
pub fn draw(dist: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(token, p) in dist {
        acc += p;
        if u < acc {
            return token;
        }
    }
    dist.last().expect("non-empty distribution").0
}

fn generate(
    params: &ParamStore,
    cond: &Mat,
    max_tokens: usize,
    mut choose: impl FnMut(&[f64]) -> Result<usize, ModelError>,
) -> Result<Sampled, ModelError> {
    let mut raw = vec![BOS];
    let mut step_logprobs = Vec::new();
    while raw.len() < max_tokens {
        let logits = last_logits(params, &raw, cond)?;
        let token = choose(&logits)?;
        step_logprobs.push(log_softmax(&logits)[token]);
        raw.push(token as u16);
        if token as u16 == EOS {
            break;
        }
    }
    let (tokens, repaired) = repair(&raw);
    if repaired {
        log::debug!("repaired a sampled sequence of {} tokens", raw.len());
    }
    Ok(Sampled {
        raw,
        tokens,
        repaired,
        step_logprobs,
    })
}

/// Samples until EOS or the token cap. Deterministic given the seed.
pub fn sample(params: &ParamStore, cond: &Mat, config: &SampleConfig) -> Result<Sampled, ModelError> {
    next_token_distribution(&[0.0], config.temperature, config.top_p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cap = config.max_tokens.unwrap_or_else(|| params.config.max_tokens());
    generate(params, cond, cap, |logits| {
        let dist = next_token_distribution(logits, config.temperature, config.top_p)?;
        Ok(draw(&dist, &mut rng))
    })
}

/// Argmax decoding (lowest token id among ties).
pub fn greedy(params: &ParamStore, cond: &Mat, max_tokens: Option<usize>) -> Result<Sampled, ModelError> {
    let cap = max_tokens.unwrap_or_else(|| params.config.max_tokens());
    generate(params, cond, cap, |logits| {
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        Ok(best)
    })
}
