//! Autoregressive decoding: greedy, top-k, and nucleus sampling over the
//! KV-cache inference path, with a cache-free recomputation oracle.

mod repl;

pub use repl::{answer_question, repl, DISCLAIMER};

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{forward, KVCache, ModelError, ModelHandle};
use crate::tensor::{kernels, Graph};
use crate::tokenizer::{TokenizerError, EOS};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("prompt of {len} tokens exceeds the {max}-token context window")]
    PromptTooLong { len: usize, max: usize },
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("invalid decode configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    TopK,
    Nucleus,
}

/// Decoding settings. Greedy ignores `k`, `p`, `temperature`, and `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Candidate count for top-k.
    pub k: usize,
    /// Cumulative-probability cutoff for nucleus sampling, in (0, 1].
    pub p: f32,
    /// Softmax temperature for the sampled modes; must be positive.
    pub temperature: f32,
    pub max_new_tokens: usize,
    /// Generation halts after emitting any of these (default: EOS).
    pub stop_tokens: BTreeSet<u32>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            k: 40,
            p: 0.9,
            temperature: 1.0,
            max_new_tokens: 128,
            stop_tokens: BTreeSet::from([EOS]),
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        match self.mode {
            DecodeMode::Greedy => Ok(()),
            DecodeMode::TopK => {
                if self.k == 0 {
                    return Err(GenError::InvalidConfig("top-k requires k >= 1".into()));
                }
                self.check_temperature()
            }
            DecodeMode::Nucleus => {
                if !(self.p > 0.0 && self.p <= 1.0) {
                    return Err(GenError::InvalidConfig(
                        "nucleus requires 0 < p <= 1".into(),
                    ));
                }
                self.check_temperature()
            }
        }
    }

    fn check_temperature(&self) -> Result<(), GenError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(GenError::InvalidConfig(
                "temperature must be a positive finite value".into(),
            ));
        }
        Ok(())
    }
}

/// Greedy argmax with ties broken toward the lowest token id.
fn argmax(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Samples one token from a logits row under `cfg`.
///
/// Sampled modes share one canonical walk: temperature-scale the logits,
/// softmax, order candidates by probability descending (ties toward the
/// lower id), truncate per mode (first `k`, or the smallest prefix whose
/// cumulative probability reaches `p` — a candidate is kept while the mass
/// *before* it is `< p`), then spend a single uniform draw on a subtraction
/// walk down the renormalized list.
fn sample_token(logits: &[f32], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> u32 {
    if cfg.mode == DecodeMode::Greedy {
        return argmax(logits);
    }
    let mut row = logits.to_vec();
    if cfg.temperature != 1.0 {
        for x in row.iter_mut() {
            *x /= cfg.temperature;
        }
    }
    kernels::softmax_row(&mut row);

    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|a, b| {
        row[*b]
            .partial_cmp(&row[*a])
            .expect("softmax output is finite")
            .then(a.cmp(b))
    });

    let kept: &[usize] = match cfg.mode {
        DecodeMode::TopK => &order[..cfg.k.min(order.len())],
        DecodeMode::Nucleus => {
            let mut cum = 0.0f32;
            let mut end = 0usize;
            for &idx in &order {
                if cum >= cfg.p {
                    break;
                }
                end += 1;
                cum += row[idx];
            }
            &order[..end]
        }
        DecodeMode::Greedy => unreachable!(),
    };

    let total: f32 = kept.iter().map(|&i| row[i]).sum();
    let mut remaining = rng.gen::<f32>() * total;
    for &idx in kept {
        if remaining < row[idx] {
            return idx as u32;
        }
        remaining -= row[idx];
    }
    *kept.last().expect("kept set is never empty") as u32
}

fn check_prompt(model: &ModelHandle, prompt: &[u32], cfg: &DecodeConfig) -> Result<(), GenError> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(GenError::EmptyPrompt);
    }
    let max = model.config.max_seq_len;
    if prompt.len() > max {
        return Err(GenError::PromptTooLong {
            len: prompt.len(),
            max,
        });
    }
    Ok(())
}

/// Decodes up to `max_new_tokens` continuations of `prompt` through the KV
/// cache, returning prompt ++ generated tokens. Stops at any stop token
/// (which is kept as the final element) or when the context window fills.
pub fn generate(
    model: &ModelHandle,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<u32>, GenError> {
    check_prompt(model, prompt, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = prompt.to_vec();
    let budget = cfg
        .max_new_tokens
        .min(model.config.max_seq_len - prompt.len());
    if budget == 0 {
        return Ok(out);
    }

    let mut cache = KVCache::new(model)?;
    let mut logits = Vec::new();
    for &t in prompt {
        logits = cache.push(t)?;
    }
    for step in 0..budget {
        let next = sample_token(&logits, cfg, &mut rng);
        out.push(next);
        if cfg.stop_tokens.contains(&next) {
            break;
        }
        if step + 1 < budget {
            logits = cache.push(next)?;
        }
    }
    Ok(out)
}

/// Cache-free reference decoder: recomputes the full forward pass for every
/// generated token. Kept as the equivalence oracle for [`generate`]; the two
/// must agree token-for-token on identical inputs.
pub fn generate_nocache(
    model: &ModelHandle,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<u32>, GenError> {
    check_prompt(model, prompt, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = prompt.to_vec();
    let budget = cfg
        .max_new_tokens
        .min(model.config.max_seq_len - prompt.len());
    let vocab = model.config.vocab_size;

    for _ in 0..budget {
        let g = Graph::inference();
        let logits = forward(&g, model, &out, false, None)?;
        let data = logits.data_f32();
        let row = &data[(out.len() - 1) * vocab..out.len() * vocab];
        let next = sample_token(row, cfg, &mut rng);
        out.push(next);
        if cfg.stop_tokens.contains(&next) {
            break;
        }
    }
    Ok(out)
}
