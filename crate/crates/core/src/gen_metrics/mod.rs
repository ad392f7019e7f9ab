//! Prior-sampled autoregressive generation and the evaluation metrics.

mod metrics;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{KeywordSpec, TokenId, BOS, CLS, EOS, PAD, UNK};
use crate::diff::{Tape, Tensor};
use crate::error::{input_err, Result};
use crate::model::Model;
pub use metrics::{
    bleu, dis_n, format_g6, order_accuracy, order_correct, rouge_l, self_bleu, MetricsReport, BLEU_EPSILON,
};

/// Default cap on generated tokens, before clamping to the model's `max_len`.
pub const DEFAULT_MAX_LEN: usize = 100;

/// Requests decoded together by [`generate_all`].
pub const GENERATION_CHUNK: usize = 32;

const NEVER_EMITTED: [TokenId; 4] = [PAD, UNK, CLS, BOS];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Softmax sampling at temperature `τ > 0`.
    Temperature(f64),
}

impl DecodeMode {
    fn validate(self) -> Result<()> {
        match self {
            DecodeMode::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                input_err(format!("temperature must be positive, got {t}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub spec: KeywordSpec,
    pub mode: DecodeMode,
    /// Seeds both the prior noise and token sampling.
    pub seed: u64,
    /// Clamped to the model's `max_len`.
    pub max_len: usize,
}

impl GenerationRequest {
    pub fn new(spec: KeywordSpec, mode: DecodeMode, seed: u64) -> Self {
        GenerationRequest {
            spec,
            mode,
            seed,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// One request per spec, with per-spec seeds derived from `seed`.
pub fn requests_for(specs: &[KeywordSpec], mode: DecodeMode, seed: u64) -> Vec<GenerationRequest> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| GenerationRequest::new(s.clone(), mode, request_seed(seed, i)))
        .collect()
}

fn request_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generates one sequence; markers are stripped.
pub fn generate(model: &Model, request: &GenerationRequest) -> Result<Vec<TokenId>> {
    Ok(generate_batch(model, std::slice::from_ref(request))?.remove(0))
}

/// Decodes all `requests` in one padded batch.
pub fn generate_batch(model: &Model, requests: &[GenerationRequest]) -> Result<Vec<Vec<TokenId>>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &model.config;
    for r in requests {
        r.mode.validate()?;
        r.spec.validate()?;
        if r.spec.is_empty() || r.spec.len() > cfg.max_keywords {
            return input_err(format!("keyword count {} outside 1..={}", r.spec.len(), cfg.max_keywords));
        }
        if let Some(k) = r.spec.keywords.iter().find(|&&k| k as usize >= cfg.vocab_size) {
            return input_err(format!("keyword id {k} outside vocabulary of {}", cfg.vocab_size));
        }
    }
    let b = requests.len();
    let kw_len = requests.iter().map(|r| r.spec.len()).max().unwrap_or(0);
    let mut keywords = vec![PAD; b * kw_len];
    let mut orders = vec![0u32; b * kw_len];
    let mut kw_mask = vec![false; b * kw_len];
    for (i, r) in requests.iter().enumerate() {
        let m = r.spec.len();
        keywords[i * kw_len..i * kw_len + m].copy_from_slice(&r.spec.keywords);
        orders[i * kw_len..i * kw_len + m].copy_from_slice(&r.spec.orders);
        kw_mask[i * kw_len..i * kw_len + m].iter_mut().for_each(|x| *x = true);
    }

    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let latent = cfg.latent_dim;
    let mut eps = Vec::with_capacity(b * latent);
    for rng in &mut rngs {
        eps.extend((0..latent).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }

    let mut tape = Tape::new();
    let cond = model.encode_condition_on(&mut tape, &keywords, &orders, &kw_mask, kw_len, b)?;
    let prior = model.infer_prior_on(&mut tape, cond.c, b)?;
    let eps = tape.constant(Tensor::from_parts(vec![b, latent], eps));
    let z = Model::sample_latent_on(&mut tape, prior, eps)?;
    let z = tape.value(z).clone();
    let e = tape.value(cond.e).clone();

    let limits: Vec<usize> = requests.iter().map(|r| r.max_len.min(cfg.max_len)).collect();
    let steps = limits.iter().copied().max().unwrap_or(0);
    let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); b];
    let mut done: Vec<bool> = limits.iter().map(|&l| l == 0).collect();
    for t in 0..steps {
        if done.iter().all(|&d| d) {
            break;
        }
        let p = t + 1;
        let mut prefix = vec![PAD; b * p];
        for (i, seq) in out.iter().enumerate() {
            prefix[i * p] = BOS;
            prefix[i * p + 1..i * p + 1 + seq.len()].copy_from_slice(seq);
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let ev = tape.constant(e.clone());
        let logits = model.decode_on(&mut tape, zv, ev, &kw_mask, kw_len, &prefix, p, b)?;
        let logits = tape.value(logits);
        for i in 0..b {
            if done[i] {
                continue;
            }
            let row = logits.row(i * p + t);
            let next = choose(row, requests[i].mode, &mut rngs[i]);
            if next == EOS {
                done[i] = true;
            } else {
                out[i].push(next);
                if out[i].len() >= limits[i] {
                    done[i] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Generates for every request in chunks of [`GENERATION_CHUNK`].
pub fn generate_all(model: &Model, requests: &[GenerationRequest]) -> Result<Vec<Vec<TokenId>>> {
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(GENERATION_CHUNK) {
        out.extend(generate_batch(model, chunk)?);
    }
    Ok(out)
}

fn choose(logits: &[f64], mode: DecodeMode, rng: &mut ChaCha8Rng) -> TokenId {
    let allowed = |i: usize| !NEVER_EMITTED.contains(&(i as TokenId));
    match mode {
        DecodeMode::Greedy => {
            let mut best = EOS as usize;
            for (i, &l) in logits.iter().enumerate() {
                if allowed(i) && l > logits[best] {
                    best = i;
                }
            }
            best as TokenId
        }
        DecodeMode::Temperature(tau) => {
            let max = logits
                .iter()
                .enumerate()
                .filter(|&(i, _)| allowed(i))
                .map(|(_, &l)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| if allowed(i) { ((l - max) / tau).exp() } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut last = EOS as usize;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    last = i;
                    if u < w {
                        return i as TokenId;
                    }
                    u -= w;
                }
            }
            last as TokenId
        }
    }
}

#[cfg(test)]
mod tests;
