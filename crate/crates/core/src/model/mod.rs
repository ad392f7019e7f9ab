//! The conditional VAE: target encoder, keyword/order encoder, posterior
//! and prior heads, and a decoder that cross-attends over `[z ⊕ E_j]`.
//!
//! All networks are pre-norm transformer stacks with learned position
//! embeddings. The keyword encoder has no position embedding; keyword order
//! enters only through the order embedding.

mod graph;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::{KeywordSpec, TokenId, TrainingExample, BOS};
use crate::diff::{ParamStore, Tape, Tensor};
use crate::error::{input_err, Error, Result};
pub use graph::{ConditionVars, LatentVars, LossVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    /// `p(z|y)` from an FC head over the condition summary.
    Conditional,
    /// Fixed `N(0, I)`.
    StandardNormal,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Conditional => "conditional",
            PriorKind::StandardNormal => "standard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conditional" => Some(PriorKind::Conditional),
            "standard" => Some(PriorKind::StandardNormal),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Word and order embedding width; must equal `d_model`.
    pub embed_dim: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub latent_dim: usize,
    /// Hidden sizes of the FC stacks in the posterior and prior heads.
    pub fc_hidden: Vec<usize>,
    /// Longest reference (without markers).
    pub max_len: usize,
    /// Most keywords per example.
    pub max_keywords: usize,
    pub prior: PriorKind,
}

impl ModelConfig {
    /// Defaults sized for CPU training in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            d_model: 32,
            ffn_dim: 64,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 4,
            latent_dim: 16,
            fc_hidden: vec![32, 16],
            max_len: 32,
            max_keywords: 8,
            prior: PriorKind::Conditional,
        }
    }

    /// Full-size configuration from the original experiments; documented,
    /// not exercised by the test suite.
    pub fn paper_scale(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 512,
            d_model: 512,
            ffn_dim: 2048,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 8,
            latent_dim: 64,
            fc_hidden: vec![400, 200, 100],
            max_len: 100,
            max_keywords: 50,
            prior: PriorKind::Conditional,
        }
    }

    /// Smallest useful network, for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 8,
            d_model: 8,
            ffn_dim: 12,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            latent_dim: 4,
            fc_hidden: vec![6],
            max_len: 12,
            max_keywords: 4,
            prior: PriorKind::Conditional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= crate::data::EOS as usize {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.embed_dim != self.d_model {
            return fail(format!(
                "embed_dim {} must equal d_model {}",
                self.embed_dim, self.d_model
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.latent_dim == 0 || self.max_len == 0 || self.max_keywords == 0 || self.ffn_dim == 0 {
            return fail("latent_dim, ffn_dim, max_len and max_keywords must be positive".into());
        }
        if self.fc_hidden.contains(&0) {
            return fail("fc_hidden sizes must be positive".into());
        }
        Ok(())
    }
}

/// Per-keyword outputs of the condition encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEncoding {
    /// Summary vector at the CLS position, `d_model` long.
    pub c: Vec<f64>,
    /// One `d_model` row per keyword, in input order.
    pub e: Vec<Vec<f64>>,
}

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl LatentDistribution {
    pub fn standard(dim: usize) -> Self {
        LatentDistribution {
            mu: vec![0.0; dim],
            log_sigma: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }
}

/// Reparameterized draw `z = mu + exp(log_sigma) * eps`.
pub fn sample_latent(dist: &LatentDistribution, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != dist.dim() || dist.log_sigma.len() != dist.dim() {
        return input_err(format!(
            "eps has {} entries for a {}-dimensional latent",
            eps.len(),
            dist.dim()
        ));
    }
    Ok(dist
        .mu
        .iter()
        .zip(&dist.log_sigma)
        .zip(eps)
        .map(|((m, l), e)| m + l.exp() * e)
        .collect())
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_parts(vec![fan_in, fan_out], data)
    }

    fn embedding(&mut self, rows: usize, cols: usize) -> Tensor {
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_parts(vec![rows, cols], data)
    }
}

impl Model {
    /// Fresh parameters: uniform `±1/sqrt(fan_in)` weights, `N(0, 0.02)`
    /// embeddings, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut p = ParamStore::new();
        let d = config.d_model;
        let add = |p: &mut ParamStore, name: String, t: Tensor| p.insert(name, t).map(|_| ());
        add(&mut p, "tok_emb".into(), init.embedding(config.vocab_size, d))?;

        let norm = |p: &mut ParamStore, name: &str| -> Result<()> {
            p.insert(format!("{name}.g"), Tensor::full(&[d], 1.0))?;
            p.insert(format!("{name}.b"), Tensor::zeros(&[d]))?;
            Ok(())
        };
        let attn = |p: &mut ParamStore, init: &mut Init, name: &str| -> Result<()> {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{name}.{w}"), init.weight(d, d))?;
            }
            Ok(())
        };
        let ffn = |p: &mut ParamStore, init: &mut Init, name: &str| -> Result<()> {
            p.insert(format!("{name}.w1"), init.weight(d, config.ffn_dim))?;
            p.insert(format!("{name}.b1"), Tensor::zeros(&[config.ffn_dim]))?;
            p.insert(format!("{name}.w2"), init.weight(config.ffn_dim, d))?;
            p.insert(format!("{name}.b2"), Tensor::zeros(&[d]))?;
            Ok(())
        };

        add(&mut p, "tgt.pos".into(), init.embedding(config.max_len + 1, d))?;
        for l in 0..config.encoder_layers {
            let n = format!("tgt.l{l}");
            norm(&mut p, &format!("{n}.ln1"))?;
            attn(&mut p, &mut init, &format!("{n}.self"))?;
            norm(&mut p, &format!("{n}.ln2"))?;
            ffn(&mut p, &mut init, &format!("{n}.ffn"))?;
        }
        norm(&mut p, "tgt.lnf")?;

        add(&mut p, "cond.order".into(), init.embedding(config.max_keywords + 1, d))?;
        for l in 0..config.encoder_layers {
            let n = format!("cond.l{l}");
            norm(&mut p, &format!("{n}.ln1"))?;
            attn(&mut p, &mut init, &format!("{n}.self"))?;
            norm(&mut p, &format!("{n}.ln2"))?;
            ffn(&mut p, &mut init, &format!("{n}.ffn"))?;
        }
        norm(&mut p, "cond.lnf")?;

        let head = |p: &mut ParamStore, init: &mut Init, name: &str, input: usize| -> Result<()> {
            let mut width = input;
            for (i, &h) in config.fc_hidden.iter().enumerate() {
                p.insert(format!("{name}.fc{i}.w"), init.weight(width, h))?;
                p.insert(format!("{name}.fc{i}.b"), Tensor::zeros(&[h]))?;
                width = h;
            }
            for out in ["mu", "ls"] {
                p.insert(format!("{name}.{out}.w"), init.weight(width, config.latent_dim))?;
                p.insert(format!("{name}.{out}.b"), Tensor::zeros(&[config.latent_dim]))?;
            }
            Ok(())
        };
        head(&mut p, &mut init, "post", 2 * d)?;
        if config.prior == PriorKind::Conditional {
            head(&mut p, &mut init, "prior", d)?;
        }

        add(&mut p, "dec.pos".into(), init.embedding(config.max_len + 1, d))?;
        add(&mut p, "dec.mem.w".into(), init.weight(config.latent_dim + d, d))?;
        add(&mut p, "dec.mem.b".into(), Tensor::zeros(&[d]))?;
        for l in 0..config.decoder_layers {
            let n = format!("dec.l{l}");
            norm(&mut p, &format!("{n}.ln1"))?;
            attn(&mut p, &mut init, &format!("{n}.self"))?;
            norm(&mut p, &format!("{n}.ln2"))?;
            attn(&mut p, &mut init, &format!("{n}.cross"))?;
            norm(&mut p, &format!("{n}.ln3"))?;
            ffn(&mut p, &mut init, &format!("{n}.ffn"))?;
        }
        norm(&mut p, "dec.lnf")?;
        add(&mut p, "dec.out.w".into(), init.weight(d, config.vocab_size))?;
        add(&mut p, "dec.out.b".into(), Tensor::zeros(&[config.vocab_size]))?;

        Ok(Model { config, params: p })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return input_err(format!("token id {t} outside vocabulary of {}", self.config.vocab_size));
        }
        Ok(())
    }

    fn check_spec(&self, spec: &KeywordSpec) -> Result<()> {
        if spec.is_empty() || spec.len() > self.config.max_keywords {
            return input_err(format!(
                "keyword count {} outside 1..={}",
                spec.len(),
                self.config.max_keywords
            ));
        }
        if spec.keywords.len() != spec.orders.len() {
            return input_err("keyword and order lists differ in length");
        }
        if let Some(o) = spec.orders.iter().find(|&&o| o as usize > self.config.max_keywords) {
            return input_err(format!("order label {o} exceeds {}", self.config.max_keywords));
        }
        self.check_tokens(&spec.keywords)
    }

    /// CLS summary `h` of one reference.
    pub fn encode_target(&self, x: &[TokenId]) -> Result<Vec<f64>> {
        if x.is_empty() || x.len() > self.config.max_len {
            return input_err(format!("reference length {} outside 1..={}", x.len(), self.config.max_len));
        }
        self.check_tokens(x)?;
        let mut tape = Tape::new();
        let h = self.encode_target_on(&mut tape, x, x.len(), 1)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Summary `c` and per-keyword rows `E` for one keyword spec. Order
    /// labels are range-checked but not required to be a permutation.
    pub fn encode_condition(&self, spec: &KeywordSpec) -> Result<ConditionEncoding> {
        self.check_spec(spec)?;
        let mut tape = Tape::new();
        let mask = vec![true; spec.len()];
        let cv = self.encode_condition_on(&mut tape, &spec.keywords, &spec.orders, &mask, spec.len(), 1)?;
        let e = tape.value(cv.e);
        Ok(ConditionEncoding {
            c: tape.value(cv.c).data().to_vec(),
            e: (0..spec.len()).map(|j| e.row(j).to_vec()).collect(),
        })
    }

    fn vector_input(&self, tape: &mut Tape, v: &[f64], width: usize, what: &str) -> Result<crate::diff::Var> {
        if v.len() != width {
            return input_err(format!("{what} has {} entries, expected {width}", v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!("{what} contains non-finite values")));
        }
        Ok(tape.constant(Tensor::from_parts(vec![1, width], v.to_vec())))
    }

    pub fn infer_posterior(&self, h: &[f64], c: &[f64]) -> Result<LatentDistribution> {
        let d = self.config.d_model;
        let mut tape = Tape::new();
        let hv = self.vector_input(&mut tape, h, d, "h")?;
        let cv = self.vector_input(&mut tape, c, d, "c")?;
        let lv = self.infer_posterior_on(&mut tape, hv, cv)?;
        Ok(lv.to_distribution(&tape))
    }

    pub fn infer_prior(&self, c: &[f64]) -> Result<LatentDistribution> {
        let mut tape = Tape::new();
        let cv = self.vector_input(&mut tape, c, self.config.d_model, "c")?;
        let lv = self.infer_prior_on(&mut tape, cv, 1)?;
        Ok(lv.to_distribution(&tape))
    }

    /// Next-token logits for every prefix position, `len(prefix)` rows of
    /// `vocab_size`. The prefix starts with BOS and holds at most
    /// `max_len + 1` tokens.
    pub fn decode_logits(&self, z: &[f64], cond: &ConditionEncoding, prefix: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.d_model;
        if prefix.first() != Some(&BOS) {
            return input_err("decoder prefix must start with BOS");
        }
        if prefix.len() > self.config.max_len + 1 {
            return input_err(format!(
                "prefix of {} tokens exceeds {}",
                prefix.len(),
                self.config.max_len + 1
            ));
        }
        self.check_tokens(prefix)?;
        if cond.e.is_empty() || cond.e.iter().any(|r| r.len() != d) {
            return input_err("condition encoding rows must be d_model wide");
        }
        let mut tape = Tape::new();
        let zv = self.vector_input(&mut tape, z, self.config.latent_dim, "z")?;
        let e = Tensor::new(vec![cond.e.len(), d], cond.e.concat())?;
        let ev = tape.constant(e);
        let mask = vec![true; cond.e.len()];
        let logits = self.decode_on(&mut tape, zv, ev, &mask, cond.e.len(), prefix, prefix.len(), 1)?;
        let t = tape.value(logits);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    /// Decoder input `[BOS, x_1..x_n]` and teacher-forcing targets
    /// `[x_1..x_n, EOS]` for one example.
    pub fn teacher_forcing(example: &TrainingExample) -> (Vec<TokenId>, Vec<TokenId>) {
        let mut input = vec![BOS];
        input.extend_from_slice(&example.reference);
        let mut target = example.reference.clone();
        target.push(crate::data::EOS);
        (input, target)
    }
}
