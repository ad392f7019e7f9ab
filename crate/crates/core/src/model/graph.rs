use super::{LatentDistribution, Model, PriorKind};
use crate::data::{Batch, TokenId, BOS, CLS, EOS, PAD};
use crate::diff::{AttentionSpec, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::objective;

/// Condition-encoder outputs on a tape: `c` is `[batch, d]`, `e` is
/// `[batch * kw_len, d]`.
#[derive(Clone, Copy, Debug)]
pub struct ConditionVars {
    pub c: Var,
    pub e: Var,
}

/// `[batch, latent]` mean and log standard deviation.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl LatentVars {
    /// First row as a plain distribution.
    pub fn to_distribution(&self, tape: &Tape) -> LatentDistribution {
        LatentDistribution {
            mu: tape.value(self.mu).row(0).to_vec(),
            log_sigma: tape.value(self.log_sigma).row(0).to_vec(),
        }
    }

    pub fn row(&self, tape: &Tape, r: usize) -> LatentDistribution {
        LatentDistribution {
            mu: tape.value(self.mu).row(r).to_vec(),
            log_sigma: tape.value(self.log_sigma).row(r).to_vec(),
        }
    }
}

/// Nodes of one full CVAE forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    /// Batch-mean of per-sequence summed NLL.
    pub recon: Var,
    /// Batch-mean of per-example KL summed over latent dimensions.
    pub kl: Var,
    pub posterior: LatentVars,
    pub prior: LatentVars,
    pub z: Var,
}

impl Model {
    fn p(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
        Ok(tape.param(&self.params, id))
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.w"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{name}.g"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        tape.layer_norm(x, g, b)
    }

    /// Multi-head attention sublayer with residual; `memory` defaults to
    /// the normalized input itself.
    fn attend(&self, tape: &mut Tape, x: Var, memory: Option<Var>, ln: &str, name: &str, spec: AttentionSpec) -> Result<Var> {
        let h = self.norm(tape, x, ln)?;
        let src = memory.unwrap_or(h);
        let wq = self.p(tape, &format!("{name}.wq"))?;
        let wk = self.p(tape, &format!("{name}.wk"))?;
        let wv = self.p(tape, &format!("{name}.wv"))?;
        let wo = self.p(tape, &format!("{name}.wo"))?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(src, wk)?;
        let v = tape.matmul(src, wv)?;
        let a = tape.attention(q, k, v, spec)?;
        let o = tape.matmul(a, wo)?;
        tape.add(x, o)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, ln: &str, name: &str) -> Result<Var> {
        let h = self.norm(tape, x, ln)?;
        let h = self.linear_pair(tape, h, name, "1")?;
        let h = tape.gelu(h)?;
        let h = self.linear_pair(tape, h, name, "2")?;
        tape.add(x, h)
    }

    fn linear_pair(&self, tape: &mut Tape, x: Var, name: &str, which: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.w{which}"))?;
        let b = self.p(tape, &format!("{name}.b{which}"))?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn encoder_stack(&self, tape: &mut Tape, mut x: Var, prefix: &str, spec: &AttentionSpec) -> Result<Var> {
        for l in 0..self.config.encoder_layers {
            let n = format!("{prefix}.l{l}");
            x = self.attend(tape, x, None, &format!("{n}.ln1"), &format!("{n}.self"), spec.clone())?;
            x = self.feed_forward(tape, x, &format!("{n}.ln2"), &format!("{n}.ffn"))?;
        }
        self.norm(tape, x, &format!("{prefix}.lnf"))
    }

    /// `tokens` holds `batch` references padded with PAD to `seq_len`.
    /// Returns the CLS rows, `[batch, d]`.
    pub fn encode_target_on(&self, tape: &mut Tape, tokens: &[TokenId], seq_len: usize, batch: usize) -> Result<Var> {
        let len = seq_len + 1;
        let mut ids = Vec::with_capacity(batch * len);
        let mut pos = Vec::with_capacity(batch * len);
        let mut mask = Vec::with_capacity(batch * len);
        for b in 0..batch {
            for i in 0..len {
                let t = if i == 0 { CLS } else { tokens[b * seq_len + i - 1] };
                ids.push(t as usize);
                pos.push(i);
                mask.push(t != PAD);
            }
        }
        let emb = self.p(tape, "tok_emb")?;
        let pemb = self.p(tape, "tgt.pos")?;
        let x = tape.gather(emb, ids)?;
        let pe = tape.gather(pemb, pos)?;
        let x = tape.add(x, pe)?;
        let spec = AttentionSpec {
            batch,
            q_len: len,
            k_len: len,
            heads: self.config.heads,
            causal: false,
            key_mask: Some(mask),
        };
        let x = self.encoder_stack(tape, x, "tgt", &spec)?;
        tape.gather(x, (0..batch).map(|b| b * len).collect())
    }

    /// Keywords and orders are `[batch * kw_len]`; `kw_mask` marks real
    /// keywords. Element representations are token plus order embeddings;
    /// the CLS slot carries the token embedding only.
    pub fn encode_condition_on(
        &self,
        tape: &mut Tape,
        keywords: &[TokenId],
        orders: &[u32],
        kw_mask: &[bool],
        kw_len: usize,
        batch: usize,
    ) -> Result<ConditionVars> {
        let d = self.config.d_model;
        let len = kw_len + 1;
        let mut ids = Vec::with_capacity(batch * len);
        let mut ord = Vec::with_capacity(batch * len);
        let mut mask = Vec::with_capacity(batch * len);
        let mut keep = Vec::with_capacity(batch * len * d);
        for b in 0..batch {
            ids.push(CLS as usize);
            ord.push(0);
            mask.push(true);
            keep.extend(std::iter::repeat_n(0.0, d));
            for j in 0..kw_len {
                let i = b * kw_len + j;
                ids.push(keywords[i] as usize);
                ord.push(orders[i] as usize);
                mask.push(kw_mask[i]);
                keep.extend(std::iter::repeat_n(1.0, d));
            }
        }
        let emb = self.p(tape, "tok_emb")?;
        let oemb = self.p(tape, "cond.order")?;
        let u = tape.gather(emb, ids)?;
        let o = tape.gather(oemb, ord)?;
        let keep = tape.constant(Tensor::from_parts(vec![batch * len, d], keep));
        let o = tape.mul(o, keep)?;
        let x = tape.add(u, o)?;
        let spec = AttentionSpec {
            batch,
            q_len: len,
            k_len: len,
            heads: self.config.heads,
            causal: false,
            key_mask: Some(mask),
        };
        let x = self.encoder_stack(tape, x, "cond", &spec)?;
        let c = tape.gather(x, (0..batch).map(|b| b * len).collect())?;
        let e = tape.gather(
            x,
            (0..batch).flat_map(|b| (1..len).map(move |j| b * len + j)).collect(),
        )?;
        Ok(ConditionVars { c, e })
    }

    fn latent_head(&self, tape: &mut Tape, mut x: Var, name: &str) -> Result<LatentVars> {
        for i in 0..self.config.fc_hidden.len() {
            x = self.linear(tape, x, &format!("{name}.fc{i}"))?;
            x = tape.gelu(x)?;
        }
        let mu = self.linear(tape, x, &format!("{name}.mu"))?;
        let log_sigma = self.linear(tape, x, &format!("{name}.ls"))?;
        Ok(LatentVars { mu, log_sigma })
    }

    /// `q(z | x, y)` from `[h ∥ c]`.
    pub fn infer_posterior_on(&self, tape: &mut Tape, h: Var, c: Var) -> Result<LatentVars> {
        let x = tape.concat(&[h, c])?;
        self.latent_head(tape, x, "post")
    }

    /// `p(z | y)` from `c`, or constant standard normal rows.
    pub fn infer_prior_on(&self, tape: &mut Tape, c: Var, batch: usize) -> Result<LatentVars> {
        match self.config.prior {
            PriorKind::Conditional => self.latent_head(tape, c, "prior"),
            PriorKind::StandardNormal => {
                let shape = [batch, self.config.latent_dim];
                let mu = tape.constant(Tensor::zeros(&shape));
                let log_sigma = tape.constant(Tensor::zeros(&shape));
                Ok(LatentVars { mu, log_sigma })
            }
        }
    }

    /// `z = mu + exp(log_sigma) * eps`.
    pub fn sample_latent_on(tape: &mut Tape, dist: LatentVars, eps: Var) -> Result<Var> {
        let sigma = tape.exp(dist.log_sigma)?;
        let noise = tape.mul(sigma, eps)?;
        tape.add(dist.mu, noise)
    }

    /// Logits `[batch * prefix_len, vocab]` for PAD-padded prefixes that
    /// start with BOS. Cross-attention keys and values are the projected
    /// `[z ⊕ E_j]` rows of each example.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        z: Var,
        e: Var,
        kw_mask: &[bool],
        kw_len: usize,
        prefix: &[TokenId],
        prefix_len: usize,
        batch: usize,
    ) -> Result<Var> {
        let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..prefix_len).collect();
        let mask: Vec<bool> = prefix.iter().map(|&t| t != PAD).collect();
        let emb = self.p(tape, "tok_emb")?;
        let pemb = self.p(tape, "dec.pos")?;
        let x = tape.gather(emb, ids)?;
        let pe = tape.gather(pemb, pos)?;
        let mut x = tape.add(x, pe)?;

        let zrows = tape.gather(z, (0..batch).flat_map(|b| std::iter::repeat_n(b, kw_len)).collect())?;
        let mem = tape.concat(&[zrows, e])?;
        let mem = self.linear(tape, mem, "dec.mem")?;

        let self_spec = AttentionSpec {
            batch,
            q_len: prefix_len,
            k_len: prefix_len,
            heads: self.config.heads,
            causal: true,
            key_mask: Some(mask),
        };
        let cross_spec = AttentionSpec {
            batch,
            q_len: prefix_len,
            k_len: kw_len,
            heads: self.config.heads,
            causal: false,
            key_mask: Some(kw_mask.to_vec()),
        };
        for l in 0..self.config.decoder_layers {
            let n = format!("dec.l{l}");
            x = self.attend(tape, x, None, &format!("{n}.ln1"), &format!("{n}.self"), self_spec.clone())?;
            x = self.attend(tape, x, Some(mem), &format!("{n}.ln2"), &format!("{n}.cross"), cross_spec.clone())?;
            x = self.feed_forward(tape, x, &format!("{n}.ln3"), &format!("{n}.ffn"))?;
        }
        let x = self.norm(tape, x, "dec.lnf")?;
        self.linear(tape, x, "dec.out")
    }

    /// Full teacher-forced forward pass; `eps` is `[batch, latent]`.
    pub fn loss_terms_on(&self, tape: &mut Tape, batch: &Batch, eps: Tensor) -> Result<LossVars> {
        let (bsz, l, m) = (batch.size, batch.seq_len, batch.kw_len);
        if eps.shape() != [bsz, self.config.latent_dim] {
            return Err(Error::Shape(format!(
                "eps must be [{bsz}, {}], got {:?}",
                self.config.latent_dim,
                eps.shape()
            )));
        }
        let h = self.encode_target_on(tape, &batch.tokens, l, bsz)?;
        let cond = self.encode_condition_on(tape, &batch.keywords, &batch.orders, &batch.keyword_mask, m, bsz)?;
        let posterior = self.infer_posterior_on(tape, h, cond.c)?;
        let prior = self.infer_prior_on(tape, cond.c, bsz)?;
        let eps = tape.constant(eps);
        let z = Model::sample_latent_on(tape, posterior, eps)?;

        let plen = l + 1;
        let mut prefix = Vec::with_capacity(bsz * plen);
        let mut targets = Vec::with_capacity(bsz * plen);
        let mut weights = Vec::with_capacity(bsz * plen);
        let share = 1.0 / bsz as f64;
        for b in 0..bsz {
            let n = batch.lengths[b];
            let row = &batch.tokens[b * l..(b + 1) * l];
            prefix.push(BOS);
            prefix.extend_from_slice(row);
            for i in 0..plen {
                let (t, w) = match i.cmp(&n) {
                    std::cmp::Ordering::Less => (row[i], share),
                    std::cmp::Ordering::Equal => (EOS, share),
                    std::cmp::Ordering::Greater => (PAD, 0.0),
                };
                targets.push(t as usize);
                weights.push(w);
            }
        }
        let logits = self.decode_on(tape, z, cond.e, &batch.keyword_mask, m, &prefix, plen, bsz)?;
        let recon = objective::reconstruction_nll_on(tape, logits, targets, weights)?;
        let kl = objective::gaussian_kl_on(tape, posterior, prior, bsz)?;
        Ok(LossVars {
            recon,
            kl,
            posterior,
            prior,
            z,
        })
    }
}
