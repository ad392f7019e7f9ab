//! Weighted CVAE loss: reconstruction NLL plus `w` times the KL between the
//! posterior and prior latent Gaussians.

use crate::data::TokenId;
use crate::diff::{Tape, Var};
use crate::error::{input_err, Result};
use crate::model::{LatentDistribution, LatentVars};

/// One step's loss terms. `total = recon_nll + weight * kl`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon_nll: f64,
    pub kl: f64,
    pub weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon_nll: f64, kl: f64, weight: f64) -> Result<Self> {
        Ok(LossBreakdown {
            recon_nll,
            kl,
            weight,
            total: weighted_loss(recon_nll, kl, weight)?,
        })
    }
}

/// `KL(q || p)` for diagonal Gaussians, summed over dimensions.
pub fn gaussian_kl(q: &LatentDistribution, p: &LatentDistribution) -> Result<f64> {
    let n = q.dim();
    if p.dim() != n || q.log_sigma.len() != n || p.log_sigma.len() != n {
        return input_err(format!(
            "latent dimensions differ: q has {}/{}, p has {}/{}",
            q.mu.len(),
            q.log_sigma.len(),
            p.mu.len(),
            p.log_sigma.len()
        ));
    }
    let mut kl = 0.0;
    for k in 0..n {
        let (lq, lp) = (q.log_sigma[k], p.log_sigma[k]);
        let dm = q.mu[k] - p.mu[k];
        kl += lp - lq + 0.5 * ((2.0 * lq).exp() + dm * dm) * (-2.0 * lp).exp() - 0.5;
    }
    Ok(kl.max(0.0))
}

/// Tape version over `[batch, latent]` rows: per-row KL summed over latent
/// dimensions, averaged over the batch.
pub fn gaussian_kl_on(tape: &mut Tape, q: LatentVars, p: LatentVars, batch: usize) -> Result<Var> {
    let n = tape.value(q.mu).len();
    let dls = tape.sub(p.log_sigma, q.log_sigma)?;
    let two_lq = tape.scale(q.log_sigma, 2.0)?;
    let var_q = tape.exp(two_lq)?;
    let dmu = tape.sub(q.mu, p.mu)?;
    let dmu2 = tape.mul(dmu, dmu)?;
    let num = tape.add(var_q, dmu2)?;
    let m2lp = tape.scale(p.log_sigma, -2.0)?;
    let inv_var_p = tape.exp(m2lp)?;
    let ratio = tape.mul(num, inv_var_p)?;
    let half = tape.scale(ratio, 0.5)?;
    let terms = tape.add(dls, half)?;
    let s = tape.sum(terms)?;
    let s = tape.add_scalar(s, -0.5 * n as f64)?;
    tape.scale(s, 1.0 / batch as f64)
}

/// Summed negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, skipping masked-out positions.
pub fn reconstruction_nll(logits: &[Vec<f64>], targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    if targets.len() != mask.len() {
        return input_err(format!("{} targets but {} mask entries", targets.len(), mask.len()));
    }
    let mut nll = 0.0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits
            .get(i)
            .ok_or_else(|| crate::Error::Input(format!("no logits for position {i}")))?;
        let t = t as usize;
        if t >= row.len() {
            return input_err(format!("target id {t} outside vocabulary of {}", row.len()));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        nll += lse - row[t];
    }
    Ok(nll)
}

/// Tape version: weighted cross-entropy over `[rows, vocab]` logits. Weights
/// carry both the mask and the batch averaging.
pub fn reconstruction_nll_on(tape: &mut Tape, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
    let v = tape.value(logits).cols();
    if let Some((t, _)) = targets.iter().zip(&weights).find(|(&t, &w)| w != 0.0 && t >= v) {
        return input_err(format!("target id {t} outside vocabulary of {v}"));
    }
    tape.cross_entropy(logits, targets, weights)
}

/// `recon_nll + w * kl` for `w` in `[0, 1]`.
pub fn weighted_loss(recon_nll: f64, kl: f64, w: f64) -> Result<f64> {
    check_weight(w)?;
    Ok(recon_nll + w * kl)
}

pub fn weighted_loss_on(tape: &mut Tape, recon: Var, kl: Var, w: f64) -> Result<Var> {
    check_weight(w)?;
    let wkl = tape.scale(kl, w)?;
    tape.add(recon, wkl)
}

fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return input_err(format!("KL weight {w} outside [0, 1]"));
    }
    Ok(())
}
