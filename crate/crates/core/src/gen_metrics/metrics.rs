use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::data::{KeywordSpec, TokenId};
use crate::error::{input_err, Result};

/// Default floor substituted for zero n-gram matches.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngrams<T>(seq: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    seq.windows(n.max(1)).filter(move |_| n > 0)
}

/// Number of distinct n-grams across a corpus.
pub fn dis_n<T: Hash + Eq>(corpus: &[Vec<T>], n: usize) -> usize {
    let mut seen: HashSet<&[T]> = HashSet::new();
    for text in corpus {
        seen.extend(ngrams(text, n));
    }
    seen.len()
}

fn counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for g in ngrams(seq, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Reference length closest to `c`; ties go to the shorter one.
fn closest_length(c: usize, lengths: impl Iterator<Item = usize>) -> usize {
    lengths
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Orders with no candidate n-gram (candidate shorter than `n`) are left out
/// of the geometric mean.
fn combine(precisions: &[(usize, usize)], c: usize, r: usize, eps: f64) -> f64 {
    let defined: Vec<f64> = precisions
        .iter()
        .filter(|&&(_, total)| total > 0)
        .map(|&(hit, total)| if hit == 0 { eps / total as f64 } else { hit as f64 / total as f64 })
        .collect();
    let log_mean = defined.iter().map(|p| p.ln()).sum::<f64>() / defined.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_mean.exp()
}

/// Cumulative BLEU up to `max_n` with uniform weights. Zero clipped counts
/// are replaced by `eps / total`; the brevity penalty uses the closest
/// reference length.
pub fn bleu<T: Hash + Eq>(candidate: &[T], references: &[&[T]], max_n: usize, eps: f64) -> Result<f64> {
    if max_n == 0 {
        return input_err("BLEU order must be at least 1");
    }
    if references.is_empty() {
        return input_err("BLEU needs at least one reference");
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = counts(candidate, n);
        let mut best: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in counts(r, n) {
                if cand.contains_key(g) {
                    let e = best.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        let hit = cand.iter().map(|(g, &c)| c.min(best.get(g).copied().unwrap_or(0))).sum();
        let total = candidate.len().saturating_sub(n - 1);
        precisions.push((hit, total));
    }
    let r = closest_length(candidate.len(), references.iter().map(|r| r.len()));
    Ok(combine(&precisions, candidate.len(), r, eps))
}

/// Mean BLEU of every text against all the others.
pub fn self_bleu<T: Hash + Eq>(corpus: &[Vec<T>], max_n: usize, eps: f64) -> Result<f64> {
    if corpus.len() < 2 {
        return input_err(format!("self-BLEU needs at least 2 texts, got {}", corpus.len()));
    }
    if max_n == 0 {
        return input_err("BLEU order must be at least 1");
    }
    // Per order, the two largest per-text counts of every n-gram with their
    // owners, so "max over all others" is a lookup.
    let mut top: Vec<HashMap<&[T], [(usize, usize); 2]>> = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut m: HashMap<&[T], [(usize, usize); 2]> = HashMap::new();
        for (owner, text) in corpus.iter().enumerate() {
            for (g, c) in counts(text, n) {
                let e = m.entry(g).or_insert([(0, usize::MAX); 2]);
                if c > e[0].0 {
                    e[1] = e[0];
                    e[0] = (c, owner);
                } else if c > e[1].0 {
                    e[1] = (c, owner);
                }
            }
        }
        top.push(m);
    }
    let mut lengths: Vec<(usize, usize)> = corpus.iter().enumerate().map(|(i, t)| (t.len(), i)).collect();
    lengths.sort_unstable();
    let mut total = 0.0;
    for (i, text) in corpus.iter().enumerate() {
        if text.is_empty() {
            continue;
        }
        let mut precisions = Vec::with_capacity(max_n);
        for n in 1..=max_n {
            let mut hit = 0;
            for (g, c) in counts(text, n) {
                let e = top[n - 1][g];
                let other = if e[0].1 == i { e[1].0 } else { e[0].0 };
                hit += c.min(other);
            }
            precisions.push((hit, text.len().saturating_sub(n - 1)));
        }
        let r = closest_length(text.len(), lengths.iter().filter(|(_, j)| *j != i).map(|(l, _)| *l));
        total += combine(&precisions, text.len(), r, eps);
    }
    Ok(total / corpus.len() as f64)
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 between a candidate and a reference.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return input_err("ROUGE-L needs a nonempty reference");
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Whether `text` realizes the ranked keywords of `spec` in order. With
/// `strict`, keywords labelled 0 must also be absent.
pub fn order_correct(text: &[TokenId], spec: &KeywordSpec, strict: bool) -> bool {
    let first = |k: TokenId| text.iter().position(|&t| t == k);
    let mut ranked: Vec<(u32, TokenId)> = spec
        .keywords
        .iter()
        .zip(&spec.orders)
        .filter(|(_, &o)| o > 0)
        .map(|(&k, &o)| (o, k))
        .collect();
    ranked.sort_unstable();
    let mut last = None;
    for (_, k) in ranked {
        match first(k) {
            Some(p) if last.is_none_or(|l| p > l) => last = Some(p),
            _ => return false,
        }
    }
    if strict {
        let absent = spec.keywords.iter().zip(&spec.orders).filter(|(_, &o)| o == 0);
        for (&k, _) in absent {
            if first(k).is_some() {
                return false;
            }
        }
    }
    true
}

/// Fraction of generations that realize their keyword order.
pub fn order_accuracy(pairs: &[(Vec<TokenId>, KeywordSpec)], strict: bool) -> Result<f64> {
    if pairs.is_empty() {
        return input_err("order accuracy needs at least one generation");
    }
    let ok = pairs.iter().filter(|(t, s)| order_correct(t, s, strict)).count();
    Ok(ok as f64 / pairs.len() as f64)
}

/// Corpus-level evaluation of a generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub count: usize,
    pub dis_1: usize,
    pub dis_2: usize,
    pub dis_3: usize,
    pub self_bleu_1: f64,
    pub self_bleu_2: f64,
    pub self_bleu_3: f64,
    pub rouge_l: f64,
    pub order_accuracy: f64,
    pub order_accuracy_strict: f64,
}

impl MetricsReport {
    /// Generations, references and specs are aligned by index.
    pub fn compute(generations: &[Vec<TokenId>], references: &[Vec<TokenId>], specs: &[KeywordSpec]) -> Result<Self> {
        if generations.len() != references.len() || generations.len() != specs.len() {
            return input_err(format!(
                "{} generations, {} references and {} specs are not aligned",
                generations.len(),
                references.len(),
                specs.len()
            ));
        }
        let mut rouge = 0.0;
        for (g, r) in generations.iter().zip(references) {
            rouge += rouge_l(g, r)?;
        }
        let pairs: Vec<(Vec<TokenId>, KeywordSpec)> =
            generations.iter().cloned().zip(specs.iter().cloned()).collect();
        Ok(MetricsReport {
            count: generations.len(),
            dis_1: dis_n(generations, 1),
            dis_2: dis_n(generations, 2),
            dis_3: dis_n(generations, 3),
            self_bleu_1: self_bleu(generations, 1, BLEU_EPSILON)?,
            self_bleu_2: self_bleu(generations, 2, BLEU_EPSILON)?,
            self_bleu_3: self_bleu(generations, 3, BLEU_EPSILON)?,
            rouge_l: rouge / generations.len().max(1) as f64,
            order_accuracy: order_accuracy(&pairs, false)?,
            order_accuracy_strict: order_accuracy(&pairs, true)?,
        })
    }

    /// `key = value` lines; reals at six significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("count", self.count.to_string());
        line("dis_1", self.dis_1.to_string());
        line("dis_2", self.dis_2.to_string());
        line("dis_3", self.dis_3.to_string());
        line("self_bleu_1", format_g6(self.self_bleu_1));
        line("self_bleu_2", format_g6(self.self_bleu_2));
        line("self_bleu_3", format_g6(self.self_bleu_3));
        line("rouge_l", format_g6(self.rouge_l));
        line("order_accuracy", format_g6(self.order_accuracy));
        line("order_accuracy_strict", format_g6(self.order_accuracy_strict));
        s
    }
}

/// C `%g` with six significant digits.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.5e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mant), sign, exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, x))
    }
}
