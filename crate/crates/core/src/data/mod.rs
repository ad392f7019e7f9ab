//! Synthetic keyword-grounded corpus, order labels, batching and the
//! plain-text corpus format.
//!
//! Corpus file: one example per line, UTF-8,
//! `reference tokens<TAB>keyword:order keyword:order ...`.
//! Order `0` marks a keyword that does not occur in the reference; nonzero
//! orders rank the first occurrences of the present keywords.

mod grammar;
mod vocab;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{input_err, Error, Result};
pub use grammar::{Category, Rendered, SyntheticGrammar};
pub use vocab::{is_special, TokenId, Vocabulary, BOS, CLS, EOS, PAD, UNK};

/// Keywords with their order labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KeywordSpec {
    pub keywords: Vec<TokenId>,
    pub orders: Vec<u32>,
}

impl KeywordSpec {
    pub fn new(keywords: Vec<TokenId>, orders: Vec<u32>) -> Result<Self> {
        let spec = KeywordSpec { keywords, orders };
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    /// Number of keywords expected in the text.
    pub fn present(&self) -> usize {
        self.orders.iter().filter(|&&o| o > 0).count()
    }

    /// Checks that nonzero orders are exactly `1..=k`.
    pub fn validate(&self) -> Result<()> {
        if self.keywords.len() != self.orders.len() {
            return input_err(format!(
                "{} keywords but {} order labels",
                self.keywords.len(),
                self.orders.len()
            ));
        }
        let mut ranks: Vec<u32> = self.orders.iter().copied().filter(|&o| o > 0).collect();
        ranks.sort_unstable();
        if ranks.iter().enumerate().any(|(i, &r)| r != i as u32 + 1) {
            return input_err(format!(
                "nonzero order labels {:?} are not a permutation of 1..{}",
                self.orders,
                ranks.len()
            ));
        }
        Ok(())
    }

    /// Keywords with nonzero order, sorted by rank.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut pairs: Vec<(u32, TokenId)> = self
            .orders
            .iter()
            .zip(&self.keywords)
            .filter(|(&o, _)| o > 0)
            .map(|(&o, &k)| (o, k))
            .collect();
        pairs.sort_unstable();
        pairs.into_iter().map(|(_, k)| k).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrainingExample {
    pub reference: Vec<TokenId>,
    pub spec: KeywordSpec,
}

/// Ranks keywords by first occurrence in `reference`; absent keywords get 0.
pub fn derive_order_labels(keywords: &[TokenId], reference: &[TokenId]) -> Result<Vec<u32>> {
    let mut seen = HashSet::new();
    if let Some(dup) = keywords.iter().find(|k| !seen.insert(**k)) {
        return input_err(format!("keyword id {dup} listed twice"));
    }
    let mut firsts: Vec<(usize, usize)> = keywords
        .iter()
        .enumerate()
        .filter_map(|(i, k)| reference.iter().position(|t| t == k).map(|p| (p, i)))
        .collect();
    firsts.sort_unstable();
    let mut orders = vec![0u32; keywords.len()];
    for (rank, &(_, i)) in firsts.iter().enumerate() {
        orders[i] = rank as u32 + 1;
    }
    Ok(orders)
}

/// Knobs for [`generate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    /// Bounds on how many rendered fillers become keywords.
    pub min_present: usize,
    pub max_present: usize,
    /// Probability that an example carries absent (order 0) keywords.
    pub distractor_prob: f64,
    pub max_distractors: usize,
    /// Only templates with a slot count in this range are used; this sets
    /// the text length.
    pub min_slots: usize,
    pub max_slots: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            count: 2000,
            seed: 7,
            min_present: 2,
            max_present: 4,
            distractor_prob: 0.5,
            max_distractors: 2,
            min_slots: 2,
            max_slots: 5,
        }
    }
}

/// Deterministic corpus drawn from `grammar`, token ids under `vocab`.
///
/// Keyword lists are shuffled so listing order carries no information;
/// only the order labels do.
pub fn generate_corpus(
    grammar: &SyntheticGrammar,
    vocab: &Vocabulary,
    config: &CorpusConfig,
) -> Result<Vec<TrainingExample>> {
    if config.count == 0 {
        return input_err("corpus count must be at least 1");
    }
    if config.min_present == 0 || config.min_present > config.max_present {
        return input_err("need 1 <= min_present <= max_present");
    }
    if !(0.0..=1.0).contains(&config.distractor_prob) {
        return input_err("distractor_prob must lie in [0, 1]");
    }
    let templates: Vec<usize> = (0..grammar.templates.len())
        .filter(|&t| {
            let s = grammar.slot_count(t);
            s >= config.min_slots && s <= config.max_slots && s >= config.min_present
        })
        .collect();
    if templates.is_empty() {
        return input_err("no template satisfies the slot bounds");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        let t = *templates.choose(&mut rng).expect("nonempty");
        let rendered = grammar.render(t, &mut rng);
        let slots = rendered.fillers.len();
        let hi = config.max_present.min(slots);
        let present = rng.gen_range(config.min_present.min(hi)..=hi);
        let mut words: Vec<&str> = rendered
            .fillers
            .choose_multiple(&mut rng, present)
            .map(|(_, f)| f.as_str())
            .collect();
        if config.max_distractors > 0 && rng.gen_bool(config.distractor_prob) {
            let used: HashSet<usize> = rendered.fillers.iter().map(|(c, _)| *c).collect();
            let free: Vec<usize> = (0..grammar.categories.len()).filter(|c| !used.contains(c)).collect();
            let n = rng.gen_range(1..=config.max_distractors).min(free.len());
            for &c in free.choose_multiple(&mut rng, n) {
                words.push(grammar.categories[c].fillers.choose(&mut rng).expect("fillers"));
            }
        }
        words.shuffle(&mut rng);
        let reference: Vec<TokenId> = rendered.tokens.iter().map(|w| vocab.lookup(w)).collect();
        let keywords: Vec<TokenId> = words.iter().map(|w| vocab.lookup(w)).collect();
        let orders = derive_order_labels(&keywords, &reference)?;
        out.push(TrainingExample {
            reference,
            spec: KeywordSpec { keywords, orders },
        });
    }
    Ok(out)
}

/// Padded tensors-to-be for one mini-batch, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// Longest reference in the batch.
    pub seq_len: usize,
    pub tokens: Vec<TokenId>,
    pub token_mask: Vec<bool>,
    pub lengths: Vec<usize>,
    /// Longest keyword list in the batch.
    pub kw_len: usize,
    pub keywords: Vec<TokenId>,
    pub orders: Vec<u32>,
    pub keyword_mask: Vec<bool>,
}

impl Batch {
    /// Pads references and keyword lists of `examples` to common lengths.
    pub fn new(examples: &[&TrainingExample], max_len: usize) -> Result<Batch> {
        if examples.is_empty() {
            return input_err("cannot batch zero examples");
        }
        for ex in examples {
            if ex.reference.is_empty() || ex.reference.len() > max_len {
                return input_err(format!(
                    "reference length {} outside 1..={max_len}",
                    ex.reference.len()
                ));
            }
            if ex.spec.is_empty() {
                return input_err("example has no keywords");
            }
            ex.spec.validate()?;
        }
        let size = examples.len();
        let seq_len = examples.iter().map(|e| e.reference.len()).max().unwrap_or(0);
        let kw_len = examples.iter().map(|e| e.spec.len()).max().unwrap_or(0);
        let mut b = Batch {
            size,
            seq_len,
            tokens: vec![PAD; size * seq_len],
            token_mask: vec![false; size * seq_len],
            lengths: Vec::with_capacity(size),
            kw_len,
            keywords: vec![PAD; size * kw_len],
            orders: vec![0; size * kw_len],
            keyword_mask: vec![false; size * kw_len],
        };
        for (i, ex) in examples.iter().enumerate() {
            let n = ex.reference.len();
            b.tokens[i * seq_len..i * seq_len + n].copy_from_slice(&ex.reference);
            b.token_mask[i * seq_len..i * seq_len + n].iter_mut().for_each(|m| *m = true);
            b.lengths.push(n);
            let m = ex.spec.len();
            b.keywords[i * kw_len..i * kw_len + m].copy_from_slice(&ex.spec.keywords);
            b.orders[i * kw_len..i * kw_len + m].copy_from_slice(&ex.spec.orders);
            b.keyword_mask[i * kw_len..i * kw_len + m].iter_mut().for_each(|x| *x = true);
        }
        Ok(b)
    }

    /// Original references with padding removed.
    pub fn sequences(&self) -> Vec<Vec<TokenId>> {
        (0..self.size)
            .map(|i| {
                self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
                    .iter()
                    .zip(&self.token_mask[i * self.seq_len..(i + 1) * self.seq_len])
                    .filter(|(_, &m)| m)
                    .map(|(&t, _)| t)
                    .collect()
            })
            .collect()
    }

    /// Keyword specs with padding removed.
    pub fn specs(&self) -> Vec<KeywordSpec> {
        (0..self.size)
            .map(|i| {
                let r = i * self.kw_len..(i + 1) * self.kw_len;
                let mut spec = KeywordSpec {
                    keywords: Vec::new(),
                    orders: Vec::new(),
                };
                for ((&k, &o), &m) in self.keywords[r.clone()]
                    .iter()
                    .zip(&self.orders[r.clone()])
                    .zip(&self.keyword_mask[r])
                {
                    if m {
                        spec.keywords.push(k);
                        spec.orders.push(o);
                    }
                }
                spec
            })
            .collect()
    }
}

/// Consecutive batches of at most `batch_size` examples.
pub fn batchify(examples: &[TrainingExample], batch_size: usize, max_len: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return input_err("batch size must be at least 1");
    }
    examples
        .chunks(batch_size)
        .map(|chunk| Batch::new(&chunk.iter().collect::<Vec<_>>(), max_len))
        .collect()
}

/// Contiguous train/validation/test partition by rounded fractions.
pub fn split_corpus<T: Clone>(examples: &[T], fractions: [f64; 3]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return input_err(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1"));
    }
    let n = examples.len();
    let n_train = ((n as f64) * fractions[0]).round() as usize;
    let n_val = (((n as f64) * fractions[1]).round() as usize).min(n - n_train);
    let (train, rest) = examples.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((train.to_vec(), val.to_vec(), test.to_vec()))
}

/// `keyword:order` pairs separated by spaces.
pub fn format_spec(spec: &KeywordSpec, vocab: &Vocabulary) -> Result<String> {
    let mut parts = Vec::with_capacity(spec.len());
    for (&k, &o) in spec.keywords.iter().zip(&spec.orders) {
        parts.push(format!("{}:{o}", vocab.token(k)?));
    }
    Ok(parts.join(" "))
}

pub fn parse_spec(line: &str, vocab: &Vocabulary) -> std::result::Result<KeywordSpec, String> {
    let mut keywords = Vec::new();
    let mut orders = Vec::new();
    for pair in line.split_whitespace() {
        let (word, order) = pair
            .rsplit_once(':')
            .ok_or_else(|| format!("expected keyword:order, got {pair:?}"))?;
        if word.is_empty() {
            return Err(format!("empty keyword in {pair:?}"));
        }
        let order: u32 = order.parse().map_err(|_| format!("bad order label in {pair:?}"))?;
        keywords.push(vocab.lookup(word));
        orders.push(order);
    }
    if keywords.is_empty() {
        return Err("no keywords".to_string());
    }
    KeywordSpec::new(keywords, orders).map_err(|e| e.to_string())
}

pub fn format_example(ex: &TrainingExample, vocab: &Vocabulary) -> Result<String> {
    Ok(format!("{}\t{}", vocab.decode(&ex.reference)?, format_spec(&ex.spec, vocab)?))
}

pub fn write_corpus(path: &Path, examples: &[TrainingExample], vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&format_example(ex, vocab)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parses a corpus file; words unknown to `vocab` are appended to it.
pub fn read_corpus(path: &Path, vocab: &mut Vocabulary) -> Result<Vec<TrainingExample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let (reference, spec) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("missing tab between reference and keywords".into()))?;
        for w in reference.split_whitespace().chain(
            spec.split_whitespace()
                .filter_map(|p| p.rsplit_once(':').map(|(w, _)| w)),
        ) {
            vocab.push(w);
        }
        let reference = vocab.encode(reference);
        if reference.is_empty() {
            return Err(parse_err("empty reference".into()));
        }
        let spec = parse_spec(spec, vocab).map_err(parse_err)?;
        out.push(TrainingExample { reference, spec });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
