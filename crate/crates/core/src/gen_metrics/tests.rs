use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;
use crate::data::{SyntheticGrammar, Vocabulary};
use crate::model::{sample_latent, LatentDistribution, ModelConfig};

fn model(seed: u64) -> (Model, Vocabulary) {
    let vocab = SyntheticGrammar::default().vocabulary();
    (Model::new(ModelConfig::tiny(vocab.len()), seed).unwrap(), vocab)
}

fn spec(v: &Vocabulary, words: &str, orders: &[u32]) -> KeywordSpec {
    KeywordSpec::new(words.split_whitespace().map(|w| v.lookup(w)).collect(), orders.to_vec()).unwrap()
}

fn some_specs(v: &Vocabulary) -> Vec<KeywordSpec> {
    let words: Vec<&str> = v.tokens()[5..].iter().map(|s| s.as_str()).collect();
    (0..6)
        .map(|i| {
            let n = 1 + i % 3;
            let kws: Vec<&str> = (0..n).map(|j| words[(7 * i + 3 * j) % words.len()]).collect();
            let orders: Vec<u32> = (0..n as u32).map(|j| if i % 4 == 3 && j == 0 { 0 } else { j + 1 - u32::from(i % 4 == 3) }).collect();
            spec(v, &kws.join(" "), &orders)
        })
        .collect()
}

/// Greedy decoding through the single-example API, one forward per token.
fn reference_greedy(m: &Model, spec: &KeywordSpec, seed: u64, limit: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..m.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    let cond = m.encode_condition(spec).unwrap();
    let prior = match m.config.prior {
        crate::model::PriorKind::Conditional => m.infer_prior(&cond.c).unwrap(),
        crate::model::PriorKind::StandardNormal => LatentDistribution::standard(m.config.latent_dim),
    };
    let z = sample_latent(&prior, &eps).unwrap();
    let mut prefix = vec![BOS];
    while prefix.len() <= limit {
        let logits = m.decode_logits(&z, &cond, &prefix).unwrap();
        let last = logits.last().unwrap();
        let next = (0..last.len())
            .filter(|&i| !NEVER_EMITTED.contains(&(i as TokenId)))
            .fold(EOS as usize, |b, i| if last[i] > last[b] { i } else { b }) as TokenId;
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    prefix.remove(0);
    prefix
}

#[test]
fn greedy_matches_single_example_decoding() {
    let (m, v) = model(3);
    for (i, s) in some_specs(&v).iter().enumerate() {
        let req = GenerationRequest::new(s.clone(), DecodeMode::Greedy, i as u64);
        let got = generate(&m, &req).unwrap();
        assert_eq!(got, reference_greedy(&m, s, i as u64, m.config.max_len));
    }
}

#[test]
fn deterministic_and_bounded() {
    let (m, v) = model(4);
    let reqs = requests_for(&some_specs(&v), DecodeMode::Temperature(1.5), 99);
    let a = generate_all(&m, &reqs).unwrap();
    assert_eq!(a, generate_all(&m, &reqs).unwrap());
    for (g, r) in a.iter().zip(&reqs) {
        assert!(g.len() <= m.config.max_len.min(r.max_len));
        assert!(g.iter().all(|t| !NEVER_EMITTED.contains(t) && *t != EOS));
    }
    let mut short = reqs[0].clone();
    short.max_len = 2;
    assert!(generate(&m, &short).unwrap().len() <= 2);
    short.max_len = 0;
    assert!(generate(&m, &short).unwrap().is_empty());
    assert!(generate_all(&m, &[]).unwrap().is_empty());
}

#[test]
fn batching_does_not_change_greedy_output() {
    let (m, v) = model(5);
    let reqs = requests_for(&some_specs(&v), DecodeMode::Greedy, 7);
    let batched = generate_batch(&m, &reqs).unwrap();
    for (r, b) in reqs.iter().zip(&batched) {
        assert_eq!(&generate(&m, r).unwrap(), b);
    }
}

#[test]
fn low_temperature_converges_to_greedy() {
    // An untrained model has near-uniform logits; sharpen them so the
    // top-two gap is well above the temperature.
    let (mut m, v) = model(6);
    let id = m.params.id("dec.out.w").unwrap();
    m.params.get_mut(id).data_mut().iter_mut().for_each(|w| *w *= 1000.0);
    for s in some_specs(&v) {
        let greedy = generate(&m, &GenerationRequest::new(s.clone(), DecodeMode::Greedy, 17)).unwrap();
        let cold = generate(&m, &GenerationRequest::new(s, DecodeMode::Temperature(1e-4), 17)).unwrap();
        assert_eq!(greedy, cold);
    }
}

#[test]
fn sampling_varies_with_seed() {
    let (m, v) = model(8);
    let s = some_specs(&v).remove(1);
    let outs: BTreeSet<Vec<TokenId>> = (0..8)
        .map(|seed| generate(&m, &GenerationRequest::new(s.clone(), DecodeMode::Temperature(2.0), seed)).unwrap())
        .collect();
    assert!(outs.len() > 1);
}

#[test]
fn rejects_bad_requests() {
    let (m, v) = model(9);
    let s = some_specs(&v).remove(0);
    let bad_tau = GenerationRequest::new(s.clone(), DecodeMode::Temperature(0.0), 1);
    assert!(generate(&m, &bad_tau).is_err());
    let too_many = KeywordSpec::new(vec![5; 5], vec![0; 5]).unwrap();
    assert!(generate(&m, &GenerationRequest::new(too_many, DecodeMode::Greedy, 1)).is_err());
    let oov = KeywordSpec::new(vec![10_000], vec![1]).unwrap();
    assert!(generate(&m, &GenerationRequest::new(oov, DecodeMode::Greedy, 1)).is_err());
}

fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    // Longest subsequence of `a` (by enumeration) that is also one of `b`.
    fn is_subseq(s: &[u8], t: &[u8]) -> bool {
        let mut it = t.iter();
        s.iter().all(|x| it.any(|y| y == x))
    }
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if s.len() > best && is_subseq(&s, b) {
            best = s.len();
        }
    }
    best
}

fn count_in(seq: &[u8], gram: &[u8]) -> usize {
    seq.windows(gram.len()).filter(|w| *w == gram).count()
}

fn bleu_direct(c: &[u8], refs: &[&[u8]], max_n: usize, eps: f64) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let orders = max_n.min(c.len());
    for n in 1..=orders {
        let total = c.len() - (n - 1);
        let mut hit = 0;
        let mut done: Vec<&[u8]> = Vec::new();
        for g in c.windows(n) {
            if done.contains(&g) {
                continue;
            }
            done.push(g);
            let max_ref = refs.iter().map(|r| count_in(r, g)).max().unwrap();
            hit += count_in(c, g).min(max_ref);
        }
        let p = if hit == 0 { eps / total as f64 } else { hit as f64 / total as f64 };
        log_sum += p.ln();
    }
    let mut r = refs[0].len();
    for x in refs {
        let (d, bd) = (x.len().abs_diff(c.len()), r.abs_diff(c.len()));
        if d < bd || (d == bd && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c.len() > r { 1.0 } else { (1.0 - r as f64 / c.len() as f64).exp() };
    bp * (log_sum / orders as f64).exp()
}

fn scan_order_check(text: &[TokenId], spec: &KeywordSpec) -> bool {
    let mut next_rank = 1;
    let mut seen = Vec::new();
    for t in text {
        if let Some(j) = spec.keywords.iter().position(|k| k == t) {
            let o = spec.orders[j];
            if o == 0 || seen.contains(t) {
                continue;
            }
            if o != next_rank {
                return false;
            }
            seen.push(*t);
            next_rank += 1;
        }
    }
    next_rank as usize == spec.present() + 1
}

fn text() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..11)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rouge_matches_brute_force_lcs(a in text(), b in prop::collection::vec(0u8..5, 1..11)) {
        let l = lcs_brute(&a, &b);
        let want = if l == 0 { 0.0 } else {
            let (p, r) = (l as f64 / a.len() as f64, l as f64 / b.len() as f64);
            2.0 * p * r / (p + r)
        };
        prop_assert_eq!(rouge_l(&a, &b).unwrap(), want);
    }

    #[test]
    fn bleu_matches_direct_definition(c in text(), refs in prop::collection::vec(prop::collection::vec(0u8..5, 1..11), 1..4), n in 1usize..5) {
        let rs: Vec<&[u8]> = refs.iter().map(|r| r.as_slice()).collect();
        let got = bleu(&c, &rs, n, BLEU_EPSILON).unwrap();
        let want = bleu_direct(&c, &rs, n, BLEU_EPSILON);
        prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn self_bleu_matches_pairwise_bleu(corpus in prop::collection::vec(text(), 2..6), n in 1usize..4) {
        let mut want = 0.0;
        for i in 0..corpus.len() {
            let others: Vec<&[u8]> = corpus.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, t)| t.as_slice()).collect();
            want += bleu_direct(&corpus[i], &others, n, BLEU_EPSILON);
        }
        want /= corpus.len() as f64;
        let got = self_bleu(&corpus, n, BLEU_EPSILON).unwrap();
        prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn dis_matches_set_recount(corpus in prop::collection::vec(text(), 0..8), n in 1usize..4) {
        let set: BTreeSet<Vec<u8>> = corpus.iter().flat_map(|t| t.windows(n).map(|w| w.to_vec())).collect();
        prop_assert_eq!(dis_n(&corpus, n), set.len());
    }

    #[test]
    fn order_accuracy_matches_scan(cases in prop::collection::vec((prop::collection::vec(5u32..11, 0..10), 1usize..5, any::<u64>()), 1..12)) {
        let mut pairs = Vec::new();
        for (text, k, seed) in cases {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut kws: Vec<TokenId> = (5..11).collect();
            kws.shuffle(&mut rng);
            kws.truncate(k);
            let present = rng.gen_range(0..=k);
            let mut orders: Vec<u32> = (0..k as u32).map(|i| if (i as usize) < present { i + 1 } else { 0 }).collect();
            orders.shuffle(&mut rng);
            pairs.push((text, KeywordSpec::new(kws, orders).unwrap()));
        }
        let want = pairs.iter().filter(|(t, s)| scan_order_check(t, s)).count() as f64 / pairs.len() as f64;
        prop_assert_eq!(order_accuracy(&pairs, false).unwrap(), want);
    }
}

#[test]
fn spec_examples_for_report() {
    let v = Vocabulary::new(["a", "b", "c", "d"]);
    let a = v.lookup("a");
    let b = v.lookup("b");
    let gens = vec![vec![a, b], vec![a, b]];
    let specs = vec![KeywordSpec::new(vec![b, a], vec![2, 1]).unwrap(); 2];
    let rep = MetricsReport::compute(&gens, &gens, &specs).unwrap();
    assert_eq!((rep.dis_1, rep.dis_2), (2, 1));
    assert_eq!(rep.self_bleu_3, 1.0);
    assert_eq!(rep.rouge_l, 1.0);
    assert_eq!(rep.order_accuracy, 1.0);
}
