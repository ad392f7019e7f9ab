use proptest::prelude::*;

use super::*;

fn corpus(count: usize, seed: u64) -> (Vocabulary, Vec<TrainingExample>) {
    let g = SyntheticGrammar::default();
    let v = g.vocabulary();
    let cfg = CorpusConfig {
        count,
        seed,
        ..CorpusConfig::default()
    };
    let ex = generate_corpus(&g, &v, &cfg).unwrap();
    (v, ex)
}

#[test]
fn order_labels_follow_first_occurrence() {
    let v = Vocabulary::new(["the", "red", "soft", "shirt", "nice"]);
    let ids = |s: &str| v.encode(s);
    let labels = derive_order_labels(&ids("red nice soft"), &ids("the red soft shirt")).unwrap();
    assert_eq!(labels, vec![1, 0, 2]);
    assert_eq!(derive_order_labels(&ids("nice"), &ids("the red shirt")).unwrap(), vec![0]);
    assert_eq!(
        derive_order_labels(&ids("the red soft shirt"), &ids("the red soft shirt")).unwrap(),
        vec![1, 2, 3, 4]
    );
    assert!(derive_order_labels(&ids("red red"), &ids("red")).is_err());
}

#[test]
fn repeated_keyword_ranks_by_first_occurrence() {
    let v = Vocabulary::new(["a", "b", "c"]);
    let labels = derive_order_labels(&v.encode("b a"), &v.encode("a b a c")).unwrap();
    assert_eq!(labels, vec![2, 1]);
}

#[test]
fn corpus_is_deterministic() {
    assert_eq!(corpus(100, 7), corpus(100, 7));
    assert_ne!(corpus(100, 7).1, corpus(100, 8).1);
    assert_eq!(corpus(1, 7).1.len(), 1);
}

#[test]
fn generated_examples_satisfy_order_invariant() {
    let (_, ex) = corpus(500, 11);
    let mut with_distractor = 0;
    for e in &ex {
        assert_eq!(derive_order_labels(&e.spec.keywords, &e.reference).unwrap(), e.spec.orders);
        e.spec.validate().unwrap();
        let present = e.spec.present();
        assert!((2..=4).contains(&present));
        if e.spec.len() > present {
            with_distractor += 1;
        }
        for (&k, &o) in e.spec.keywords.iter().zip(&e.spec.orders) {
            assert_eq!(o > 0, e.reference.contains(&k));
        }
    }
    let frac = with_distractor as f64 / ex.len() as f64;
    assert!((0.4..0.6).contains(&frac), "distractor fraction {frac}");
}

#[test]
fn corpus_statistics_match_desk_targets() {
    let (v, ex) = corpus(2000, 7);
    let mean_kw = ex.iter().map(|e| e.spec.len()).sum::<usize>() as f64 / ex.len() as f64;
    let mean_len = ex.iter().map(|e| e.reference.len()).sum::<usize>() as f64 / ex.len() as f64;
    assert!((3.3..4.5).contains(&mean_kw), "mean keywords {mean_kw}");
    assert!((11.0..19.0).contains(&mean_len), "mean length {mean_len}");
    assert!(ex.iter().all(|e| !e.reference.contains(&UNK)));
    assert!(v.len() < 220);
}

#[test]
fn batch_padding_contract() {
    let v = Vocabulary::new(["a", "b", "c", "d", "e"]);
    let mk = |s: &str| TrainingExample {
        reference: v.encode(s),
        spec: KeywordSpec::new(vec![v.lookup("a")], vec![1]).unwrap(),
    };
    let exs = vec![mk("a b c"), mk("a b c d e")];
    let b = Batch::new(&exs.iter().collect::<Vec<_>>(), 32).unwrap();
    assert_eq!(b.seq_len, 5);
    assert_eq!(b.token_mask[..5].iter().filter(|&&m| m).count(), 3);
    assert_eq!(b.token_mask[5..].iter().filter(|&&m| m).count(), 5);
    assert_eq!(&b.tokens[3..5], &[PAD, PAD]);

    let single = Batch::new(&[&exs[0]], 32).unwrap();
    assert!(single.token_mask.iter().all(|&m| m));
    assert_eq!(single.size, 1);

    assert!(Batch::new(&[&exs[1]], 4).is_err());
    assert!(batchify(&exs, 0, 32).is_err());
}

#[test]
fn split_sizes_and_partition() {
    let items: Vec<usize> = (0..1000).collect();
    let (tr, va, te) = split_corpus(&items, [0.8, 0.1, 0.1]).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
    let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
    all.sort_unstable();
    assert_eq!(all, items);
    let (tr, va, te) = split_corpus(&items, [1.0, 0.0, 0.0]).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (1000, 0, 0));
    assert!(split_corpus(&items, [0.5, 0.1, 0.1]).is_err());
    assert!(split_corpus(&items, [1.2, -0.1, -0.1]).is_err());
}

#[test]
fn corpus_file_round_trip() {
    let (mut v, ex) = corpus(50, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tsv");
    write_corpus(&path, &ex, &v).unwrap();
    let before = v.len();
    let back = read_corpus(&path, &mut v).unwrap();
    assert_eq!(back, ex);
    assert_eq!(v.len(), before);
}

#[test]
fn malformed_corpus_line_reports_line_number() {
    let mut v = SyntheticGrammar::default().vocabulary();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tsv");
    std::fs::write(&path, "this shirt\tshirt:1\nno tab here\n").unwrap();
    match read_corpus(&path, &mut v) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn spec_parsing_rejects_bad_orders() {
    let v = SyntheticGrammar::default().vocabulary();
    assert!(parse_spec("red:1 silk:2 shirt:0", &v).is_ok());
    assert!(parse_spec("red:1 silk:3", &v).is_err());
    assert!(parse_spec("red", &v).is_err());
    assert!(parse_spec("red:x", &v).is_err());
    assert!(parse_spec("", &v).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batching_strips_back_to_originals(seed in 0u64..500, bs in 1usize..9) {
        let (_, ex) = corpus(20, seed);
        for (chunk, b) in ex.chunks(bs).zip(batchify(&ex, bs, 32).unwrap()) {
            let refs: Vec<Vec<TokenId>> = chunk.iter().map(|e| e.reference.clone()).collect();
            prop_assert_eq!(b.sequences(), refs);
            let specs: Vec<KeywordSpec> = chunk.iter().map(|e| e.spec.clone()).collect();
            prop_assert_eq!(b.specs(), specs);
        }
    }

    #[test]
    fn nonzero_labels_are_a_permutation(seed in 0u64..500) {
        let (_, ex) = corpus(10, seed);
        for e in ex {
            let mut r: Vec<u32> = e.spec.orders.iter().copied().filter(|&o| o > 0).collect();
            r.sort_unstable();
            prop_assert_eq!(r, (1..=e.spec.present() as u32).collect::<Vec<_>>());
        }
    }
}
