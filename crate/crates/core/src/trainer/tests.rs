use super::*;
use crate::data::{generate_corpus, CorpusConfig, SyntheticGrammar};

fn setup(steps: u64, scheduler: SchedulerKind) -> (TrainConfig, Vec<TrainingExample>, Vocabulary) {
    let g = SyntheticGrammar::default();
    let vocab = g.vocabulary();
    let corpus = generate_corpus(
        &g,
        &vocab,
        &CorpusConfig {
            count: 40,
            seed: 1,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    let mut model = ModelConfig::tiny(vocab.len());
    model.max_len = 32;
    model.max_keywords = 8;
    let mut cfg = TrainConfig::new(model, scheduler);
    cfg.batch_size = 8;
    cfg.total_steps = steps;
    cfg.seed = 11;
    (cfg, corpus, vocab)
}

fn pi() -> SchedulerKind {
    SchedulerKind::Pi(PIConfig::with_setpoint(1.0).unwrap())
}

#[test]
fn step_contract_holds() {
    let (cfg, corpus, vocab) = setup(12, pi());
    let (_, trace) = train(&cfg, &corpus, &vocab).unwrap();
    assert_eq!(trace.len(), 12);
    for (i, r) in trace.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert!(r.kl >= 0.0 && (0.0..=1.0).contains(&r.weight));
        assert!(r.recon_nll.is_finite() && r.total_loss.is_finite());
        assert!((r.total_loss - (r.recon_nll + r.weight * r.kl)).abs() < 1e-9 * r.total_loss.abs().max(1.0));
    }
}

#[test]
fn single_step_and_zero_steps() {
    let (mut cfg, corpus, vocab) = setup(1, pi());
    assert_eq!(train(&cfg, &corpus, &vocab).unwrap().1.len(), 1);
    cfg.total_steps = 0;
    assert!(train(&cfg, &corpus, &vocab).is_err());
    cfg.total_steps = 1;
    assert!(train(&cfg, &[], &vocab).is_err());
    cfg.batch_size = 0;
    assert!(Trainer::new(cfg).is_err());
}

#[test]
fn weight_uses_only_past_and_present_kl() {
    let (cfg, corpus, vocab) = setup(15, pi());
    let (_, trace) = train(&cfg, &corpus, &vocab).unwrap();
    let SchedulerKind::Pi(p) = cfg.scheduler else { unreachable!() };
    let mut s = Scheduler::new(SchedulerKind::Pi(p)).unwrap();
    for (t, r) in trace.iter().enumerate() {
        assert_eq!(s.weight(t as u64, r.kl).unwrap(), r.weight);
    }
}

#[test]
fn identical_runs_give_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, corpus, vocab) = setup(10, pi());
    cfg.trace_path = Some(dir.path().join("a.csv"));
    let (ma, ta) = train(&cfg, &corpus, &vocab).unwrap();
    cfg.trace_path = Some(dir.path().join("b.csv"));
    let (mb, tb) = train(&cfg, &corpus, &vocab).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ma, mb);
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(read_trace(&dir.path().join("a.csv")).unwrap(), ta);
    assert!(String::from_utf8(a).unwrap().starts_with("step,kl,weight,recon_nll,total_loss\n1,"));
    cfg.seed = 12;
    assert_ne!(train(&cfg, &corpus, &vocab).unwrap().1, ta);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, corpus, vocab) = setup(14, pi());
    let (_, full) = train(&cfg, &corpus, &vocab).unwrap();

    cfg.total_steps = 7;
    let ckpt = dir.path().join("half.ckpt");
    cfg.checkpoint_path = Some(ckpt.clone());
    let (_, first) = train(&cfg, &corpus, &vocab).unwrap();
    let (mut resumed, v2) = Trainer::load_checkpoint(&ckpt).unwrap();
    assert_eq!(v2, vocab);
    assert_eq!(resumed.step, 7);
    resumed.config.total_steps = 14;
    let rest = resumed.run(&corpus, &vocab).unwrap();
    let joined: Vec<TraceRecord> = first.into_iter().chain(rest).collect();
    assert_eq!(joined, full);

    let again = dir.path().join("again.ckpt");
    let (t, _) = Trainer::load_checkpoint(&ckpt).unwrap();
    t.save_checkpoint(&again, &vocab).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
    assert!(Trainer::load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn interval_checkpoints_and_trace_append() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, corpus, vocab) = setup(6, SchedulerKind::cyclical(6, 2));
    let ckpt = dir.path().join("run.ckpt");
    let trace = dir.path().join("trace.csv");
    cfg.checkpoint_path = Some(ckpt.clone());
    cfg.checkpoint_interval = 4;
    cfg.trace_path = Some(trace.clone());
    cfg.total_steps = 4;
    train(&cfg, &corpus, &vocab).unwrap();
    let (mut t, _) = Trainer::load_checkpoint(&ckpt).unwrap();
    t.config.total_steps = 6;
    t.config.trace_path = Some(trace.clone());
    t.run(&corpus, &vocab).unwrap();

    cfg.total_steps = 6;
    cfg.checkpoint_path = None;
    let other = dir.path().join("straight.csv");
    cfg.trace_path = Some(other.clone());
    train(&cfg, &corpus, &vocab).unwrap();
    assert_eq!(std::fs::read(&trace).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn model_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, corpus, vocab) = setup(2, SchedulerKind::Constant(0.3));
    let (model, _) = train(&cfg, &corpus, &vocab).unwrap();
    let p = dir.path().join("m.ckpt");
    save_model(&p, &model, &vocab).unwrap();
    let (back, v) = load_model(&p).unwrap();
    assert_eq!(back, model);
    assert_eq!(v, vocab);
    let mut bytes = std::fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x10;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(load_model(&p), Err(Error::Checkpoint { .. })));
}

#[test]
fn divergence_names_the_step() {
    let (cfg, corpus, _) = setup(3, pi());
    let mut t = Trainer::new(cfg).unwrap();
    let batch = t.batch_for_step(&corpus, 0).unwrap();
    t.train_step(&batch).unwrap();
    let id = t.model.params.id("dec.out.w").unwrap();
    t.model.params.get_mut(id).data_mut()[0] = 1e308;
    t.model.params.get_mut(id).data_mut()[1] = -1e308;
    match t.train_step(&batch) {
        Err(Error::Diverged { step }) => assert_eq!(step, 2),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn epochs_cover_the_corpus() {
    let (cfg, corpus, _) = setup(1, pi());
    let mut t = Trainer::new(cfg).unwrap();
    let mut seen = Vec::new();
    for step in 0..5 {
        seen.extend(t.batch_for_step(&corpus, step).unwrap().sequences());
    }
    let mut want: Vec<_> = corpus.iter().map(|e| e.reference.clone()).collect();
    seen.sort();
    want.sort();
    assert_eq!(seen, want);
    let e0 = t.batch_for_step(&corpus, 0).unwrap();
    let e1 = t.batch_for_step(&corpus, 5).unwrap();
    assert_ne!(e0, e1);
}

fn fake_trace(kl: f64) -> Vec<TraceRecord> {
    (1..=10)
        .map(|s| TraceRecord {
            step: s,
            kl: if s > 8 { kl } else { 9.0 },
            weight: 0.5,
            recon_nll: 1.0,
            total_loss: 1.0,
        })
        .collect()
}

#[test]
fn calibration_halves_weight_on_collapse() {
    let (cfg, _, _) = setup(10, pi());
    let mut weights = Vec::new();
    let cal = calibrate_with(&cfg, |c| {
        let SchedulerKind::Constant(w) = c.scheduler else { unreachable!() };
        weights.push(w);
        Ok(fake_trace(if w > 0.2 { 0.01 } else { 0.7 }))
    })
    .unwrap();
    assert_eq!(weights, vec![0.5, 0.25, 0.125]);
    assert_eq!((cal.weight, cal.attempts), (0.125, 3));
    assert_eq!(cal.v0, 0.7);
    assert_eq!(cal.v0, final_phase_mean(&cal.trace));

    let mut calls = 0;
    let err = calibrate_with(&cfg, |_| {
        calls += 1;
        Ok(fake_trace(0.0))
    });
    assert!(matches!(err, Err(Error::Calibration(_))));
    assert_eq!(calls, 1 + MAX_CALIBRATION_RETRIES);
}

#[test]
fn final_phase_is_last_fifth() {
    let t = fake_trace(2.0);
    assert_eq!(final_phase_mean(&t), 2.0);
    assert_eq!(final_phase_mean(&t[..1]), 9.0);
    assert_eq!(final_phase_mean(&[]), 0.0);
}
