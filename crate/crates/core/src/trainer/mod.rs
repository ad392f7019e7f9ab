//! Training loop: sampled KL feeds the scheduler, whose weight enters the
//! loss of the same step. Also set-point calibration, trace files and
//! resumable checkpoints.

pub mod checkpoint;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::control::{PIConfig, Scheduler, SchedulerKind, SchedulerState};
use crate::data::{Batch, TrainingExample, Vocabulary};
use crate::diff::{clip_global_norm, AdamConfig, AdamState, LrSchedule, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PriorKind};
use crate::objective;
use checkpoint::Container;

/// Final-phase KL below this counts as collapsed during calibration.
pub const COLLAPSE_THRESHOLD: f64 = 0.05;
/// Halvings of the calibration weight before giving up.
pub const MAX_CALIBRATION_RETRIES: usize = 4;
/// Fraction of the trace treated as the final phase.
pub const FINAL_PHASE: f64 = 0.2;

const SHUFFLE_DOMAIN: u64 = 0x5348_5546_464c_4531;
const EPS_DOMAIN: u64 = 0x4550_5331_4c41_5431;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scheduler: SchedulerKind,
    /// EMA decay on the KL fed to the PI controller; `None` feeds it raw.
    pub kl_smoothing: Option<f64>,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr: LrSchedule,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
    pub trace_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, scheduler: SchedulerKind) -> Self {
        TrainConfig {
            model,
            scheduler,
            kl_smoothing: None,
            batch_size: 32,
            total_steps: 4000,
            lr: LrSchedule {
                base: 1e-3,
                decay_factor: 0.9,
                decay_interval: 1000,
            },
            clip_norm: 5.0,
            seed: 0,
            trace_path: None,
            checkpoint_path: None,
            checkpoint_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scheduler.validate()?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.base > 0.0) || !(self.lr.decay_factor > 0.0) || self.lr.decay_interval == 0 {
            return Err(Error::Config(format!("invalid learning-rate schedule {:?}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    /// 1-based step number.
    pub step: u64,
    pub kl: f64,
    pub weight: f64,
    pub recon_nll: f64,
    pub total_loss: f64,
}

pub const TRACE_HEADER: &str = "step,kl,weight,recon_nll,total_loss";

impl TraceRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.kl, self.weight, self.recon_nll, self.total_loss
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<TraceRecord> {
        let mut it = line.split(',');
        let step = it.next()?.parse().ok()?;
        let mut f = || it.next()?.parse::<f64>().ok();
        let r = TraceRecord {
            step,
            kl: f()?,
            weight: f()?,
            recon_nll: f()?,
            total_loss: f()?,
        };
        Some(r)
    }
}

/// Reads a trace CSV written by [`Trainer::run`].
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("expected header {TRACE_HEADER}"),
        });
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            TraceRecord::parse_csv_row(l).ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                msg: "malformed trace row".into(),
            })
        })
        .collect()
}

/// Mean KL over the last fifth of `trace` (at least one row).
pub fn final_phase_mean(trace: &[TraceRecord]) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let n = ((trace.len() as f64 * FINAL_PHASE).ceil() as usize).clamp(1, trace.len());
    let tail = &trace[trace.len() - n..];
    tail.iter().map(|r| r.kl).sum::<f64>() / n as f64
}

/// Model, optimizer and scheduler of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamState,
    pub scheduler: Scheduler,
    /// Completed steps.
    pub step: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamState::new(
            AdamConfig {
                schedule: config.lr.clone(),
                ..AdamConfig::default()
            },
            &model.params,
        );
        let mut scheduler = Scheduler::new(config.scheduler)?;
        if let Some(decay) = config.kl_smoothing {
            scheduler = scheduler.with_smoothing(decay)?;
        }
        Ok(Trainer {
            config,
            model,
            optimizer,
            scheduler,
            step: 0,
            order: None,
        })
    }

    fn epoch_order(&mut self, n: usize, epoch: u64) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SHUFFLE_DOMAIN);
            rng.set_stream(epoch);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("order set above").1
    }

    /// Mini-batch used at 0-based step `step`: epochs are reshuffled with a
    /// stream derived from the seed and the epoch number.
    pub fn batch_for_step(&mut self, corpus: &[TrainingExample], step: u64) -> Result<Batch> {
        if corpus.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        let n = corpus.len();
        let bs = self.config.batch_size.min(n);
        let per_epoch = n.div_ceil(bs) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let max_len = self.config.model.max_len;
        let order = self.epoch_order(n, epoch);
        let picks: Vec<&TrainingExample> = order[k * bs..((k + 1) * bs).min(n)].iter().map(|&i| &corpus[i]).collect();
        Batch::new(&picks, max_len)
    }

    /// Reparameterization noise for 0-based step `step`.
    pub fn noise_for_step(&self, step: u64, batch: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ EPS_DOMAIN);
        rng.set_stream(step);
        let latent = self.config.model.latent_dim;
        let data = (0..batch * latent).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_parts(vec![batch, latent], data)
    }

    /// Forward, scheduler update, backward and one Adam step.
    pub fn train_step(&mut self, batch: &Batch) -> Result<TraceRecord> {
        let t = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step: t + 1 },
            other => other,
        };
        let eps = self.noise_for_step(t, batch.size);
        let mut tape = Tape::new();
        let lv = self.model.loss_terms_on(&mut tape, batch, eps).map_err(diverged)?;
        let kl = tape.value(lv.kl).item()?.max(0.0);
        let recon = tape.value(lv.recon).item()?;
        let w = self.scheduler.weight(t, kl)?;
        let loss = objective::weighted_loss_on(&mut tape, lv.recon, lv.kl, w)?;
        let total = tape.value(loss).item()?;
        if !total.is_finite() {
            return Err(Error::Diverged { step: t + 1 });
        }
        let mut grads = tape.backward(loss).map_err(diverged)?.for_params(&tape, &self.model.params);
        let norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Diverged { step: t + 1 });
        }
        self.optimizer.update(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(TraceRecord {
            step: t + 1,
            kl,
            weight: w,
            recon_nll: recon,
            total_loss: total,
        })
    }

    /// Trains until `config.total_steps`, appending to the trace file and
    /// writing checkpoints as configured. Returns the rows produced by this
    /// call.
    pub fn run(&mut self, corpus: &[TrainingExample], vocab: &Vocabulary) -> Result<Vec<TraceRecord>> {
        if corpus.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        let mut writer = match &self.config.trace_path {
            Some(p) => Some(TraceWriter::open(p, self.step == 0)?),
            None => None,
        };
        let mut rows = Vec::with_capacity(self.config.total_steps.saturating_sub(self.step) as usize);
        while self.step < self.config.total_steps {
            let batch = self.batch_for_step(corpus, self.step)?;
            let rec = self.train_step(&batch)?;
            if let Some(w) = writer.as_mut() {
                w.push(&rec)?;
            }
            rows.push(rec);
            let every = self.config.checkpoint_interval;
            if let Some(p) = &self.config.checkpoint_path {
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.total_steps {
                    self.save_checkpoint(p, vocab)?;
                }
            }
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        if let Some(p) = &self.config.checkpoint_path {
            self.save_checkpoint(p, vocab)?;
        }
        Ok(rows)
    }

    pub fn to_container(&self, vocab: &Vocabulary) -> Container {
        let mut meta = vec![("kind".to_string(), "trainer".to_string())];
        meta.extend(model_config_pairs(&self.config.model));
        meta.extend(train_config_pairs(&self.config));
        let s = &self.scheduler.state;
        let mut put = |k: &str, v: String| meta.push((k.to_string(), v));
        put("state.step", self.step.to_string());
        put("state.adam_step", self.optimizer.step.to_string());
        put("state.pi_integral", s.pi.integral.to_string());
        put("state.pi_last_raw_w", s.pi.last_raw_w.to_string());
        put("state.pi_step", s.pi.step.to_string());
        put("state.smoothed_kl", s.smoothed_kl.map_or("none".to_string(), |v| v.to_string()));
        put("state.held_w", s.held_w.to_string());
        put("state.calls", s.calls.to_string());
        put("vocab", vocab.tokens().join(" "));
        let mut tensors = Vec::with_capacity(3 * self.model.params.len());
        for (i, (_, name, t)) in self.model.params.iter().enumerate() {
            tensors.push((format!("param/{name}"), t.clone()));
            tensors.push((format!("adam_m/{name}"), self.optimizer.m[i].clone()));
            tensors.push((format!("adam_v/{name}"), self.optimizer.v[i].clone()));
        }
        Container { meta, tensors }
    }

    pub fn save_checkpoint(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        self.to_container(vocab).save(path)
    }

    /// Restores a trainer and its vocabulary; training continues exactly
    /// where the saved run stopped.
    pub fn load_checkpoint(path: &Path) -> Result<(Trainer, Vocabulary)> {
        let c = Container::load(path)?;
        let err = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        Trainer::from_container(&c).map_err(|e| err(e.to_string()))
    }

    pub fn from_container(c: &Container) -> Result<(Trainer, Vocabulary)> {
        let m = Meta(c);
        if m.get("kind")? != "trainer" {
            return Err(Error::Config("container does not hold a trainer".into()));
        }
        let model_cfg = model_config_from(&m)?;
        let mut config = train_config_from(&m, model_cfg)?;
        config.trace_path = None;
        config.checkpoint_path = None;
        let vocab = vocab_from(&m)?;
        let mut t = Trainer::new(config)?;
        restore_params(&mut t.model, c, "param/")?;
        let ids: Vec<_> = t.model.params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = t.model.params.name(id).to_string();
            t.optimizer.m[i] = fetch(c, &format!("adam_m/{name}"), t.optimizer.m[i].shape())?;
            t.optimizer.v[i] = fetch(c, &format!("adam_v/{name}"), t.optimizer.v[i].shape())?;
        }
        t.step = m.parse("state.step")?;
        t.optimizer.step = m.parse("state.adam_step")?;
        let s: &mut SchedulerState = &mut t.scheduler.state;
        s.pi.integral = m.parse("state.pi_integral")?;
        s.pi.last_raw_w = m.parse("state.pi_last_raw_w")?;
        s.pi.step = m.parse("state.pi_step")?;
        s.smoothed_kl = match m.get("state.smoothed_kl")? {
            "none" => None,
            v => Some(parse_value("state.smoothed_kl", v)?),
        };
        s.held_w = m.parse("state.held_w")?;
        s.calls = m.parse("state.calls")?;
        Ok((t, vocab))
    }
}

/// Saves only what generation needs: configuration, vocabulary and weights.
pub fn save_model(path: &Path, model: &Model, vocab: &Vocabulary) -> Result<()> {
    let mut meta = vec![("kind".to_string(), "model".to_string())];
    meta.extend(model_config_pairs(&model.config));
    meta.push(("vocab".into(), vocab.tokens().join(" ")));
    let tensors = model.params.iter().map(|(_, n, t)| (format!("param/{n}"), t.clone())).collect();
    Container { meta, tensors }.save(path)
}

/// Loads a model from either a model or a full trainer checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, Vocabulary)> {
    let c = Container::load(path)?;
    let inner = || -> Result<(Model, Vocabulary)> {
        let m = Meta(&c);
        let cfg = model_config_from(&m)?;
        let vocab = vocab_from(&m)?;
        let mut model = Model::new(cfg, 0)?;
        restore_params(&mut model, &c, "param/")?;
        Ok((model, vocab))
    };
    inner().map_err(|e| match e {
        e @ Error::Checkpoint { .. } => e,
        e => Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        },
    })
}

fn restore_params(model: &mut Model, c: &Container, prefix: &str) -> Result<()> {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let t = fetch(c, &format!("{prefix}{name}"), model.params.get(id).shape())?;
        model.params.set(id, t)?;
    }
    let expected = model.params.len();
    let present = c.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).count();
    if present != expected {
        return Err(Error::Config(format!("{present} stored parameters, model has {expected}")));
    }
    Ok(())
}

fn fetch(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = c
        .tensor(name)
        .ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::Shape(format!("{name}: stored {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t.clone())
}

struct Meta<'a>(&'a Container);

impl Meta<'_> {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .meta(key)
            .ok_or_else(|| Error::Config(format!("missing metadata key {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        parse_value(key, self.get(key)?)
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn vocab_from(m: &Meta) -> Result<Vocabulary> {
    let tokens: Vec<&str> = m.get("vocab")?.split(' ').collect();
    let v = Vocabulary::new(tokens.iter().copied().skip(crate::data::EOS as usize + 1));
    if v.tokens() != tokens.as_slice() {
        return Err(Error::Config("stored vocabulary has unexpected special tokens".into()));
    }
    Ok(v)
}

fn model_config_pairs(c: &ModelConfig) -> Vec<(String, String)> {
    let fc: Vec<String> = c.fc_hidden.iter().map(|h| h.to_string()).collect();
    [
        ("model.vocab_size", c.vocab_size.to_string()),
        ("model.embed_dim", c.embed_dim.to_string()),
        ("model.d_model", c.d_model.to_string()),
        ("model.ffn_dim", c.ffn_dim.to_string()),
        ("model.encoder_layers", c.encoder_layers.to_string()),
        ("model.decoder_layers", c.decoder_layers.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.latent_dim", c.latent_dim.to_string()),
        ("model.fc_hidden", fc.join(",")),
        ("model.max_len", c.max_len.to_string()),
        ("model.max_keywords", c.max_keywords.to_string()),
        ("model.prior", c.prior.as_str().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn model_config_from(m: &Meta) -> Result<ModelConfig> {
    let fc = m.get("model.fc_hidden")?;
    let fc_hidden = if fc.is_empty() {
        Vec::new()
    } else {
        fc.split(',').map(|s| parse_value("model.fc_hidden", s)).collect::<Result<_>>()?
    };
    let prior = m.get("model.prior")?;
    Ok(ModelConfig {
        vocab_size: m.parse("model.vocab_size")?,
        embed_dim: m.parse("model.embed_dim")?,
        d_model: m.parse("model.d_model")?,
        ffn_dim: m.parse("model.ffn_dim")?,
        encoder_layers: m.parse("model.encoder_layers")?,
        decoder_layers: m.parse("model.decoder_layers")?,
        heads: m.parse("model.heads")?,
        latent_dim: m.parse("model.latent_dim")?,
        fc_hidden,
        max_len: m.parse("model.max_len")?,
        max_keywords: m.parse("model.max_keywords")?,
        prior: PriorKind::parse(prior).ok_or_else(|| Error::Config(format!("unknown prior {prior}")))?,
    })
}

fn train_config_pairs(c: &TrainConfig) -> Vec<(String, String)> {
    let mut v: Vec<(&str, String)> = vec![
        ("train.batch_size", c.batch_size.to_string()),
        ("train.total_steps", c.total_steps.to_string()),
        ("train.lr", c.lr.base.to_string()),
        ("train.lr_decay", c.lr.decay_factor.to_string()),
        ("train.lr_decay_interval", c.lr.decay_interval.to_string()),
        ("train.clip_norm", c.clip_norm.to_string()),
        ("train.seed", c.seed.to_string()),
        ("train.checkpoint_interval", c.checkpoint_interval.to_string()),
        ("train.kl_smoothing", c.kl_smoothing.map_or("none".into(), |d| d.to_string())),
        ("scheduler.kind", c.scheduler.name().to_string()),
    ];
    match c.scheduler {
        SchedulerKind::Pi(p) => {
            v.push(("scheduler.setpoint", p.setpoint.to_string()));
            v.push(("scheduler.kp", p.kp.to_string()));
            v.push(("scheduler.ki", p.ki.to_string()));
            v.push(("scheduler.sample_period", p.sample_period.to_string()));
            v.push(("scheduler.anti_windup", p.anti_windup.to_string()));
        }
        SchedulerKind::CostAnneal { midpoint, slope } => {
            v.push(("scheduler.midpoint", midpoint.to_string()));
            v.push(("scheduler.slope", slope.to_string()));
        }
        SchedulerKind::Cyclical { total, cycles, ratio } => {
            v.push(("scheduler.total", total.to_string()));
            v.push(("scheduler.cycles", cycles.to_string()));
            v.push(("scheduler.ratio", ratio.to_string()));
        }
        SchedulerKind::Constant(w) => v.push(("scheduler.weight", w.to_string())),
    }
    v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn train_config_from(m: &Meta, model: ModelConfig) -> Result<TrainConfig> {
    let scheduler = match m.get("scheduler.kind")? {
        "pi" => SchedulerKind::Pi(PIConfig {
            setpoint: m.parse("scheduler.setpoint")?,
            kp: m.parse("scheduler.kp")?,
            ki: m.parse("scheduler.ki")?,
            sample_period: m.parse("scheduler.sample_period")?,
            anti_windup: m.parse("scheduler.anti_windup")?,
        }),
        "cost" => SchedulerKind::CostAnneal {
            midpoint: m.parse("scheduler.midpoint")?,
            slope: m.parse("scheduler.slope")?,
        },
        "cyclical" => SchedulerKind::Cyclical {
            total: m.parse("scheduler.total")?,
            cycles: m.parse("scheduler.cycles")?,
            ratio: m.parse("scheduler.ratio")?,
        },
        "constant" => SchedulerKind::Constant(m.parse("scheduler.weight")?),
        other => return Err(Error::Config(format!("unknown scheduler {other}"))),
    };
    let kl_smoothing = match m.get("train.kl_smoothing")? {
        "none" => None,
        v => Some(parse_value("train.kl_smoothing", v)?),
    };
    Ok(TrainConfig {
        model,
        scheduler,
        kl_smoothing,
        batch_size: m.parse("train.batch_size")?,
        total_steps: m.parse("train.total_steps")?,
        lr: LrSchedule {
            base: m.parse("train.lr")?,
            decay_factor: m.parse("train.lr_decay")?,
            decay_interval: m.parse("train.lr_decay_interval")?,
        },
        clip_norm: m.parse("train.clip_norm")?,
        seed: m.parse("train.seed")?,
        trace_path: None,
        checkpoint_path: None,
        checkpoint_interval: m.parse("train.checkpoint_interval")?,
    })
}

/// Append-only CSV trace.
pub struct TraceWriter {
    out: BufWriter<File>,
}

impl TraceWriter {
    /// `fresh` truncates and writes the header; otherwise rows are appended.
    pub fn open(path: &Path, fresh: bool) -> Result<Self> {
        let file = if fresh {
            File::create(path)?
        } else {
            OpenOptions::new().append(true).create(true).open(path)?
        };
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{TRACE_HEADER}")?;
        }
        Ok(TraceWriter { out })
    }

    pub fn push(&mut self, r: &TraceRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Trains a fresh model for `config.total_steps`.
pub fn train(config: &TrainConfig, corpus: &[TrainingExample], vocab: &Vocabulary) -> Result<(Model, Vec<TraceRecord>)> {
    let mut t = Trainer::new(config.clone())?;
    let trace = t.run(corpus, vocab)?;
    Ok((t.model, trace))
}

/// Outcome of set-point calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// Final-phase mean KL of the accepted run.
    pub v0: f64,
    /// Constant weight of the accepted run.
    pub weight: f64,
    pub attempts: usize,
    pub trace: Vec<TraceRecord>,
}

/// Trains with a constant weight of 0.5, halving it while the final-phase
/// KL stays below [`COLLAPSE_THRESHOLD`].
pub fn calibrate_setpoint(config: &TrainConfig, corpus: &[TrainingExample], vocab: &Vocabulary) -> Result<Calibration> {
    calibrate_with(config, |cfg| train(cfg, corpus, vocab).map(|(_, t)| t))
}

pub fn calibrate_with(
    config: &TrainConfig,
    mut run: impl FnMut(&TrainConfig) -> Result<Vec<TraceRecord>>,
) -> Result<Calibration> {
    let mut w = 0.5;
    let mut seen = Vec::new();
    for attempt in 1..=MAX_CALIBRATION_RETRIES + 1 {
        let mut cfg = config.clone();
        cfg.scheduler = SchedulerKind::Constant(w);
        cfg.kl_smoothing = None;
        let trace = run(&cfg)?;
        let v0 = final_phase_mean(&trace);
        if v0 >= COLLAPSE_THRESHOLD {
            return Ok(Calibration {
                v0,
                weight: w,
                attempts: attempt,
                trace,
            });
        }
        seen.push(format!("w={w}: {v0}"));
        w /= 2.0;
    }
    Err(Error::Calibration(format!(
        "KL collapsed below {COLLAPSE_THRESHOLD} nats at every weight ({})",
        seen.join(", ")
    )))
}

#[cfg(test)]
mod tests;
