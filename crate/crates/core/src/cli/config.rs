use std::path::Path;

use crate::control::{PIConfig, SchedulerKind};
use crate::data::CorpusConfig;
use crate::diff::LrSchedule;
use crate::error::{Error, Result};
use crate::gen_metrics::{DecodeMode, DEFAULT_MAX_LEN};
use crate::model::{ModelConfig, PriorKind};
use crate::trainer::TrainConfig;

/// Flat `key = value` run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    /// `vocab_size` is filled in from the corpus at train time.
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: LrSchedule,
    pub clip_norm: f64,
    pub checkpoint_interval: u64,
    /// EMA decay on the KL seen by the controller; 0 disables smoothing.
    pub kl_smoothing: f64,
    pub scheduler: String,
    pub pi: PIConfig,
    /// Cost annealing midpoint `t0` and slope; a slope of 0 means `t0 / 10`.
    pub midpoint: f64,
    pub slope: f64,
    pub cycles: u64,
    pub ratio: f64,
    pub weight: f64,
    pub decode: String,
    pub temperature: f64,
    pub gen_max_len: usize,
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "corpus.count",
    "corpus.seed",
    "corpus.min_present",
    "corpus.max_present",
    "corpus.distractor_prob",
    "corpus.max_distractors",
    "corpus.min_slots",
    "corpus.max_slots",
    "model.d_model",
    "model.ffn_dim",
    "model.encoder_layers",
    "model.decoder_layers",
    "model.heads",
    "model.latent_dim",
    "model.fc_hidden",
    "model.max_len",
    "model.max_keywords",
    "model.prior",
    "train.batch_size",
    "train.steps",
    "train.lr",
    "train.lr_decay",
    "train.lr_decay_steps",
    "train.clip_norm",
    "train.checkpoint_interval",
    "train.kl_smoothing",
    "scheduler.kind",
    "scheduler.setpoint",
    "scheduler.kp",
    "scheduler.ki",
    "scheduler.sample_period",
    "scheduler.anti_windup",
    "scheduler.midpoint",
    "scheduler.slope",
    "scheduler.cycles",
    "scheduler.ratio",
    "scheduler.weight",
    "generate.mode",
    "generate.temperature",
    "generate.max_len",
];

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::new(ModelConfig::desk(0), SchedulerKind::Constant(0.0));
        RunConfig {
            corpus: CorpusConfig::default(),
            model: ModelConfig::desk(0),
            batch_size: train.batch_size,
            steps: train.total_steps,
            lr: train.lr,
            clip_norm: train.clip_norm,
            checkpoint_interval: 0,
            kl_smoothing: 0.0,
            scheduler: "pi".into(),
            pi: PIConfig::desk(1.0).expect("valid default set point"),
            midpoint: 2000.0,
            slope: 0.0,
            cycles: 5,
            ratio: 0.5,
            weight: 0.5,
            decode: "greedy".into(),
            temperature: 1.0,
            gen_max_len: DEFAULT_MAX_LEN,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let c = &mut self.corpus;
        let m = &mut self.model;
        match key.trim() {
            "corpus.count" => c.count = parse(key, v)?,
            "corpus.seed" => c.seed = parse(key, v)?,
            "corpus.min_present" => c.min_present = parse(key, v)?,
            "corpus.max_present" => c.max_present = parse(key, v)?,
            "corpus.distractor_prob" => c.distractor_prob = parse(key, v)?,
            "corpus.max_distractors" => c.max_distractors = parse(key, v)?,
            "corpus.min_slots" => c.min_slots = parse(key, v)?,
            "corpus.max_slots" => c.max_slots = parse(key, v)?,
            "model.d_model" => {
                m.d_model = parse(key, v)?;
                m.embed_dim = m.d_model;
            }
            "model.ffn_dim" => m.ffn_dim = parse(key, v)?,
            "model.encoder_layers" => m.encoder_layers = parse(key, v)?,
            "model.decoder_layers" => m.decoder_layers = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.latent_dim" => m.latent_dim = parse(key, v)?,
            "model.fc_hidden" => {
                m.fc_hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?
                }
            }
            "model.max_len" => m.max_len = parse(key, v)?,
            "model.max_keywords" => m.max_keywords = parse(key, v)?,
            "model.prior" => {
                m.prior = PriorKind::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: expected conditional or standard, got {v:?}")))?
            }
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.lr" => self.lr.base = parse(key, v)?,
            "train.lr_decay" => self.lr.decay_factor = parse(key, v)?,
            "train.lr_decay_steps" => self.lr.decay_interval = parse(key, v)?,
            "train.clip_norm" => self.clip_norm = parse(key, v)?,
            "train.checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "train.kl_smoothing" => self.kl_smoothing = parse(key, v)?,
            "scheduler.kind" => match v {
                "pi" | "cost" | "cyclical" | "constant" => self.scheduler = v.to_string(),
                _ => return Err(Error::Config(format!("{key}: expected pi, cost, cyclical or constant, got {v:?}"))),
            },
            "scheduler.setpoint" => self.pi.setpoint = parse(key, v)?,
            "scheduler.kp" => self.pi.kp = parse(key, v)?,
            "scheduler.ki" => self.pi.ki = parse(key, v)?,
            "scheduler.sample_period" => self.pi.sample_period = parse(key, v)?,
            "scheduler.anti_windup" => self.pi.anti_windup = parse_bool(key, v)?,
            "scheduler.midpoint" => self.midpoint = parse(key, v)?,
            "scheduler.slope" => self.slope = parse(key, v)?,
            "scheduler.cycles" => self.cycles = parse(key, v)?,
            "scheduler.ratio" => self.ratio = parse(key, v)?,
            "scheduler.weight" => self.weight = parse(key, v)?,
            "generate.mode" => match v {
                "greedy" | "temperature" => self.decode = v.to_string(),
                _ => return Err(Error::Config(format!("{key}: expected greedy or temperature, got {v:?}"))),
            },
            "generate.temperature" => self.temperature = parse(key, v)?,
            "generate.max_len" => self.gen_max_len = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let c = &self.corpus;
        let m = &self.model;
        let s = match key {
            "corpus.count" => c.count.to_string(),
            "corpus.seed" => c.seed.to_string(),
            "corpus.min_present" => c.min_present.to_string(),
            "corpus.max_present" => c.max_present.to_string(),
            "corpus.distractor_prob" => c.distractor_prob.to_string(),
            "corpus.max_distractors" => c.max_distractors.to_string(),
            "corpus.min_slots" => c.min_slots.to_string(),
            "corpus.max_slots" => c.max_slots.to_string(),
            "model.d_model" => m.d_model.to_string(),
            "model.ffn_dim" => m.ffn_dim.to_string(),
            "model.encoder_layers" => m.encoder_layers.to_string(),
            "model.decoder_layers" => m.decoder_layers.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.latent_dim" => m.latent_dim.to_string(),
            "model.fc_hidden" => m.fc_hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            "model.max_len" => m.max_len.to_string(),
            "model.max_keywords" => m.max_keywords.to_string(),
            "model.prior" => m.prior.as_str().to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.steps" => self.steps.to_string(),
            "train.lr" => self.lr.base.to_string(),
            "train.lr_decay" => self.lr.decay_factor.to_string(),
            "train.lr_decay_steps" => self.lr.decay_interval.to_string(),
            "train.clip_norm" => self.clip_norm.to_string(),
            "train.checkpoint_interval" => self.checkpoint_interval.to_string(),
            "train.kl_smoothing" => self.kl_smoothing.to_string(),
            "scheduler.kind" => self.scheduler.clone(),
            "scheduler.setpoint" => self.pi.setpoint.to_string(),
            "scheduler.kp" => self.pi.kp.to_string(),
            "scheduler.ki" => self.pi.ki.to_string(),
            "scheduler.sample_period" => self.pi.sample_period.to_string(),
            "scheduler.anti_windup" => self.pi.anti_windup.to_string(),
            "scheduler.midpoint" => self.midpoint.to_string(),
            "scheduler.slope" => self.slope.to_string(),
            "scheduler.cycles" => self.cycles.to_string(),
            "scheduler.ratio" => self.ratio.to_string(),
            "scheduler.weight" => self.weight.to_string(),
            "generate.mode" => self.decode.clone(),
            "generate.temperature" => self.temperature.to_string(),
            "generate.max_len" => self.gen_max_len.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parses a config file body: `key = value` lines, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Config(format!("{origin}:{}: {msg}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => parse_err(m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Every key with its current value.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn scheduler_kind(&self) -> Result<SchedulerKind> {
        let kind = match self.scheduler.as_str() {
            "pi" => SchedulerKind::Pi(self.pi),
            "cost" => {
                let slope = if self.slope > 0.0 { self.slope } else { self.midpoint / 10.0 };
                SchedulerKind::CostAnneal {
                    midpoint: self.midpoint,
                    slope,
                }
            }
            "cyclical" => SchedulerKind::Cyclical {
                total: self.steps,
                cycles: self.cycles,
                ratio: self.ratio,
            },
            "constant" => SchedulerKind::Constant(self.weight),
            other => return Err(Error::Config(format!("unknown scheduler {other:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn decode_mode(&self) -> Result<DecodeMode> {
        match self.decode.as_str() {
            "greedy" => Ok(DecodeMode::Greedy),
            "temperature" if self.temperature > 0.0 && self.temperature.is_finite() => {
                Ok(DecodeMode::Temperature(self.temperature))
            }
            "temperature" => Err(Error::Config(format!("temperature {} must be positive", self.temperature))),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }

    /// Training configuration for a vocabulary of `vocab_size` tokens.
    pub fn train_config(&self, vocab_size: usize, seed: u64) -> Result<TrainConfig> {
        let mut model = self.model.clone();
        model.vocab_size = vocab_size;
        let mut cfg = TrainConfig::new(model, self.scheduler_kind()?);
        cfg.batch_size = self.batch_size;
        cfg.total_steps = self.steps;
        cfg.lr = self.lr.clone();
        cfg.clip_norm = self.clip_norm;
        cfg.checkpoint_interval = self.checkpoint_interval;
        cfg.kl_smoothing = if self.kl_smoothing > 0.0 { Some(self.kl_smoothing) } else { None };
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate_corpus(&self) -> Result<()> {
        let c = &self.corpus;
        if c.count == 0 {
            return Err(Error::Config("corpus.count must be at least 1".into()));
        }
        if c.min_present == 0 || c.min_present > c.max_present {
            return Err(Error::Config(format!(
                "corpus.min_present {} and max_present {} must satisfy 1 <= min <= max",
                c.min_present, c.max_present
            )));
        }
        if !(0.0..=1.0).contains(&c.distractor_prob) {
            return Err(Error::Config(format!("corpus.distractor_prob {} outside [0, 1]", c.distractor_prob)));
        }
        if c.min_slots > c.max_slots {
            return Err(Error::Config("corpus.min_slots exceeds corpus.max_slots".into()));
        }
        Ok(())
    }
}
