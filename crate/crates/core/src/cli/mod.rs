//! Command-line front end: argument parsing, run configuration and the five
//! commands. `main.rs` only forwards to [`main_with`].

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_corpus, parse_spec, read_corpus, KeywordSpec, SyntheticGrammar, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::gen_metrics::{format_g6, generate_all, requests_for, GenerationRequest, MetricsReport};
use crate::trainer::{calibrate_setpoint, final_phase_mean, load_model, Trainer};
pub use config::{RunConfig, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Trace file name inside a training output directory.
pub const TRACE_FILE: &str = "trace.csv";
/// Checkpoint file name inside a training output directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "keycvae", version, about = "Keyword- and order-conditioned CVAE with PI-controlled KL weight")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Accepted both before and after the subcommand; later ones win.
#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic keyword corpus.
    MakeCorpus {
        #[command(flatten)]
        cfg: GlobalArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides corpus.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes trace.csv and model.ckpt to the output directory.
    Train {
        #[command(flatten)]
        cfg: GlobalArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Continue from the checkpoint in the output directory up to train.steps.
        #[arg(long)]
        resume: bool,
    },
    /// Find the KL set point reached with a constant weight.
    Calibrate {
        #[command(flatten)]
        cfg: GlobalArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Also write the accepted run's trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate one text per keyword:order line of a specs file.
    Generate {
        #[command(flatten)]
        cfg: GlobalArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generations against references and specs.
    Evaluate {
        #[command(flatten)]
        cfg: GlobalArgs,
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status. Normal output goes to `out`, diagnostics to `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

impl Command {
    fn config_args(&self) -> &GlobalArgs {
        match self {
            Command::MakeCorpus { cfg, .. }
            | Command::Train { cfg, .. }
            | Command::Calibrate { cfg, .. }
            | Command::Generate { cfg, .. }
            | Command::Evaluate { cfg, .. } => cfg,
        }
    }
}

/// Loads the config file and applies `--set` overrides; `later` takes
/// precedence over `earlier`.
pub fn load_config(earlier: &GlobalArgs, later: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match later.config.as_ref().or(earlier.config.as_ref()) {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in earlier.overrides.iter().chain(&later.overrides) {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

/// Runs a parsed command and returns its stdout text.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = load_config(&cli.global, cli.command.config_args())?;
    match &cli.command {
        Command::MakeCorpus { out, seed, .. } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.corpus.seed = *s;
            }
            Ok(make_corpus(&cfg, out)?.to_text())
        }
        Command::Train {
            corpus,
            out_dir,
            seed,
            resume,
            ..
        } => train(&cfg, corpus, out_dir, *seed, *resume),
        Command::Calibrate { corpus, seed, trace, .. } => calibrate(&cfg, corpus, *seed, trace.as_deref()),
        Command::Generate {
            checkpoint,
            specs,
            seed,
            out,
            ..
        } => {
            let n = generate(&cfg, checkpoint, specs, *seed, out)?;
            Ok(format!("generated = {n}\n"))
        }
        Command::Evaluate {
            generations,
            references,
            specs,
            out,
            ..
        } => {
            let report = evaluate(generations, references, specs)?.to_text();
            match out {
                Some(p) => {
                    fs::write(p, &report)?;
                    Ok(String::new())
                }
                None => Ok(report),
            }
        }
    }
}

/// Summary printed by `make-corpus`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub count: usize,
    pub mean_length: f64,
    pub mean_keywords: f64,
}

impl CorpusSummary {
    pub fn to_text(&self) -> String {
        format!(
            "count = {}\nmean_length = {}\nmean_keywords = {}\n",
            self.count,
            format_g6(self.mean_length),
            format_g6(self.mean_keywords)
        )
    }
}

pub fn make_corpus(cfg: &RunConfig, out: &Path) -> Result<CorpusSummary> {
    cfg.validate_corpus()?;
    let grammar = SyntheticGrammar::default();
    let vocab = grammar.vocabulary();
    let examples = generate_corpus(&grammar, &vocab, &cfg.corpus)?;
    crate::data::write_corpus(out, &examples, &vocab)?;
    let n = examples.len() as f64;
    Ok(CorpusSummary {
        count: examples.len(),
        mean_length: examples.iter().map(|e| e.reference.len()).sum::<usize>() as f64 / n,
        mean_keywords: examples.iter().map(|e| e.spec.len()).sum::<usize>() as f64 / n,
    })
}

fn load_corpus(path: &Path) -> Result<(Vec<crate::data::TrainingExample>, Vocabulary)> {
    let mut vocab = Vocabulary::new([]);
    let corpus = read_corpus(path, &mut vocab)?;
    if corpus.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", path.display())));
    }
    Ok((corpus, vocab))
}

/// Trains into `out_dir`, or continues the run found there with `resume`.
pub fn train(cfg: &RunConfig, corpus: &Path, out_dir: &Path, seed: u64, resume: bool) -> Result<String> {
    let (examples, vocab) = load_corpus(corpus)?;
    fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let trace = out_dir.join(TRACE_FILE);
    let mut trainer = if resume {
        let (t, saved_vocab) = Trainer::load_checkpoint(&ckpt)?;
        if saved_vocab != vocab {
            return Err(Error::Input("corpus vocabulary differs from the checkpoint's".into()));
        }
        if t.config.seed != seed {
            return Err(Error::Config(format!("checkpoint was trained with seed {}, not {seed}", t.config.seed)));
        }
        let mut t = t;
        t.config.total_steps = cfg.steps;
        t
    } else {
        Trainer::new(cfg.train_config(vocab.len(), seed)?)?
    };
    trainer.config.trace_path = Some(trace.clone());
    trainer.config.checkpoint_path = Some(ckpt.clone());
    let rows = trainer.run(&examples, &vocab)?;
    Ok(format!(
        "steps = {}\nfinal_phase_kl = {}\ntrace = {}\ncheckpoint = {}\n",
        trainer.step,
        format_g6(final_phase_mean(&rows)),
        trace.display(),
        ckpt.display()
    ))
}

pub fn calibrate(cfg: &RunConfig, corpus: &Path, seed: u64, trace: Option<&Path>) -> Result<String> {
    let (examples, vocab) = load_corpus(corpus)?;
    let tc = cfg.train_config(vocab.len(), seed)?;
    let cal = calibrate_setpoint(&tc, &examples, &vocab)?;
    if let Some(p) = trace {
        let mut w = crate::trainer::TraceWriter::open(p, true)?;
        for r in &cal.trace {
            w.push(r)?;
        }
        w.flush()?;
    }
    Ok(format!("v0 = {}\nweight = {}\nattempts = {}\n", cal.v0, cal.weight, cal.attempts))
}

/// Parses a specs file, one `keyword:order ...` line per spec.
pub fn read_specs(path: &Path, vocab: &Vocabulary) -> Result<Vec<KeywordSpec>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            parse_spec(line, vocab).map_err(|msg| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Writes one detokenized generation per spec; returns the count.
pub fn generate(cfg: &RunConfig, checkpoint: &Path, specs: &Path, seed: u64, out: &Path) -> Result<usize> {
    let mode = cfg.decode_mode()?;
    let (model, vocab) = load_model(checkpoint)?;
    let specs = read_specs(specs, &vocab)?;
    let requests: Vec<GenerationRequest> = requests_for(&specs, mode, seed)
        .into_iter()
        .map(|mut r| {
            r.max_len = cfg.gen_max_len;
            r
        })
        .collect();
    let gens = generate_all(&model, &requests)?;
    let mut text = String::new();
    for g in &gens {
        text.push_str(&vocab.decode(g)?);
        text.push('\n');
    }
    fs::write(out, text)?;
    Ok(gens.len())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

/// Metrics over line-aligned generation, reference and spec files. Words
/// are compared as strings; specs name keywords by their surface form.
pub fn evaluate(generations: &Path, references: &Path, specs: &Path) -> Result<MetricsReport> {
    let gens = read_lines(generations)?;
    let refs = read_lines(references)?;
    let spec_lines = read_lines(specs)?;
    if gens.len() != refs.len() || gens.len() != spec_lines.len() {
        return Err(Error::Input(format!(
            "files are not aligned: {} generations, {} references, {} specs",
            gens.len(),
            refs.len(),
            spec_lines.len()
        )));
    }
    let mut vocab = Vocabulary::new([]);
    let mut encode = |s: &str| -> Vec<TokenId> { s.split_whitespace().map(|w| vocab.push(w)).collect() };
    let g: Vec<Vec<TokenId>> = gens.iter().map(|s| encode(s)).collect();
    let r: Vec<Vec<TokenId>> = refs.iter().map(|s| encode(s)).collect();
    for line in &spec_lines {
        for pair in line.split_whitespace() {
            if let Some((w, _)) = pair.rsplit_once(':') {
                vocab.push(w);
            }
        }
    }
    let mut parsed = Vec::with_capacity(spec_lines.len());
    for (i, line) in spec_lines.iter().enumerate() {
        parsed.push(parse_spec(line, &vocab).map_err(|msg| Error::Parse {
            path: specs.display().to_string(),
            line: i + 1,
            msg,
        })?);
    }
    MetricsReport::compute(&g, &r, &parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = main_with(std::iter::once("keycvae").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
        assert_eq!(run_args(&["train", "--corpus", "c", "--out-dir", "d"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["frobnicate"]).0, EXIT_USAGE);
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("make-corpus"));
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c.txt");
        let p = out.to_str().unwrap();
        let (code, _, err) = run_args(&["make-corpus", "--out", p, "--set", "corpus.count=0"]);
        assert_eq!(code, EXIT_USAGE, "{err}");
        assert_eq!(run_args(&["make-corpus", "--out", p, "--set", "no.such=1"]).0, EXIT_USAGE);
    }

    #[test]
    fn overrides_on_both_sides_of_the_subcommand_apply() {
        let cli = Cli::try_parse_from([
            "keycvae", "--set", "train.steps=5", "--set", "model.d_model=8", "train", "--corpus", "c", "--out-dir", "d",
            "--seed", "1", "--set", "train.steps=7",
        ])
        .unwrap();
        let cfg = load_config(&cli.global, cli.command.config_args()).unwrap();
        assert_eq!((cfg.steps, cfg.model.d_model), (7, 8));
    }

    #[test]
    fn runtime_errors_exit_two() {
        let (code, _, err) = run_args(&["evaluate", "--generations", "/nonexistent/a", "--references", "b", "--specs", "c"]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.starts_with("error:"));
    }
}
