use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mental_perceiver::config::RunConfig;
use mental_perceiver::corpus::{generate_synthetic, Corpus, Split, SynthSpec};
use mental_perceiver::io::write_atomic;
use mental_perceiver::losses::LossConvention;
use mental_perceiver::metrics::{evaluate, render_table, write_predictions_csv, write_reports, Level};
use mental_perceiver::priors::CategoryPriors;
use mental_perceiver::trainer::{train, Checkpoint, EpochLog};
use mental_perceiver::{Error, Result};

#[derive(Parser)]
#[command(name = "mental-perceiver", version, about = "Prior-guided Perceiver for anxiety/depression screening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a class-conditional Gaussian corpus.
    GenSynth(GenSynth),
    /// Compute the two category priors from the training split.
    ComputePriors(ComputePriors),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvalArgs),
    /// Per-record predictions of a checkpoint.
    Predict(PredictArgs),
    /// Convert WAV-referencing records into mel-frame records.
    Featurize(Featurize),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Participants in each class.
    #[arg(long, default_value_t = 100, conflicts_with = "participants")]
    per_class: usize,
    /// Total participants; combine with --positive-rate.
    #[arg(long, requires = "positive_rate")]
    participants: Option<usize>,
    #[arg(long)]
    positive_rate: Option<f64>,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 768)]
    text_width: usize,
    #[arg(long, default_value_t = 80)]
    audio_width: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct ComputePriors {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run directory for best.ckpt, epochs.jsonl, config.toml and priors.json.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss_convention: Option<LossConvention>,
    /// Precomputed prior file; computed from the corpus when absent.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Defaults to the corpus recorded in the run's config.toml.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Repeat to select several; both levels by default.
    #[arg(long)]
    level: Vec<Level>,
    /// Directory for report.jsonl, report.txt and predictions.csv.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "participant")]
    level: Level,
    /// CSV destination; standard output when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Featurize {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::config(format!("MP_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(e.to_string()))
}

fn gen_synth(a: GenSynth) -> Result<()> {
    let base = match (a.participants, a.positive_rate) {
        (Some(total), Some(rate)) => SynthSpec::with_positive_rate(total, rate)?,
        _ => SynthSpec {
            normal: a.per_class,
            disorder: a.per_class,
            ..SynthSpec::default()
        },
    };
    let spec = SynthSpec {
        separation: a.separation,
        text_width: a.text_width,
        audio_width: a.audio_width,
        seed: a.seed,
        ..base
    };
    let corpus = generate_synthetic(&spec)?;
    corpus.save(&a.out)?;
    eprintln!("wrote {} participants to {}", corpus.records.len(), a.out.display());
    Ok(())
}

fn compute_priors(a: ComputePriors) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let priors = CategoryPriors::from_corpus(&corpus)?;
    priors.save(&a.out)?;
    eprintln!(
        "priors of width {} from {} normal and {} disorder participants",
        priors.width(),
        priors.counts[0],
        priors.counts[1]
    );
    Ok(())
}

fn epoch_line(l: &EpochLog) -> String {
    serde_json::to_string(l).expect("epoch log serializes")
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.set_seed(seed);
    }
    if let Some(c) = a.loss_convention {
        cfg.train.loss_convention = c;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(c) = a.corpus {
        cfg.corpus = Some(c);
    }
    let corpus_path = cfg
        .corpus
        .clone()
        .ok_or_else(|| Error::config("no corpus given (use --corpus or the `corpus` config key)"))?;
    let corpus_path = std::path::absolute(&corpus_path).map_err(|e| Error::io(&corpus_path, e))?;
    cfg.corpus = Some(corpus_path.clone());
    cfg.validate()?;

    let corpus = Corpus::load(&corpus_path)?;
    let priors = match &a.priors {
        Some(p) => CategoryPriors::load(p)?,
        None => CategoryPriors::from_corpus(&corpus)?,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_atomic(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    priors.save(&a.out.join("priors.json"))?;

    let log_path = a.out.join("epochs.jsonl");
    let mut lines = String::new();
    let outcome = train(&corpus, &priors, &cfg.model, &cfg.train, &cfg.segment, |l| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  val_uar {:.4}  lr x{:.4}",
            l.epoch, l.train_loss, l.val_uar, l.lr_multiplier
        );
        lines.push_str(&epoch_line(l));
        lines.push('\n');
        write_atomic(&log_path, lines.as_bytes())
    })?;
    let ckpt = a.out.join("best.ckpt");
    outcome.best.save(&ckpt)?;
    eprintln!(
        "best epoch {} (validation UAR {:.4}) saved to {}",
        outcome.best.meta.epoch,
        outcome.best.meta.best_metric,
        ckpt.display()
    );
    Ok(())
}

/// The explicit corpus, or the one recorded next to the checkpoint.
fn resolve_corpus(explicit: Option<PathBuf>, checkpoint: &Path) -> Result<PathBuf> {
    if let Some(c) = explicit {
        return Ok(c);
    }
    let cfg_path = checkpoint.parent().unwrap_or(Path::new(".")).join("config.toml");
    if cfg_path.exists() {
        if let Some(c) = RunConfig::load(&cfg_path)?.corpus {
            return Ok(c);
        }
    }
    Err(Error::config("no corpus given and none recorded beside the checkpoint (use --corpus)"))
}

fn run_evaluate(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::load(&resolve_corpus(a.corpus, &a.checkpoint)?)?;
    let levels = if a.level.is_empty() {
        vec![Level::Segment, Level::Participant]
    } else {
        a.level
    };
    let ev = evaluate(&ckpt.model, &ckpt.params, &corpus, a.split, &levels, &ckpt.meta.segment)?;
    print!("{}", render_table(&ev.reports));
    if let Some(dir) = a.out {
        write_reports(&dir.join("report.jsonl"), &dir.join("report.txt"), &ev.reports)?;
        write_predictions_csv(&dir.join("predictions.csv"), &ev.predictions)?;
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::load(&resolve_corpus(a.corpus, &a.checkpoint)?)?;
    let ev = evaluate(&ckpt.model, &ckpt.params, &corpus, a.split, &[a.level], &ckpt.meta.segment)?;
    match a.out {
        Some(path) => write_predictions_csv(&path, &ev.predictions),
        None => {
            println!("participant_id,level,p_disorder,predicted,label");
            for p in &ev.predictions {
                println!("{},{},{},{},{}", p.participant_id, p.level, p.p_disorder, p.predicted, p.label);
            }
            Ok(())
        }
    }
}

fn featurize(a: Featurize) -> Result<()> {
    let mut corpus = Corpus::load(&a.corpus)?;
    let n = corpus.featurize()?;
    corpus.save(&a.out)?;
    eprintln!("featurized {n} recording(s)");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::ComputePriors(a) => compute_priors(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Predict(a) => run_predict(a),
        Command::Featurize(a) => featurize(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
