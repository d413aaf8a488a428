//! `multiturn`: data ingestion, reader and ranker training,
//! evaluation, prediction, and the experiment grid, all driven by a
//! key=value config file plus a few overrides.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use multiturn::checkpoint::Stamp;
use multiturn::config::Config;
use multiturn::data::{self, Example};
use multiturn::error::{Error, Result};
use multiturn::harness::{self, Pipeline};
use multiturn::reasoner::ModelParams;

#[derive(Parser)]
#[command(name = "multiturn", version, about = "Multi-turn reading comprehension experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args)]
struct RunArgs {
    /// key=value config file layered over the defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed override
    #[arg(long)]
    seed: Option<u64>,
    /// turn-regime override: single|fixed|dynamic
    #[arg(long)]
    mode: Option<String>,
    /// output directory override
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = mode.parse()?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a SQuAD v1.1 JSON file to tokenized JSON lines
    IngestSquad {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Convert MARCO-style JSON lines and derive extractive span labels
    IngestMarco {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Label ingested examples with max-ROUGE extractive spans
    DeriveSpans {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a reader, keeping the best-dev checkpoint
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a reader checkpoint on a dataset
    Eval {
        ckpt: PathBuf,
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write an id -> answer JSON map plus a per-turn trace
    Predict {
        ckpt: PathBuf,
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the trigram passage ranker
    RankTrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and evaluate every (mode, channels, seed) grid cell
    Grid {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stop-turn and decision-turn histograms for a checkpoint
    AnalyzeTurns {
        ckpt: PathBuf,
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::IngestSquad { input, output, run } => ingest_squad(&input, &output, &run),
        Command::IngestMarco { input, output, run } => ingest_marco(&input, &output, &run),
        Command::DeriveSpans { input, output, run } => derive_spans(&input, &output, &run),
        Command::Train { run } => train(&run),
        Command::Eval { ckpt, data, run } => eval(&ckpt, &data, &run),
        Command::Predict { ckpt, data, run } => predict(&ckpt, &data, &run),
        Command::RankTrain { run } => rank_train(&run),
        Command::Grid { run } => grid(&run),
        Command::AnalyzeTurns { ckpt, data, run } => analyze_turns(&ckpt, &data, &run),
    }
}

/// The resolved config rides along with file-shaped outputs as a
/// sidecar; directory-shaped outputs get config.resolved inside.
fn write_sidecar(output: &Path, cfg: &Config) -> Result<()> {
    let mut name = output
        .file_name()
        .ok_or_else(|| Error::config(format!("{} has no file name", output.display())))?
        .to_os_string();
    name.push(".config.resolved");
    std::fs::write(output.with_file_name(name), cfg.resolved())?;
    Ok(())
}

fn read_required(path: &Option<PathBuf>, key: &str) -> Result<Vec<Example>> {
    let path = path
        .as_ref()
        .ok_or_else(|| Error::config(format!("{key} must be set in the config")))?;
    data::read_examples(path)
}

fn read_optional(path: &Option<PathBuf>) -> Result<Vec<Example>> {
    match path {
        Some(p) => data::read_examples(p),
        None => Ok(Vec::new()),
    }
}

/// Rebuild the text pipeline from the training split and load reader
/// weights under the stamp check.
fn load_reader(ckpt: &Path, cfg: &Config) -> Result<(Pipeline, ModelParams<f32>)> {
    let train = read_required(&cfg.train_path, "train_path")?;
    let pipe = Pipeline::build(&train, cfg);
    let model = harness::load_checkpoint(ckpt, cfg, &pipe)?;
    Ok((pipe, model))
}

fn ingest_squad(input: &Path, output: &Path, run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let (examples, stats) = data::read_squad(input)?;
    data::write_examples(output, &examples)?;
    write_sidecar(output, &cfg)?;
    println!(
        "ingested {} examples to {} ({} unalignable skipped)",
        stats.examples,
        output.display(),
        stats.skipped_unalignable
    );
    Ok(())
}

fn ingest_marco(input: &Path, output: &Path, run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let (mut examples, stats) = data::read_marco(input)?;
    let spans = data::derive_spans(&mut examples, cfg.l_max, cfg.rouge_beta);
    data::write_examples(output, &examples)?;
    write_sidecar(output, &cfg)?;
    println!(
        "ingested {} examples to {} ({} empty-passage skipped)",
        stats.examples,
        output.display(),
        stats.skipped_empty
    );
    println!(
        "spans: {} derived, {} no-answer, {} unmatched; ROUGE-L upper bound {:.4}",
        spans.derived,
        spans.no_answer,
        spans.unmatched,
        spans.rouge_upper_bound()
    );
    Ok(())
}

fn derive_spans(input: &Path, output: &Path, run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let mut examples = data::read_examples(input)?;
    let spans = data::derive_spans(&mut examples, cfg.l_max, cfg.rouge_beta);
    data::write_examples(output, &examples)?;
    write_sidecar(output, &cfg)?;
    println!(
        "spans: {} kept, {} derived, {} no-answer, {} unmatched; ROUGE-L upper bound {:.4}",
        spans.kept,
        spans.derived,
        spans.no_answer,
        spans.unmatched,
        spans.rouge_upper_bound()
    );
    Ok(())
}

fn train(run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let train = read_required(&cfg.train_path, "train_path")?;
    let dev = read_optional(&cfg.dev_path)?;
    let pipe = Pipeline::build(&train, &cfg);
    let outcome = harness::train_model::<f32>(&cfg, &pipe, &train, &dev)?;
    let report = if dev.is_empty() {
        None
    } else {
        Some(harness::evaluate(&outcome.model, &cfg, &pipe, &dev)?)
    };
    harness::write_training_run(&cfg.out_dir, &cfg, &pipe, &outcome, report.as_ref())?;
    match &report {
        Some(r) => println!(
            "trained {} epochs; best dev F1 {:.4} at epoch {}; dev EM {:.4} F1 {:.4}",
            outcome.epochs_run, outcome.best_f1, outcome.best_epoch, r.em, r.f1
        ),
        None => println!("trained {} epochs (no dev split)", outcome.epochs_run),
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn eval(ckpt: &Path, data_path: &Path, run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let examples = data::read_examples(data_path)?;
    let (pipe, model) = load_reader(ckpt, &cfg)?;
    let report = harness::evaluate(&model, &cfg, &pipe, &examples)?;
    cfg.write_resolved(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("eval.json"), harness::eval_json(&report))?;
    std::fs::write(cfg.out_dir.join("eval.tsv"), harness::eval_tsv(&report))?;
    println!(
        "EM {:.4}  F1 {:.4}  ROUGE-L {:.4}  BLEU {:.4}  ({} examples)",
        report.em, report.f1, report.rouge, report.bleu, report.count
    );
    println!("reports in {}", cfg.out_dir.display());
    Ok(())
}

fn predict(ckpt: &Path, data_path: &Path, run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let examples = data::read_examples(data_path)?;
    let (pipe, model) = load_reader(ckpt, &cfg)?;
    let preds = harness::predict(&model, &cfg, &pipe, &examples)?;
    cfg.write_resolved(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("predictions.json"),
        harness::predictions_json(&preds),
    )?;
    std::fs::write(
        cfg.out_dir.join("trace.csv"),
        harness::trace_csv(&model, &cfg, &pipe, &examples)?,
    )?;
    println!("wrote {} predictions to {}", preds.len(), cfg.out_dir.display());
    Ok(())
}

fn rank_train(run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let train = read_required(&cfg.train_path, "train_path")?;
    let dev = read_optional(&cfg.dev_path)?;
    let queries = harness::rank_queries(&train);
    let outcome = harness::train_ranker::<f32>(&cfg, &queries)?;
    cfg.write_resolved(&cfg.out_dir)?;

    let stamp = Stamp {
        config_hash: cfg.ranker_fingerprint(),
        vocab_hash: 0,
    };
    outcome.params.save(&cfg.out_dir.join("ranker.ckpt"), stamp)?;

    let mut curve = String::from("epoch,loss,used,skipped\n");
    for (i, e) in outcome.epochs.iter().enumerate() {
        use std::fmt::Write;
        let _ = writeln!(curve, "{},{:.6},{},{}", i, e.loss, e.used, e.skipped);
    }
    std::fs::write(cfg.out_dir.join("rank_curve.csv"), curve)?;

    let train_top1 = harness::ranker_top1(&outcome.params, &train)?;
    let mut tsv = format!("split\ttop1\ntrain\t{train_top1:.6}\n");
    print!("train top-1 {train_top1:.4}");
    if !dev.is_empty() {
        let dev_top1 = harness::ranker_top1(&outcome.params, &dev)?;
        use std::fmt::Write;
        let _ = writeln!(tsv, "dev\t{dev_top1:.6}");
        print!("  dev top-1 {dev_top1:.4}");
    }
    println!();
    std::fs::write(cfg.out_dir.join("rank.tsv"), tsv)?;
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn grid(run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let train = read_required(&cfg.train_path, "train_path")?;
    let dev = read_optional(&cfg.dev_path)?;
    if dev.is_empty() {
        return Err(Error::config("grid requires a dev_path to score cells"));
    }
    let cells = harness::run_grid::<f32>(&cfg, &train, &dev, Some(&cfg.out_dir))?;
    cfg.write_resolved(&cfg.out_dir)?;
    let tsv = harness::grid_tsv(&cells);
    std::fs::write(cfg.out_dir.join("grid.tsv"), &tsv)?;
    print!("{tsv}");
    println!("grid artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn analyze_turns(ckpt: &Path, data_path: &Path, run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let examples = data::read_examples(data_path)?;
    let (pipe, model) = load_reader(ckpt, &cfg)?;
    let table = harness::analyze_turns(&model, &cfg, &pipe, &examples)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let csv = harness::turns_csv(&table);
    std::fs::write(cfg.out_dir.join("turns.csv"), &csv)?;
    print!("{csv}");
    println!("turn analysis in {}", cfg.out_dir.display());
    Ok(())
}
