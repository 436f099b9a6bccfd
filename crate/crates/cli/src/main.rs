use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bytelab::config::ExperimentConfig;
use bytelab::data::{corpus_files, read_documents, val_doc_count, DEFAULT_VAL_FRACTION};
use bytelab::report;
use bytelab::tokenizer::{fertility, train_bpe};
use bytelab::trainer::{self, MetricRecord, MetricSplit, RunOptions};
use bytelab::Error;
use clap::{Parser, Subcommand};

/// Byte-level language-model experiments.
#[derive(Parser)]
#[command(name = "bytelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE tokenizer on a directory of .txt files.
    TokenizerTrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Bytes plus merges.
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack and annotate a corpus into binary caches.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
        val_fraction: f64,
    },
    /// Run an experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint (.json sidecar or .blab) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Record elapsed milliseconds in every metric line.
        #[arg(long)]
        wall_clock: bool,
        /// Stop after this step; the schedule still spans the configured steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the validation window cap.
        #[arg(long)]
        max_windows: Option<usize>,
    },
    /// Tabulate and plot validation curves of several runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn write(path: &Path, contents: &str) -> bytelab::Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn tokenizer_train(corpus: &Path, vocab_size: usize, out: &Path) -> bytelab::Result<()> {
    let docs = read_documents(&corpus_files(corpus)?)?;
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // hold out the trailing documents for the fertility estimate
    let held = if docs.len() > 1 {
        val_doc_count(docs.len(), DEFAULT_VAL_FRACTION)
    } else {
        0
    };
    let (fit, sample) = docs.split_at(docs.len() - held);
    let model = train_bpe(fit, vocab_size)?;
    model.save(out)?;
    let sample = if sample.is_empty() { fit } else { sample };
    let f = fertility(&model, sample, sample.len())?;
    println!(
        "{} merges, vocab {}; fertility {f:.3} bytes/token on {} held-out documents",
        model.merges().len(),
        model.vocab_size(),
        sample.len()
    );
    Ok(())
}

fn print_record(rec: &MetricRecord) -> bytelab::Result<()> {
    println!("{}", serde_json::to_string(rec)?);
    Ok(())
}

fn run(cli: Cli) -> bytelab::Result<()> {
    match cli.command {
        Command::TokenizerTrain {
            corpus,
            vocab_size,
            out,
        } => tokenizer_train(&corpus, vocab_size, &out),
        Command::Ingest {
            corpus,
            tokenizer,
            out,
            val_fraction,
        } => {
            let cfg = ExperimentConfig {
                corpus,
                tokenizer,
                val_fraction,
                ..Default::default()
            };
            let (train, val) = trainer::write_data_cache(&cfg, &out)?;
            println!("train {train} positions, val {val} positions -> {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            resume,
            wall_clock,
            stop_after,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let data = trainer::load_data(&cfg)?;
            let opts = RunOptions {
                resume,
                wall_clock,
                stop_after,
            };
            let summary = trainer::train(&cfg, &data, &opts)?;
            if let Some(rec) = summary.records.iter().rev().find(|r| r.split == MetricSplit::Val) {
                print_record(rec)?;
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            max_windows,
        } => {
            let (meta, params, _) = trainer::load_checkpoint(&checkpoint)?;
            let cfg = meta.experiment;
            let data = trainer::load_data(&cfg)?;
            let spec = cfg.intervention();
            let ev = trainer::evaluate_bpb(
                &params,
                &data.val,
                &spec,
                spec.active_at(meta.step.max(1)),
                cfg.seq_len,
                cfg.batch_size,
                max_windows.or(cfg.eval_max_windows),
            )?;
            print_record(&MetricRecord {
                step: meta.step,
                split: MetricSplit::Val,
                loss: ev.nats_per_byte(),
                nats_per_byte: ev.nats_per_byte(),
                bits_per_byte: ev.bits_per_byte(),
                lr: 0.0,
                bytes_seen: meta.counters.bytes_seen,
                samples_seen: meta.counters.samples_seen,
                tokens_seen: meta.counters.tokens_seen,
                wall_ms: None,
            })
        }
        Command::Compare { runs, out } => {
            let series = report::load_runs(&runs)?;
            let csv = PathBuf::from(format!("{}.csv", out.display()));
            let svg = PathBuf::from(format!("{}.svg", out.display()));
            write(&csv, &report::to_csv(&series))?;
            write(&svg, &report::to_svg(&series))?;
            println!("wrote {} and {}", csv.display(), svg.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
