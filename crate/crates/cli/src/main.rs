use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use repcount_core::gradsuite;
use repcount_core::store;
use repcount_core::synth::{gen_suite, GenConfig};
use repcount_core::train::{
    ablate, ablation_csv, embeddings_csv, evaluate, export_embeddings, train, AblationSuite, TrainConfig,
};
use repcount_core::Error;

const CHECKPOINT: &str = "checkpoint.bin";
const TRAIN_LOG: &str = "train_log.jsonl";
const RESOLVED_CONFIG: &str = "config.json";

#[derive(Parser)]
#[command(name = "repcount", version, about = "Repetition counting over per-frame feature sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint and per-epoch log.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ablation suites and write the median table plus per-seed reports.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        /// phases, losses, variants, rca, sampling_rate or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 5)]
        seed_count: usize,
    },
    /// Finite-difference check of every op, loss and the end-to-end model.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the reference embedding of every cycle and interval as CSV.
    ExportEmbeddings {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

fn echo(command: &str, config: &impl serde::Serialize) -> Result<(), Failure> {
    let line = json!({ "command": command, "config": config });
    println!("{line}");
    Ok(())
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, Failure> {
    Ok(match path {
        Some(p) => store::load_config(p)?,
        None => T::default(),
    })
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = load_or_default(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_splits(data: &Path) -> Result<[Vec<repcount_core::sequence::FeatureSequence>; 3], Failure> {
    let train = store::read_split(data, "train")?;
    let val = if data.join("val").is_dir() {
        store::read_split(data, "val")?
    } else {
        Vec::new()
    };
    let test = if data.join("test").is_dir() {
        store::read_split(data, "test")?
    } else {
        Vec::new()
    };
    Ok([train, val, test])
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen { config, out, seed } => {
            let mut cfg: GenConfig = load_or_default(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            echo("gen", &cfg)?;
            let [tr, va, te] = gen_suite(&cfg)?;
            store::write_splits(&out, [&tr.sequences, &va.sequences, &te.sequences])?;
            store::write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
            log::info!(
                "wrote {} / {} / {} sequences to {}",
                tr.sequences.len(),
                va.sequences.len(),
                te.sequences.len(),
                out.display()
            );
        }
        Command::Train { common, out } => {
            let cfg = train_config(&common)?;
            echo("train", &cfg)?;
            let [tr, va, _] = read_splits(&common.data)?;
            let outcome = train(&tr, &va, &cfg)?;
            store::save_checkpoint(&out.join(CHECKPOINT), &outcome.model, &outcome.params)?;
            store::write_jsonl(&out.join(TRAIN_LOG), &outcome.log)?;
            store::write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
            log::info!("best epoch {}", outcome.best_epoch);
        }
        Command::Eval { data, ckpt, split, out } => {
            let (model, params) = store::load_checkpoint(&ckpt)?;
            echo("eval", &json!({ "model": model, "split": split }))?;
            let seqs = store::read_split(&data, &split)?;
            let report = evaluate(&split, &seqs, &params, &model)?;
            let text = report.to_jsonl()?;
            match out {
                Some(p) => store::write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Ablate {
            common,
            out,
            suite,
            seed_count,
        } => {
            let cfg = train_config(&common)?;
            let suites = if suite == "all" {
                AblationSuite::ALL.to_vec()
            } else {
                suite
                    .split(',')
                    .map(AblationSuite::parse)
                    .collect::<Result<Vec<_>, _>>()?
            };
            echo(
                "ablate",
                &json!({
                    "base": cfg,
                    "suites": suites.iter().map(|s| s.name()).collect::<Vec<_>>(),
                    "seed_count": seed_count,
                }),
            )?;
            let [tr, va, te] = read_splits(&common.data)?;
            if te.is_empty() {
                return Err(Error::Empty("ablation needs a test split".into()).into());
            }
            let mut cells = Vec::new();
            for s in suites {
                let rows = ablate(s, &cfg, seed_count, &tr, &va, &te)?;
                for cell in &rows {
                    for (seed, report) in cell.seeds.iter().zip(&cell.reports) {
                        let path = out
                            .join("reports")
                            .join(&cell.suite)
                            .join(&cell.config)
                            .join(format!("seed{seed}.jsonl"));
                        store::write_text(&path, &report.to_jsonl()?)?;
                    }
                }
                cells.extend(rows);
            }
            let csv = ablation_csv(&cells)?;
            store::write_text(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::GradCheck { seeds, out } => {
            if seeds == 0 {
                return Err(Error::Config("seeds must be positive".into()).into());
            }
            echo("grad-check", &json!({ "seeds": seeds, "eps": gradsuite::EPS }))?;
            let checks = gradsuite::run_suite(seeds)?;
            let mut failed = 0;
            let mut rows = Vec::with_capacity(checks.len());
            for c in &checks {
                let status = if c.passes() { "pass" } else { "fail" };
                failed += usize::from(!c.passes());
                println!(
                    "{status} {:<20} max_rel_error={:.3e} tolerance={:.0e} coordinates={}",
                    c.name, c.max_rel_error, c.tolerance, c.coordinates
                );
                rows.push(json!({
                    "name": c.name,
                    "passed": c.passes(),
                    "max_rel_error": c.max_rel_error,
                    "tolerance": c.tolerance,
                    "seeds": c.seeds,
                    "coordinates": c.coordinates,
                }));
            }
            if let Some(p) = out {
                store::write_json(&p, &rows)?;
            }
            if failed > 0 {
                return Err(Failure {
                    code: 2,
                    kind: "grad_check".into(),
                    message: format!("{failed} of {} checks failed", checks.len()),
                });
            }
        }
        Command::ExportEmbeddings { data, ckpt, split, out } => {
            let (model, params) = store::load_checkpoint(&ckpt)?;
            echo("export-embeddings", &json!({ "model": model, "split": split }))?;
            let seqs = store::read_split(&data, &split)?;
            let rows = export_embeddings(&seqs, &params, &model)?;
            store::write_text(&out, &embeddings_csv(&rows)?)?;
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("REPCOUNT_THREADS") else {
        return Ok(());
    };
    let n: usize = value.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| Failure {
        code: 1,
        kind: "config".into(),
        message: format!("REPCOUNT_THREADS must be a positive integer, got {value:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            kind: "threads".into(),
            message: e.to_string(),
        })
}

fn fail(f: Failure) -> ExitCode {
    eprintln!(
        "{}",
        json!({ "error": { "kind": f.kind, "message": f.message }, "exit": f.code })
    );
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            return fail(Failure {
                code: 1,
                kind: "usage".into(),
                message: first.trim_start_matches("error: ").to_string(),
            });
        }
    };
    if let Err(f) = configure_threads() {
        return fail(f);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
