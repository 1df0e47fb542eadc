use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use rumorgraph::checkpoint::{load_checkpoint, save_checkpoint};
use rumorgraph::config::{config_with_overrides, RunConfig};
use rumorgraph::eval::{early_detection_eval, robustness_eval, run_cv, ExperimentReport};
use rumorgraph::graph::{load_events, split_folds, Dataset, EventGraph};
use rumorgraph::model::Model;
use rumorgraph::suite::run_suite;
use rumorgraph::synth::{generate_synthetic, preset};
use rumorgraph::trainer::train;

#[derive(Parser, Debug)]
#[command(
    name = "rumorgraph",
    version,
    about = "Counterfactual evidence subgraphs for rumor detection"
)]
struct Cli {
    /// TOML run configuration; absent fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration value, e.g. `--set sampler.kappa=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Master seed (same as `--set trainer.seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Do not print the effective configuration to stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as JSONL.
    Synth {
        /// Built-in generator preset; the `[generator]` section is used when absent.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one fold and write a checkpoint plus its training history.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the per-epoch history (default: next to the checkpoint).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Full k-fold cross-validation report.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Metric deltas under feature noise and edge toggles on one held-out fold.
    Robustness {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Accuracy when only posts before each deadline are visible.
    Early {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Dump one event's evidence subgraphs, complements, weights and predictions.
    Explain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        event: String,
        /// Trained model; an untrained one from the seed is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// JSONL events; a synthetic dataset from `[generator]` is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Trained checkpoint; when absent a model is trained on the other folds.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Held-out fold to evaluate.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report JSON (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one CSV row per fold or sweep point.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("trainer.seed={seed}"));
    }
    Ok(config_with_overrides(&text, &overrides)?)
}

fn dataset(args: &DataArgs, cfg: &RunConfig) -> Result<Dataset> {
    match &args.data {
        Some(p) => load_events(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(generate_synthetic(&cfg.generator, cfg.trainer.seed)?),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit_report(report: &ExperimentReport, args: &ReportArgs) -> Result<()> {
    write_text(args.out.as_deref(), &report.to_json())?;
    if let Some(csv) = &args.csv {
        fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

/// Model plus the held-out events and training-majority label for `fold`.
fn held_out_model(data: &Dataset, args: &ModelArgs, cfg: &RunConfig) -> Result<(Model, Vec<EventGraph>, u8)> {
    let folds = split_folds(data, cfg.eval.folds, cfg.trainer.seed)?;
    if args.fold >= folds.k {
        bail!("--fold {} is out of range for {} folds", args.fold, folds.k);
    }
    let model = match &args.checkpoint {
        Some(p) => {
            load_checkpoint(p)
                .with_context(|| format!("loading {}", p.display()))?
                .0
        }
        None => train(data, &folds, args.fold, &cfg.model_config(), &cfg.trainer)?.0,
    };
    let train_idx = folds.train_indices(args.fold);
    let ones = train_idx
        .iter()
        .filter(|&&i| data.events()[i].label().as_u8() == 1)
        .count();
    let majority = (2 * ones > train_idx.len()) as u8;
    let test = folds
        .test_indices(args.fold)
        .into_iter()
        .map(|i| data.events()[i].clone())
        .collect();
    Ok((model, test, majority))
}

fn with_provenance(mut report: ExperimentReport, cfg: &RunConfig) -> ExperimentReport {
    let run = serde_json::to_value(cfg).unwrap_or(Value::Null);
    report.config = json!({ "run": run, "experiment": report.config });
    report
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = effective_config(&cli)?;
    if let Command::Synth { preset: Some(name), .. } = &cli.command {
        cfg.generator = preset(name)?;
    }
    if !cli.quiet {
        eprintln!("# seed = {}\n{}", cfg.trainer.seed, cfg.to_toml_string());
    }
    let seed = cfg.trainer.seed;
    match &cli.command {
        Command::Synth { out, .. } => {
            let data = generate_synthetic(&cfg.generator, seed)?;
            data.save(out).with_context(|| format!("writing {}", out.display()))?;
            let [f, t] = data.label_counts();
            eprintln!("wrote {} events ({t} true, {f} false) to {}", data.len(), out.display());
        }
        Command::Train {
            data,
            fold,
            out,
            history,
        } => {
            let data = dataset(data, &cfg)?;
            let folds = split_folds(&data, cfg.eval.folds, seed)?;
            if *fold >= folds.k {
                bail!("--fold {fold} is out of range for {} folds", folds.k);
            }
            let (model, hist) = train(&data, &folds, *fold, &cfg.model_config(), &cfg.trainer)?;
            let meta = json!({
                "seed": seed,
                "fold": fold,
                "dataset": data.name,
                "best_epoch": hist.best_epoch,
                "stop_epoch": hist.stop_epoch,
                "run": cfg,
            });
            save_checkpoint(&model, meta, out).with_context(|| format!("writing {}", out.display()))?;
            let history_path = history.clone().unwrap_or_else(|| out.with_extension("history.json"));
            let body = json!({ "seed": seed, "fold": fold, "run": cfg, "history": hist });
            fs::write(&history_path, serde_json::to_string_pretty(&body)?)
                .with_context(|| format!("writing {}", history_path.display()))?;
            eprintln!(
                "fold {fold}: best epoch {} of {}; checkpoint {}",
                hist.best_epoch,
                hist.stop_epoch,
                out.display()
            );
        }
        Command::Cv { data, report } => {
            let data = dataset(data, &cfg)?;
            let rep = run_cv(&data, &cfg.model_config(), &cfg.trainer, &cfg.eval)?;
            emit_report(&with_provenance(rep, &cfg), report)?;
        }
        Command::Robustness { data, model, report } => {
            let data = dataset(data, &cfg)?;
            let (m, test, _) = held_out_model(&data, model, &cfg)?;
            let rep = robustness_eval(
                &m,
                &test,
                &cfg.eval.sigmas,
                cfg.eval.edge_rate,
                seed,
                cfg.eval.threshold,
            )?;
            emit_report(&with_provenance(rep, &cfg), report)?;
        }
        Command::Early { data, model, report } => {
            let data = dataset(data, &cfg)?;
            let (m, test, majority) = held_out_model(&data, model, &cfg)?;
            let rep = early_detection_eval(&m, &test, &cfg.eval.deadlines_min, majority, seed, cfg.eval.threshold)?;
            emit_report(&with_provenance(rep, &cfg), report)?;
        }
        Command::Explain {
            data,
            event,
            checkpoint,
            out,
        } => {
            let data = dataset(data, &cfg)?;
            let graph = data
                .get(event)
                .ok_or_else(|| anyhow!("event {event:?} is not in dataset {}", data.name))?
                .clone();
            let model = match checkpoint {
                Some(p) => {
                    load_checkpoint(p)
                        .with_context(|| format!("loading {}", p.display()))?
                        .0
                }
                None => {
                    eprintln!("no checkpoint given; explaining an untrained model");
                    Model::new(cfg.model_config(), seed)?
                }
            };
            let body = explain(&model, graph, seed, cfg.eval.threshold)?;
            write_text(out.as_deref(), &serde_json::to_string_pretty(&body)?)?;
        }
        Command::Gradcheck { out } => {
            let entries = run_suite(seed)?;
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
            for e in &entries {
                eprintln!(
                    "{:<5} {:<34} max rel err {:.3e} (tol {:.0e}, {} coords)",
                    if e.passed { "ok" } else { "FAIL" },
                    e.name,
                    e.max_rel_err,
                    e.tolerance,
                    e.coordinates
                );
            }
            write_text(
                out.as_deref(),
                &serde_json::to_string_pretty(&json!({ "seed": seed, "checks": entries }))?,
            )?;
            if !failed.is_empty() {
                bail!("gradient checks failed: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn explain(model: &Model, graph: EventGraph, seed: u64, threshold: f64) -> Result<Value> {
    let post_ids = |nodes: &[usize]| -> Vec<u64> { nodes.iter().map(|&v| graph.posts()[v].id).collect() };
    let ev = model.prepare(graph.clone());
    let p = model.predict(&ev, seed, None)?;
    let label = |score: f64| if score >= threshold { "true" } else { "false" };
    Ok(json!({
        "event_id": graph.event_id(),
        "label": graph.label().as_u8(),
        "seed": seed,
        "posts": graph.n(),
        "source_post": graph.posts()[graph.source()].id,
        "subgraphs": p.subgraphs.iter().map(|s| post_ids(s)).collect::<Vec<_>>(),
        "complements": p.complements.iter().map(|s| post_ids(s)).collect::<Vec<_>>(),
        "evidence_weights": p.weights,
        "complement_weights": p.complement_weights,
        "evidence_prediction": { "p_true": p.score, "label": label(p.score) },
        "complement_prediction": { "p_true": p.complement_score, "label": label(p.complement_score) },
        "loss": p.loss,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
