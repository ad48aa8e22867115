//! `frameattn` command-line driver.
//!
//! Every command reads an optional TOML config (`--config`), applies
//! `--set section.key=value` overrides and command flags, and writes the
//! resolved configuration to `<out>/run_config.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use frameattn::ablation::{run_grid, write_csv, Grid, Variant};
use frameattn::batching::{plan_epoch, Strategy};
use frameattn::checkpoint;
use frameattn::config::RunConfig;
use frameattn::data::{generate_synthetic, load_recordings, write_synthetic, Dataset, SyntheticManifest};
use frameattn::gradient_suite::{run_suite, tiny_config};
use frameattn::metrics::MetricsReport;
use frameattn::model::{Disabled, Model};
use frameattn::tensor::OpKind;
use frameattn::training::{evaluate, train};
use frameattn::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "frameattn", version, about = "Intra- and inter-frame attention for sensor activity recognition")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation, dropout and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override such as `train.lr=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic session CSVs and manifest.json.
    Datagen,
    /// Train a model and report test mean F1.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Check every block's gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Train a grid of strategies, batch sizes and variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// `time-sequential` or `shuffled`.
    #[arg(long)]
    strategy: Option<String>,
    /// Comma-separated components to disable: intra,inter,pe,moe,gate,focal.
    #[arg(long)]
    disable: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    /// Write every epoch's batch plan to `<out>/batch_plans.json`.
    #[arg(long)]
    dump_plan: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `train`, `validation` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Frames in the checked batch.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Corrupt the backward rule of one operation, e.g. `softmax`.
    #[arg(long)]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Comma-separated strategies; defaults to the configured one.
    #[arg(long)]
    strategies: Option<String>,
    /// Comma-separated batch sizes; defaults to the configured one.
    #[arg(long)]
    batch_sizes: Option<String>,
    /// Comma-separated presets: baseline, intra, inter, both, all, isolated.
    /// `components` expands to the five component rows.
    #[arg(long, default_value = "all")]
    variants: String,
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.global.overrides)?;
    if let Some(seed) = cli.global.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.global.out {
        cfg.out = out.clone();
    }
    match cli.command {
        Command::Datagen => datagen(cfg),
        Command::Train(args) => train_cmd(cfg, args),
        Command::Eval(args) => eval_cmd(cfg, args, cli.global.config.is_some()),
        Command::Gradcheck(args) => gradcheck(cfg, args),
        Command::Ablate(args) => ablate(cfg, args),
    }
}

fn create_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::Data(format!("cannot create {}: {e}", cfg.out.display())))
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

fn parse_list<T>(s: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let items = split_list(s)
        .map(|p| f(p).ok_or_else(|| Error::Config(format!("invalid {what} `{p}`"))))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty {what} list")));
    }
    Ok(items)
}

/// Loads `data.dir`, or generates the configured synthetic data in memory
/// when no directory is set.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let Some(dir) = &cfg.data.dir else {
        info!("no data.dir set; generating synthetic data (seed {})", cfg.synthetic.seed);
        let recs = generate_synthetic(&cfg.synthetic)?;
        return Dataset::prepare(&recs, &cfg.window, cfg.data.classes.or(Some(cfg.synthetic.classes)));
    };
    if !dir.is_dir() {
        return Err(Error::Data(format!("data directory {} does not exist", dir.display())));
    }
    let manifest = dir.join("manifest.json");
    let classes = match cfg.data.classes {
        Some(c) => Some(c),
        None if manifest.exists() => Some(SyntheticManifest::read(&manifest)?.classes),
        None => None,
    };
    let report = load_recordings(dir)?;
    Dataset::prepare(&report.recordings, &cfg.window, classes)
}

fn datagen(cfg: RunConfig) -> Result<u8> {
    cfg.synthetic.validate()?;
    create_out(&cfg)?;
    let manifest = write_synthetic(&cfg.synthetic, &cfg.out)?;
    cfg.write_json(&cfg.out)?;
    println!(
        "wrote {} sessions ({} classes) to {}",
        manifest.sessions.len(),
        manifest.classes,
        cfg.out.display()
    );
    Ok(0)
}

fn train_cmd(mut cfg: RunConfig, args: TrainArgs) -> Result<u8> {
    if let Some(s) = &args.strategy {
        cfg.train.strategy = s.parse::<Strategy>()?;
    }
    if let Some(list) = &args.disable {
        cfg.model.disable = Disabled::parse_list(list)?;
    }
    if let Some(h) = args.heads {
        cfg.model.heads = h;
    }
    let data = load_dataset(&cfg)?;
    cfg.model = cfg.resolve_model(&data);
    create_out(&cfg)?;
    cfg.write_json(&cfg.out)?;

    if args.dump_plan {
        let plans = (0..cfg.train.epochs)
            .map(|e| plan_epoch(&data.train, cfg.train.batch_size, cfg.train.strategy, cfg.train.seed, e))
            .collect::<Result<Vec<_>>>()?;
        let path = cfg.out.join("batch_plans.json");
        fs::write(&path, serde_json::to_string(&plans)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        info!("batch plans written to {}", path.display());
    }

    let (model, mut store) = Model::new(cfg.model.clone(), cfg.train.seed)?;
    info!(
        "training {} parameters on {} frames ({}, batch {}, disabled [{}])",
        store.num_scalars(),
        data.train.len(),
        cfg.train.strategy,
        cfg.train.batch_size,
        cfg.model.disable
    );
    let report = train(&model, &mut store, &data, &cfg.train, Some(&cfg.out))?;
    println!("best epoch {} validation mean F1 {}", report.best_epoch, report.best_validation_f1);
    println!("test mean F1 {}", report.test.report.mean_f1);
    Ok(0)
}

fn print_report(split: &str, report: &MetricsReport) {
    println!("{split} mean F1 {}", report.mean_f1);
    println!("class      f1     tp     fp     fn");
    for (c, f1) in report.per_class_f1.iter().enumerate() {
        println!(
            "{c:>5} {f1:>7.4} {:>6} {:>6} {:>6}",
            report.tp[c], report.fp[c], report.fn_[c]
        );
    }
}

fn eval_cmd(mut cfg: RunConfig, args: EvalArgs, explicit_config: bool) -> Result<u8> {
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"));
    // Without an explicit config, use the one saved next to the checkpoint.
    let saved = ckpt.parent().unwrap_or(Path::new(".")).join("run_config.json");
    if !explicit_config && saved.exists() {
        let out = cfg.out.clone();
        cfg = RunConfig::read_json(&saved)?;
        cfg.out = out;
    }
    let store = checkpoint::load(&ckpt)?;
    let data = load_dataset(&cfg)?;
    let ckpt_classes = store
        .find("classifier.bias")
        .map(|id| store.get(id).shape()[0])
        .ok_or_else(|| Error::Incompatible(format!("{} has no classifier", ckpt.display())))?;
    if ckpt_classes != data.classes {
        return Err(Error::Incompatible(format!(
            "checkpoint has {ckpt_classes} classes but the data has {}",
            data.classes
        )));
    }
    let (model, mut fresh) = Model::new(cfg.resolve_model(&data), cfg.train.seed)?;
    fresh.copy_values_from(&store)?;

    let frames = match args.split.as_str() {
        "train" => &data.train,
        "validation" | "val" => &data.validation,
        "test" => &data.test,
        other => return Err(Error::Config(format!("unknown split `{other}` (expected train, validation or test)"))),
    };
    let loss = cfg.train.loss.clone();
    let result = evaluate(&model, &fresh, frames, cfg.train.batch_size, &loss)?;
    print_report(&args.split, &result.report);

    create_out(&cfg)?;
    cfg.write_json(&cfg.out)?;
    let record = serde_json::json!({
        "split": args.split,
        "checkpoint": ckpt,
        "loss": result.loss,
        "report": result.report,
    });
    let path = cfg.out.join(format!("eval_{}.json", args.split));
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(0)
}

fn gradcheck(cfg: RunConfig, args: GradcheckArgs) -> Result<u8> {
    let fault = match &args.inject_fault {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| Error::Config(format!("unknown operation `{name}`")))?),
        None => None,
    };
    let model_cfg = tiny_config();
    let report = run_suite(&model_cfg, args.batch, cfg.train.seed, fault)?;
    println!("{:<32} {:>14}  result", "block", "max rel error");
    for row in &report.rows {
        println!(
            "{:<32} {:>14.3e}  {}",
            row.block,
            row.max_rel_error,
            if row.passed { "pass" } else { "FAIL" }
        );
    }
    create_out(&cfg)?;
    cfg.write_json(&cfg.out)?;
    let path = cfg.out.join("gradcheck.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if report.all_passed() {
        Ok(0)
    } else {
        let failed: Vec<&str> = report.failures().map(|r| r.block.as_str()).collect();
        eprintln!("gradient check failed in: {}", failed.join(", "));
        Ok(3)
    }
}

fn ablate(mut cfg: RunConfig, args: AblateArgs) -> Result<u8> {
    let strategies = match &args.strategies {
        Some(s) => parse_list(s, "strategy", |p| p.parse().ok())?,
        None => vec![cfg.train.strategy],
    };
    let batch_sizes = match &args.batch_sizes {
        Some(s) => parse_list(s, "batch size", |p| p.parse().ok())?,
        None => vec![cfg.train.batch_size],
    };
    let mut variants = Vec::new();
    for name in split_list(&args.variants) {
        if name == "components" {
            variants.extend(Variant::component_rows());
        } else {
            variants.push(Variant::preset(name)?);
        }
    }
    if variants.is_empty() {
        return Err(Error::Config("empty variant list".into()));
    }
    let seeds = parse_list(&args.seeds, "seed", |p| p.parse().ok())?;
    let grid = Grid {
        strategies,
        batch_sizes,
        variants,
        seeds,
    };

    let data = load_dataset(&cfg)?;
    cfg.model = cfg.resolve_model(&data);
    create_out(&cfg)?;
    cfg.write_json(&cfg.out)?;
    info!("ablation grid: {} cells x {} seeds", grid.cells(), grid.seeds.len());
    let rows = run_grid(&cfg, &data, &grid);
    let path = cfg.out.join("ablation.csv");
    write_csv(&rows, &path)?;

    println!("{:<16} {:>6} {:<10} {:>9} {:>8}  status", "strategy", "batch", "variant", "mean F1", "std");
    for r in &rows {
        println!(
            "{:<16} {:>6} {:<10} {:>9.4} {:>8.4}  {}",
            r.strategy, r.batch_size, r.variant, r.mean_f1_mean, r.mean_f1_std, r.status
        );
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        warn!("{failed} of {} cells failed", rows.len());
    }
    println!("wrote {}", path.display());
    Ok(0)
}
