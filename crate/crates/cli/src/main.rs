use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use crossl::config::{describe_keys, RunConfig};
use crossl::data::{generate_synthetic, load_dataset, save_dataset, MultimodalDataset, Split};
use crossl::eval::{emit_report, run_missing_scenarios, sweep_labels, sweep_mask, EvalReport, EvalSetup};
use crossl::masking::StrategyKind;
use crossl::model::{load_checkpoint, save_checkpoint, ModelState};
use crossl::train::{evaluate, finetune, pretrain, train_supervised, FinetuneMode, TrainTrace};
use crossl::Error;

#[derive(Parser)]
#[command(name = "crossl", version, about = "Cross-modal self-supervised pre-training for multimodal time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset manifest or directory. Without it, the synthetic section of the
    /// config is generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised pre-training of encoders and aggregator.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train the classifier on a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Pre-trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// `finetuned` or `fixed`.
        #[arg(long, default_value = "finetuned")]
        mode: String,
    },
    /// End-to-end supervised baseline with the same architecture.
    Supervised {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Run an experiment matrix and write report.csv / report.json.
    #[command(group(ArgGroup::new("experiment").required(true).args(["scenario", "sweep_mask", "sweep_labels"])))]
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Missing-modality scenarios.
        #[arg(long)]
        scenario: bool,
        /// Masking sweep over `--grid` for `--strategy`.
        #[arg(long)]
        sweep_mask: bool,
        /// Label-fraction sweep over `eval.fractions`.
        #[arg(long)]
        sweep_labels: bool,
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated grid; overrides `eval.grid`.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Strategy swept by `--sweep-mask`; defaults to `masking.strategy`.
        #[arg(long)]
        strategy: Option<String>,
        /// Concurrent cells; overrides `eval.jobs`.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// 0 ok, 2 configuration, 3 input/output, 4 numerical divergence.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 4,
        Error::Io { .. } | Error::Json { .. } | Error::Format { .. } | Error::Checksum { .. } | Error::Load { .. } => 3,
        _ => 2,
    }
}

fn load_config(common: &Common) -> crossl::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> crossl::Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("out", "pass --out or set output_dir"))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = dir.join("config.resolved.json");
    std::fs::write(&resolved, cfg.to_json()).map_err(|e| Error::io(&resolved, e))?;
    Ok(dir)
}

fn dataset(arg: &DataArg, cfg: &RunConfig) -> crossl::Result<MultimodalDataset> {
    match arg.data.as_ref().or(cfg.dataset.as_ref()) {
        Some(p) => load_dataset(p),
        None => generate_synthetic(&cfg.synthetic),
    }
}

fn write_run(dir: &Path, state: &ModelState, trace: &TrainTrace) -> crossl::Result<()> {
    save_checkpoint(state, &dir.join("checkpoint.crsl"))?;
    trace.write_csv(&dir.join("trace.csv"))?;
    println!(
        "{} epochs ({:?}), best epoch {:?}; wrote {}",
        trace.epochs.len(),
        trace.stop_reason,
        trace.best_epoch,
        dir.display()
    );
    Ok(())
}

fn report_test(state: &ModelState, data: &MultimodalDataset) -> crossl::Result<()> {
    let scores = evaluate(state, data, Split::Test)?;
    let per_class: Vec<String> = scores.per_class.iter().map(|f| format!("{f:.4}")).collect();
    println!("test macro-F1 {:.4} (per class: {})", scores.macro_f1, per_class.join(", "));
    Ok(())
}

fn summarize(data: &MultimodalDataset) {
    let counts: Vec<String> =
        Split::ALL.iter().map(|&s| format!("{} {}", s.as_str(), data.indices(s).len())).collect();
    println!("{} windows ({}), {} classes", data.len(), counts.join(", "), data.num_classes);
    for m in &data.modalities {
        println!("  {}: [{}, {}, {}]", m.name, data.len(), m.window_len, m.channels);
    }
}

fn run(command: Command) -> crossl::Result<()> {
    match command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg)?;
            let data = generate_synthetic(&cfg.synthetic)?;
            let manifest = save_dataset(&data, &dir)?;
            summarize(&data);
            println!("wrote {}", manifest.display());
        }
        Command::Pretrain { common, data } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg)?;
            let data = dataset(&data, &cfg)?;
            let seed = cfg.first_seed();
            let init = ModelState::init(cfg.model_spec(&data), seed)?;
            let (state, trace) = pretrain(&data.without_labels(), &init, &cfg.train_config(seed))?;
            write_run(&dir, &state, &trace)?;
        }
        Command::Finetune { common, data, ckpt, mode } => {
            let cfg = load_config(&common)?;
            let mode = FinetuneMode::parse(&mode)
                .ok_or_else(|| Error::config("mode", format!("expected `finetuned` or `fixed`, got `{mode}`")))?;
            let dir = out_dir(&common, &cfg)?;
            let data = dataset(&data, &cfg)?;
            let pretrained = load_checkpoint(&ckpt)?;
            if pretrained.spec.modalities != data.modalities || pretrained.spec.num_classes != data.num_classes {
                return Err(Error::config("ckpt", "checkpoint does not match the dataset"));
            }
            let (state, trace) = finetune(&data, &pretrained, &cfg.train_config(cfg.first_seed()), mode)?;
            write_run(&dir, &state, &trace)?;
            report_test(&state, &data)?;
        }
        Command::Supervised { common, data } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg)?;
            let data = dataset(&data, &cfg)?;
            let (state, trace) = train_supervised(&data, &cfg.model_spec(&data), &cfg.train_config(cfg.first_seed()))?;
            write_run(&dir, &state, &trace)?;
            report_test(&state, &data)?;
        }
        Command::Eval { common, data, scenario, sweep_mask: mask, sweep_labels: labels, seeds, grid, strategy, jobs } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(g) = grid {
                cfg.eval.grid = g;
            }
            if let Some(j) = jobs {
                cfg.eval.jobs = j;
            }
            cfg.validate()?;
            let strategy = match strategy.as_deref() {
                None => cfg.masking.strategy,
                Some("random") => StrategyKind::Random,
                Some("spatial") => StrategyKind::Spatial,
                Some(other) => return Err(Error::config("strategy", format!("expected `random` or `spatial`, got `{other}`"))),
            };
            let dir = out_dir(&common, &cfg)?;
            let data = dataset(&data, &cfg)?;
            let setup = EvalSetup {
                dataset: &data,
                model: cfg.model_spec(&data),
                train: cfg.train_config(0),
                seeds: cfg.seeds.clone(),
                cache_dir: Some(dir.join("cache")),
                jobs: cfg.eval.jobs,
            };
            let report: EvalReport = if scenario {
                run_missing_scenarios(&setup, cfg.eval.missing_count)?
            } else if mask {
                sweep_mask(&setup, strategy, &cfg.eval.grid)?
            } else {
                debug_assert!(labels);
                sweep_labels(&setup, &cfg.eval.fractions)?
            };
            emit_report(&report, &dir)?;
            for a in &report.aggregates {
                let c = &a.condition;
                println!(
                    "{:<24} {:<8} {:>6} {:>6} {:<10} macro-F1 {:.4} ± {:.4} (n={})",
                    c.scenario.as_deref().unwrap_or("-"),
                    c.strategy.as_deref().unwrap_or("-"),
                    c.grid_value.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                    c.label_fraction.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                    c.mode,
                    a.mean,
                    a.std.unwrap_or(0.0),
                    a.seeds
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let keys = format!("Config keys (JSON document passed with --config):\n{}", describe_keys());
    let command = Cli::command().after_help(keys.clone()).mut_subcommands(|s| s.after_help(keys.clone()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
