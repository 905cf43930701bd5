//! `geode-lab`: data generation, training, evaluation and reporting.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use geode_core::pipeline::Lab;
use geode_core::{report, GeodeError, LabConfig};

#[derive(Parser, Debug)]
#[command(name = "geode-lab", version, about = "Desk-scale spatial reasoning lab")]
struct Cli {
    /// JSON config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root; every path is relative to it.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Print every config key with its default and description, then exit.
    #[arg(long)]
    print_schema: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and held-out splits.
    GenData,
    /// Pretrain the language model on the training text.
    PretrainLm,
    /// Train encoders and the rationale module against the frozen LM.
    TrainStage1 {
        /// Continue from the last epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Finetune LM, projector and regression heads for `train.arm`.
    TrainStage2 {
        #[arg(long)]
        resume: bool,
    },
    /// Score the stage-2 model of `train.arm` on the held-out split.
    Eval,
    /// Evaluate the ablation grid and write ablation.csv.
    Ablate {
        /// Train any grid cell whose checkpoint is missing instead of skipping it.
        #[arg(long)]
        train_missing: bool,
    },
    /// Aggregate report JSONL files into a mean±std table and report.csv.
    Report {
        /// Report files; defaults to `<out>/reports.jsonl`.
        paths: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<LabConfig, GeodeError> {
    let mut cfg = match &cli.config {
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), GeodeError> {
    let Ok(raw) = std::env::var("GEODE_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| GeodeError::config("GEODE_LAB_THREADS", format!("expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| GeodeError::config("GEODE_LAB_THREADS", e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_schema {
        print!("{}", LabConfig::schema());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(GeodeError::config("<verb>", "missing verb; see --help").into());
    };
    init_threads()?;
    let cfg = load_config(&cli)?;
    let lab = Lab::new(cfg, cli.out.clone())?;
    match command {
        Command::GenData => {
            let (train, heldout) = lab.gen_data()?;
            println!(
                "train: {} samples over {} scenes; eval: {} samples over {} scenes -> {}",
                train.samples,
                train.scenes,
                heldout.samples,
                heldout.scenes,
                lab.data_dir().display()
            );
        }
        Command::PretrainLm => {
            lab.pretrain_lm()?;
            println!("language model -> {}", lab.layout.lm().display());
        }
        Command::TrainStage1 { resume } => {
            let h = lab.train_stage1(*resume)?;
            println!(
                "held-out reconstruction loss {:.4} with prefix, {:.4} without ({:.1}% lower) -> {}",
                h.with_prefix,
                h.without_prefix,
                100.0 * h.reduction(),
                lab.stage1_dir().display()
            );
        }
        Command::TrainStage2 { resume } => {
            lab.train_stage2(*resume)?;
            println!("stage 2 ({}) -> {}", lab.cfg.train.arm, lab.stage2_dir().display());
        }
        Command::Eval => {
            let (r, _) = lab.evaluate(&lab.cfg.train.arm)?;
            println!("{}", serde_json::to_string(&r).context("serializing report")?);
        }
        Command::Ablate { train_missing } => {
            let out = lab.ablate(*train_missing)?;
            let reports: Vec<_> = out.runs.into_iter().map(|(r, _)| r).collect();
            print!("{}", report::render_table(&report::summarize(&reports)));
            for s in &out.skipped {
                println!("skipped: {s}");
            }
            println!("-> {}", lab.layout.ablation_csv().display());
        }
        Command::Report { paths } => {
            let paths = if paths.is_empty() {
                vec![lab.layout.reports()]
            } else {
                paths.clone()
            };
            let loaded = report::read_reports(&paths)?;
            let summaries = report::summarize(&loaded.reports);
            print!("{}", report::render_table(&summaries));
            let csv = cli.out.join("report.csv");
            std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
            std::fs::write(&csv, report::summary_csv(&summaries)).with_context(|| format!("writing {}", csv.display()))?;
            println!("warnings: {}", loaded.warnings.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<GeodeError>().is_some_and(GeodeError::is_config);
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
