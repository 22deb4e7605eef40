//! `cocl` command-line front end: training runs, the ablation grid, the
//! numeric self-check, dataset export and scoring of external logits.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cocl::calibration::{estimate_priors, ScoreMethod};
use cocl::datagen::{designate_head_tail, write_csv, Datasets};
use cocl::harness::{
    emit_report, eval_logits, parse_logits_csv, run_ablation, run_experiment, selfcheck, split_metrics_csv,
    write_run_artifacts, ExperimentConfig, ReportFormat,
};
use cocl::losses::TcplForm;
use cocl::par::Mode;
use cocl::trainer::Preset;
use cocl::{CoclError, Result};

/// Environment variable holding the worker-thread count.
const WORKERS_ENV: &str = "COCL_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "cocl", version, about = "Outlier-class learning for OOD detection on long-tailed data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate the configured method for every seed.
    Run(ExperimentArgs),
    /// Train and evaluate every cell of the ablation grid.
    Ablate(ExperimentArgs),
    /// Gradient, calibration and metric self-checks.
    Check,
    /// Write the synthetic datasets as CSV, one directory per seed.
    GenData(ExperimentArgs),
    /// Score an external logits CSV and report per-split metrics.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// JSON experiment config; omitted keys come from the preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory, overriding the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Report format, overriding the config.
    #[arg(long, value_parser = parse_format)]
    format: Option<ReportFormat>,
    /// Base preset for keys the config leaves out.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Train with the prototype loss in its literal printed sign.
    #[arg(long)]
    tcpl_literal: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// CSV with header `logit_0..logit_{m-1},label`; empty label marks OOD.
    #[arg(long, value_name = "PATH")]
    logits: PathBuf,
    /// Comma-separated training counts per ID class.
    #[arg(long, value_name = "LIST", value_delimiter = ',', required = true)]
    counts: Vec<usize>,
    /// msp_oe, ocl_raw or cocl_calibrated.
    #[arg(long, default_value = "cocl_calibrated", value_parser = parse_score)]
    score: ScoreMethod,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.4)]
    head_pct: f64,
    #[arg(long, default_value_t = 0.4)]
    tail_pct: f64,
    /// Let the outlier position win the ID accuracy argmax.
    #[arg(long)]
    include_outlier: bool,
    /// Write `eval.<ext>` here instead of printing to stdout.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: ReportFormat,
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    s.parse().map_err(|e: CoclError| e.to_string())
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: CoclError| e.to_string())
}

fn parse_score(s: &str) -> std::result::Result<ScoreMethod, String> {
    s.parse().map_err(|e: CoclError| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_workers().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CoclError::config(format!("{WORKERS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CoclError::config(format!("cannot start {n} workers: {e}")))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => {
            let config = resolve_config(&args)?;
            let (table, runs) = run_experiment(&config, Mode::default())?;
            let dir = &config.output.dir;
            write_config(&config, dir)?;
            write_run_artifacts(&runs, dir)?;
            let path = emit_report(&table, config.output.format, dir, "run")?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Ablate(args) => {
            let config = resolve_config(&args)?;
            let table = run_ablation(&config, Mode::default())?;
            write_config(&config, &config.output.dir)?;
            let path = emit_report(&table, config.output.format, &config.output.dir, "ablation")?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Check => {
            let outcomes = selfcheck();
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            match outcomes.iter().filter(|o| !o.passed).count() {
                0 => Ok(()),
                n => Err(CoclError::numeric(format!("{n} self-check(s) failed"))),
            }
        }
        Command::GenData(args) => {
            let config = resolve_config(&args)?;
            for &seed in &config.seeds {
                let data = Datasets::generate(&config.dataset, seed)?;
                let dir = config.output.dir.join(format!("seed{seed}"));
                create_dir(&dir)?;
                write_csv(&data.id_train, &dir.join("id_train.csv"))?;
                write_csv(&data.id_test, &dir.join("id_test.csv"))?;
                write_csv(&data.aux_ood, &dir.join("aux_ood.csv"))?;
                for (kind, set) in &data.test_ood {
                    write_csv(set, &dir.join(format!("ood_{kind}.csv")))?;
                }
            }
            eprintln!("wrote {} seed(s) under {}", config.seeds.len(), config.output.dir.display());
            Ok(())
        }
        Command::Eval(args) => eval(&args),
    }
}

fn resolve_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path, args.preset)?,
        None => ExperimentConfig::preset(args.preset.unwrap_or(Preset::Desk)),
    };
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    if let Some(format) = args.format {
        config.output.format = format;
    }
    if args.tcpl_literal {
        config.train.tcpl_form = TcplForm::Literal;
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoclError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CoclError::io(path, e))
}

/// The fully resolved config, so a run can be repeated from its output.
fn write_config(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.json"), &(config.to_json_pretty() + "\n"))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.logits).map_err(|e| CoclError::io(&args.logits, e))?;
    let rows = parse_logits_csv(&text).map_err(|e| CoclError::Parse {
        path: args.logits.clone(),
        message: e.to_string(),
    })?;
    let groups = designate_head_tail(&args.counts, args.head_pct, args.tail_pct)?;
    let calib = estimate_priors(&args.counts)?.with_tau(args.tau);
    let metrics = eval_logits(&rows, args.score, &calib, &groups, args.include_outlier)?;
    let body = match args.format {
        ReportFormat::Csv => split_metrics_csv(&metrics),
        ReportFormat::Json => split_metrics_json(&split_metrics_csv(&metrics)),
    };
    match &args.out {
        None => print!("{body}"),
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join(format!("eval.{}", args.format.extension()));
            write_file(&path, &body)?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Re-expresses the split CSV as `{"columns": [...], "rows": [[...], ...]}`
/// with the same 4-decimal strings, so both formats carry identical values.
fn split_metrics_json(csv: &str) -> String {
    let mut lines = csv.lines();
    let quote = |s: &str| format!("\"{s}\"");
    let columns: Vec<String> = lines.next().unwrap_or_default().split(',').map(quote).collect();
    let rows: Vec<String> = lines
        .map(|l| {
            let cells: Vec<String> = l
                .split(',')
                .enumerate()
                .map(|(i, v)| match (i, v) {
                    (0, _) => quote(v),
                    (_, "") => "null".to_string(),
                    _ => v.to_string(),
                })
                .collect();
            format!("    [{}]", cells.join(", "))
        })
        .collect();
    format!("{{\n  \"columns\": [{}],\n  \"rows\": [\n{}\n  ]\n}}\n", columns.join(", "), rows.join(",\n"))
}
