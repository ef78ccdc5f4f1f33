use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use palu_core::accounting::{recon_macs_table, weight_ratio};
use palu_core::config::PipelineConfig;
use palu_core::pipeline::{self, Stage};
use palu_core::quant::round_half_away;
use palu_core::{PaluError, Result};

/// Low-rank KV-cache compression toolkit.
///
/// Without --config a small synthetic model is used. Exit codes: 0 success,
/// 1 validation error, 2 numerical failure, 3 golden mismatch. Set
/// PALU_THREADS to cap worker threads.
#[derive(Parser, Debug)]
#[command(name = "palu", version)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Compare against an embedded golden block (known: table2).
    #[arg(long, global = true, value_name = "NAME")]
    golden: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic model.
    GenModel,
    /// Estimate Fisher scores for every key/value target.
    Fisher,
    /// Turn scores and the budget into a rank plan.
    Allocate,
    /// Factor wk/wv per the plan.
    Decompose,
    /// Fold Hadamard rotations into the factors.
    Rotate,
    /// Quantize calibration latents and report the error.
    Quantize,
    /// Decode a seeded stream through the reference and low-rank paths.
    Run,
    /// All stages in order.
    Pipeline,
    /// Accounting tables and stage summaries.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Factor-pair storage ratio (m·r + r·n)/(m·n) for an m × n target.
    #[arg(long, num_args = 3, value_names = ["M", "N", "R"])]
    weight_ratio: Option<Vec<f64>>,
    /// Use R as given instead of rounding it to an integer rank.
    #[arg(long, requires = "weight_ratio")]
    exact_r: bool,
    /// Per-token reconstruction MACs of M-, G- and J-LRD at equal latent width.
    #[arg(long)]
    recon_macs: bool,
    #[arg(long, default_value_t = 4, requires = "recon_macs")]
    heads: usize,
    #[arg(long, default_value_t = 8, requires = "recon_macs")]
    head_dim: usize,
    #[arg(long, default_value_t = 16, requires = "recon_macs")]
    total_rank: usize,
    #[arg(long, default_value_t = 2, requires = "recon_macs")]
    group_size: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

fn trim_float(x: f64) -> String {
    let s = format!("{x:.10}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PALU_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| PaluError::Config(format!("PALU_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PaluError::Config(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk_default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn report(cfg: &PipelineConfig, args: &ReportArgs) -> Result<String> {
    let mut out = String::new();
    if let Some(v) = &args.weight_ratio {
        let (m, n, r) = (v[0], v[1], v[2]);
        if !(m > 0.0 && n > 0.0 && r >= 0.0) || [m, n, r].iter().any(|x| !x.is_finite()) {
            return Err(PaluError::Config("weight ratio needs positive m, n and non-negative r".into()));
        }
        let r = if args.exact_r { r } else { round_half_away(r) };
        out.push_str(&format!(
            "weight_ratio m={} n={} r={} -> {}\n",
            trim_float(m),
            trim_float(n),
            trim_float(r),
            trim_float(weight_ratio(m, n, r))
        ));
    }
    if args.recon_macs {
        out.push_str(&recon_macs_table(args.heads, args.head_dim, args.total_rank, args.group_size)?);
    }
    if !out.is_empty() {
        return Ok(out);
    }
    let r = pipeline::report(cfg)?;
    Ok(match args.format {
        Format::Text => r.text,
        Format::Json => serde_json::to_string_pretty(&r)? + "\n",
        Format::Csv => std::fs::read_to_string(cfg.out_dir.join(pipeline::REPORT_CSV))?,
    })
}

fn execute(cli: &Cli) -> Result<String> {
    configure_threads()?;
    let cfg = load_config(cli)?;
    let stage = |s| pipeline::run_stage(s, &cfg);
    let mut out = match &cli.command {
        Command::GenModel => stage(Stage::GenModel)?,
        Command::Fisher => stage(Stage::Fisher)?,
        Command::Allocate => stage(Stage::Allocate)?,
        Command::Decompose => stage(Stage::Decompose)?,
        Command::Rotate => stage(Stage::Rotate)?,
        Command::Quantize => stage(Stage::Quantize)?,
        Command::Run => stage(Stage::Run)?,
        Command::Pipeline => pipeline::run_pipeline(&cfg)?,
        Command::Report(args) => report(&cfg, args).map_err(|e| e.in_stage("report"))?,
    };
    if let Some(name) = &cli.golden {
        pipeline::golden(name, &cfg)?;
        out.push_str(&format!("golden {name}: match\n"));
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
