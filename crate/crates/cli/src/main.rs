//! Batch front end for survival-transport analyses.
//!
//! Subcommands: `diagnose-ph` (Schoenfeld proportionality tests per arm),
//! `emulate` (generate an external sample from summary statistics),
//! `transport` (run the requested estimators; bootstrap inlined via
//! `--boot`), and `bootstrap` (transport with the bootstrap forced on).
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use survtrans::pipeline::{run_emulate, run_ph_diagnostics, run_pipeline, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "survtrans", version, about = "Transport trial survival results to external target populations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Schoenfeld-residual proportionality diagnostics per trial arm
    DiagnosePh(CommonArgs),
    /// Emulate an external sample from the configured summary statistics
    Emulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of records to draw (default: the spec's sample size)
        #[arg(long)]
        m: Option<usize>,
        /// Output file (default: <out dir>/emulated.csv)
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Run the transport estimators and write tables, curves, and manifest
    Transport(CommonArgs),
    /// Transport with the nonparametric bootstrap forced on
    Bootstrap(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory override
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Bootstrap replicates override
    #[arg(long)]
    boot: Option<usize>,
    /// Comma-separated estimator tags (e.g. OR_PH,CW,ACW_HARE)
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Horizon override
    #[arg(long)]
    horizon: Option<f64>,
    /// Arm labels as `experimental,control`
    #[arg(long)]
    arms: Option<String>,
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, PipelineError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        PipelineError::Config(format!("cannot read `{}`: {e}", args.config.display()))
    })?;
    let mut config: RunConfig = toml::from_str(&text)
        .map_err(|e| PipelineError::Config(format!("invalid config: {e}")))?;

    // precedence: flag > environment > config file
    if let Ok(dir) = std::env::var("SURVTRANS_OUT") {
        if !dir.is_empty() {
            config.analysis.output_dir = PathBuf::from(dir);
        }
    }
    if let Some(out) = &args.out {
        config.analysis.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.analysis.seed = seed;
    }
    if let Some(boot) = args.boot {
        config.analysis.bootstrap = boot;
    }
    if let Some(est) = &args.estimators {
        config.analysis.estimators = est.clone();
    }
    if let Some(h) = args.horizon {
        config.analysis.horizon = h;
    }
    if let Some(arms) = &args.arms {
        let parts: Vec<&str> = arms.split(',').collect();
        if parts.len() != 2 {
            return Err(PipelineError::Config(
                "expected --arms <experimental,control>".into(),
            ));
        }
        config.arms.experimental = parts[0].trim().to_string();
        config.arms.control = parts[1].trim().to_string();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::DiagnosePh(common) => {
            let config = load_config(&common)?;
            let path = run_ph_diagnostics(&config)?;
            println!("wrote {}", path.display());
        }
        Command::Emulate { common, m, out_file } => {
            let config = load_config(&common)?;
            let out_path = out_file
                .unwrap_or_else(|| config.analysis.output_dir.join("emulated.csv"));
            let sample = run_emulate(&config, m, &out_path)?;
            for note in &sample.notes {
                eprintln!("note: {note}");
            }
            println!("wrote {} ({} records)", out_path.display(), sample.len());
        }
        Command::Transport(common) => {
            let config = load_config(&common)?;
            emit_run(&config)?;
        }
        Command::Bootstrap(common) => {
            let mut config = load_config(&common)?;
            if config.analysis.bootstrap < 2 {
                config.analysis.bootstrap = 200;
            }
            emit_run(&config)?;
        }
    }
    Ok(())
}

fn emit_run(config: &RunConfig) -> Result<(), PipelineError> {
    let outputs = run_pipeline(config)?;
    println!(
        "{:<10} {:>8} {:>8} {:>8} {:>10} {:>10}",
        "estimator", "s1", "s0", "tate", "ci_lower", "ci_upper"
    );
    for (tag, est) in &outputs.results.tates {
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>10} {:>10}",
            tag.to_string(),
            est.survival_treated,
            est.survival_control,
            est.tate,
            est.ci_lower.map_or("-".into(), |v| format!("{v:.4}")),
            est.ci_upper.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    for (label, t) in &outputs.ph_tests {
        println!(
            "ph test {label}: global p = {:.4} (transform {})",
            t.global_p, t.time_transform_tag
        );
    }
    println!("manifest: {}", outputs.manifest_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
