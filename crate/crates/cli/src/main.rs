use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crate_alpha_cli::config::{parse_size, parse_variant, Overrides, RunConfig};
use crate_alpha_cli::diagnose::{diagnose, parse_layers, DiagnoseOptions};
use crate_alpha_cli::train::{ablate, ablation_table, eval, train};
use crate_alpha_cli::CliError;
use crate_alpha_core::model::ModelConfig;
use crate_alpha_core::Precision;

#[derive(Parser)]
#[command(
    name = "crate-alpha",
    version,
    about = "Train and inspect CRATE-α white-box transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// vanilla, oc, ocd or ocdr
    #[arg(long)]
    variant: Option<String>,
    /// tiny, small, base, large or huge
    #[arg(long)]
    size: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Test-set loss and accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train all four block variants with identical seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer rates and attention maps of a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated layer indices; all layers when omitted.
        #[arg(long, default_value = "")]
        layers: String,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Print the parameter count with a per-block breakdown.
    Paramcount {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

fn run_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: common.seed,
        precision: common.precision,
        out_dir: common.out.clone(),
        variant: common.variant.clone(),
        size: common.size.clone(),
    }
    .apply(&mut config)?;
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, resume } => {
            let s = train(&run_config(&common)?, resume.as_deref())?;
            println!(
                "{}: train loss {:.4} -> {:.4}, test accuracy {:.2}%, checkpoint {}",
                s.variant.short_name(),
                s.initial_train_loss,
                s.final_train_loss,
                100.0 * s.test_accuracy,
                s.final_checkpoint.display()
            );
        }
        Command::Eval { checkpoint } => {
            let (loss, acc) = eval(&checkpoint)?;
            println!("test loss {loss:.6}\ntest accuracy {:.4}", acc);
        }
        Command::Ablate { common } => {
            let rows = ablate(&run_config(&common)?)?;
            print!("{}", ablation_table(&rows));
        }
        Command::Diagnose {
            checkpoint,
            out,
            layers,
            samples,
            sample,
        } => {
            let out_dir = out.unwrap_or_else(|| checkpoint.with_extension("diag"));
            let o = diagnose(&DiagnoseOptions {
                checkpoint,
                out_dir,
                layers: parse_layers(&layers)?,
                samples,
                sample,
            })?;
            for (l, rc) in o.mean_rc.iter().enumerate() {
                println!("layer {l:>3}  mean Rc {rc:.4}");
            }
            println!("{}\n{}", o.srr_csv.display(), o.attention.display());
        }
        Command::Paramcount { common } => {
            let model = match &common.config {
                Some(_) => run_config(&common)?.model,
                None => {
                    let mut m = ModelConfig::preset(parse_size(common.size.as_deref().unwrap_or("base"))?);
                    if let Some(v) = &common.variant {
                        m.variant = parse_variant(v)?;
                    }
                    m
                }
            };
            model.validate()?;
            println!("{} {}", model.size_name, model.variant.short_name());
            println!("{}", model.breakdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
