use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use versatile_ffn::accounting::{render_csv, render_table};
use versatile_ffn::commands::{cmd_account, cmd_chart, cmd_eval, cmd_gen_data, cmd_train};
use versatile_ffn::config::RunConfig;
use versatile_ffn::eval::EvalReport;
use versatile_ffn::Error;

/// Exit status for command-line usage errors.
const USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "vffn", version, about = "Train, evaluate and account VersatileFFN language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate in inference mode on the held-out split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter and FFN FLOPs budget table.
    Account {
        #[arg(long)]
        config: PathBuf,
        /// Eval report whose measured loop statistics feed the last row.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic easy/hard corpus and its label sidecar.
    GenData {
        /// Takes the `synth_*` keys from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bytes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the loss curve and loops-per-layer bars to SVG.
    Chart {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

fn load(config: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable report")
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let mut cfg = load(&config, seed)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let summary = cmd_train(&cfg, checkpoint.as_deref())?;
            println!("{}", json(&summary));
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = load(&config, seed)?;
            let report = json(&cmd_eval(&cfg, checkpoint.as_deref())?);
            if let Some(out) = out {
                std::fs::write(out, format!("{report}\n"))?;
            }
            println!("{report}");
        }
        Command::Account {
            config,
            report,
            format,
            out,
        } => {
            let cfg = load(&config, None)?;
            let runtime = match report {
                Some(path) => {
                    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(&path)?)
                        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                    Some((r.n_mean, r.p_frac))
                }
                None => None,
            };
            let rows = cmd_account(&cfg, runtime)?;
            let text = match format {
                Format::Table => render_table(&rows),
                Format::Csv => render_csv(&rows),
                Format::Json => json(&rows) + "\n",
            };
            if let Some(out) = out {
                std::fs::write(out, &text)?;
            }
            print!("{text}");
        }
        Command::GenData {
            config,
            seed,
            bytes,
            out,
        } => {
            let mut spec = match config {
                Some(path) => RunConfig::load(&path)?.synthetic(),
                None => Default::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(b) = bytes {
                spec.bytes = b;
            }
            println!("{}", json(&cmd_gen_data(&spec, &out)?));
        }
        Command::Chart { metrics, report, out } => cmd_chart(&metrics, report.as_deref(), &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let line = serde_json::json!({
                "error": "usage",
                "status": USAGE,
                "message": e.to_string().lines().next().unwrap_or_default(),
            });
            eprintln!("{line}");
            return ExitCode::from(USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
