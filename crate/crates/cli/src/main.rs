use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kelab_core::entropy::CoefficientMode;
use kelab_core::pipeline::{
    run_continual, run_measure, run_pretrain, run_report, run_resuscitate, ContinualArgs,
    ExperimentConfig, MeasureArgs, ResuscitateArgs,
};
use kelab_core::resuscitation::ResuscitationSpec;
use kelab_core::Error;

/// Knowledge-entropy experiments on a toy decoder.
#[derive(Parser)]
#[command(name = "kelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    AbsSwiglu,
    ReluGate,
}

impl From<Mode> for CoefficientMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::AbsSwiglu => CoefficientMode::AbsSwiglu,
            Mode::ReluGate => CoefficientMode::ReluGate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Inject {
    /// Paraphrase and once items per the configured rounds.
    All,
    /// Train on the new-domain corpus alone.
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, saving checkpoints and entropy at each fraction.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Knowledge, attention and next-token entropy of one checkpoint.
    Measure {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One document per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "mode", value_enum, default_values_t = [Mode::AbsSwiglu])]
        modes: Vec<Mode>,
        #[arg(long, default_value_t = 256)]
        n_instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Scale up-projection rows of the least active memory positions.
    Resuscitate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Coefficient statistics written by `measure`.
        #[arg(long)]
        stats: PathBuf,
        /// Percentile of positions to revive, 0..=100.
        #[arg(long)]
        p: f64,
        /// Amplifying factor.
        #[arg(long)]
        q: f64,
        #[arg(long)]
        cap: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Continue training on the shifted corpus with injected knowledge.
    Continual {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline model for K and P before training; the start checkpoint by default.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum)]
        inject: Option<Inject>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Merge run directories into one `series,x,y,run_id` CSV.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::DegenerateLayer { .. } => 3,
        Error::Io(_)
        | Error::CorruptHeader(_)
        | Error::Truncated { .. }
        | Error::MissingTensor(_)
        | Error::TensorShape { .. } => 4,
        _ => 2,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("KELAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "KELAB_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Pretrain { config, out, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
                Error::Config("no run directory: pass --out or set out_dir".into())
            })?;
            let run = run_pretrain(&cfg, &dir, force)?;
            for (f, r) in &run.reports {
                println!(
                    "fraction {f}: step {} H_knowledge {:.6} H_attention {:.6} H_next_token {:.6}",
                    r.step,
                    r.knowledge_total,
                    r.attention_total,
                    r.next_token.unwrap_or(f64::NAN)
                );
            }
            println!("final loss {:.6}", run.final_loss);
        }
        Command::Measure {
            checkpoint,
            corpus,
            vocab,
            modes,
            n_instances,
            seed,
            seq_len,
            out,
            force,
        } => {
            let args = MeasureArgs {
                checkpoint,
                corpus,
                vocab,
                modes: modes.into_iter().map(Into::into).collect(),
                n_instances,
                seed,
                seq_len,
            };
            for r in run_measure(&args, &out, force)? {
                println!(
                    "{}: H_knowledge {:.6} H_attention {:.6}",
                    r.mode, r.knowledge_total, r.attention_total
                );
            }
        }
        Command::Resuscitate {
            checkpoint,
            stats,
            p,
            q,
            cap,
            out,
            force,
        } => {
            let spec = ResuscitationSpec {
                multiplier_cap: cap,
                ..ResuscitationSpec::new(p, q)
            };
            let plan = run_resuscitate(
                &ResuscitateArgs {
                    checkpoint,
                    stats,
                    spec,
                },
                &out,
                force,
            )?;
            let n: usize = plan.layers.iter().map(|l| l.idx.len()).sum();
            println!(
                "scaled {n} up-projection rows over {} layers",
                plan.layers.len()
            );
        }
        Command::Continual {
            config,
            checkpoint,
            reference,
            inject,
            out,
            force,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(i) = inject {
                cfg.continual.inject = matches!(i, Inject::All);
            }
            let run = run_continual(
                &cfg,
                &ContinualArgs {
                    checkpoint,
                    reference,
                },
                &out,
                force,
            )?;
            for key in ["k_pt", "k_cl", "a", "p_pt", "p_cl", "f"] {
                println!("{key} = {:.6}", run.report.get(key).unwrap_or(f64::NAN));
            }
        }
        Command::Report { out, runs } => {
            let rows = run_report(&runs, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
