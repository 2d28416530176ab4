use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use artn::gradcheck;
use artn::run::{self, Invocation, SweepKind};
use artn::Error;

#[derive(Parser)]
#[command(
    name = "artn",
    version,
    about = "Adversarial residual transform networks for domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Config file, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lambda=0.6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "artn-out")]
    out: PathBuf,
    /// Seed; beats ARTN_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn invocation(&self) -> Invocation {
        Invocation {
            config: self.config.clone(),
            sets: self.sets.clone(),
            seed: self.seed,
            env_seed: None,
        }
        .with_process_env()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoint and manifest.
    Train(RunArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Op name or `all`.
        #[arg(default_value = "all")]
        scope: String,
    },
    /// Noise, lambda or regularizer-ablation sweep over the configured seeds.
    Sweep {
        /// noise | lambda | ablation
        kind: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic domain pair as IDX or sparse text files.
    Gendata(RunArgs),
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn error_exit(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config { .. } | Error::UnknownKey { .. } | Error::InvalidArgument(_) | Error::Parse { .. } => {
            ExitCode::from(EXIT_USAGE)
        }
        _ => ExitCode::from(EXIT_FAILURE),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => error_exit(&e),
    }
}

fn execute(command: Command) -> artn::Result<ExitCode> {
    match command {
        Command::Train(args) => {
            let cfg = run::resolve_config(&args.invocation())?;
            let s = run::cmd_train(&cfg, &args.out)?;
            let last = s.records.last();
            println!(
                "trained {} for {} steps; final total {:.6}; source acc {:.4}{}",
                cfg.train.method,
                s.records.len(),
                last.map_or(f64::NAN, |r| r.total),
                s.source_acc,
                s.target_acc.map(|a| format!("; target acc {a:.4}")).unwrap_or_default()
            );
            println!("artifacts in {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { scope } => {
            let (ok, text) = run::cmd_gradcheck(&scope, &gradcheck::registry())?;
            print!("{text}");
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            })
        }
        Command::Sweep { kind, run: args } => {
            let kind = SweepKind::parse(&kind).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown sweep `{kind}`; expected noise, lambda or ablation"))
            })?;
            let cfg = run::resolve_config(&args.invocation())?;
            let s = run::cmd_sweep(kind, &cfg, &args.out)?;
            print!("{}", s.table);
            println!("{}/{} cells succeeded", s.cells_ok, s.cells_total);
            Ok(if s.cells_ok > 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            })
        }
        Command::Gendata(args) => {
            let cfg = run::resolve_config(&args.invocation())?;
            let s = run::cmd_gendata(&cfg, &args.out)?;
            println!(
                "wrote {} source and {} target rows to {}",
                s.description.source_rows,
                s.description.target_rows,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
