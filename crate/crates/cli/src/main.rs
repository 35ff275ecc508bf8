use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use salt_cli::{ExperimentConfig, Role, Workspace};

#[derive(Parser)]
#[command(name = "salt", version, about = "Distillation-then-pretraining experiments on synthetic corpora")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long, global = true, default_value = "salt.toml")]
    config: PathBuf,
    /// Output root; overrides SALT_OUT and the config's out_dir.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Config override such as `llm.train.steps=500`; repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// No progress lines.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample (or cut) the train and held-out corpora.
    GenData,
    /// Train one role.
    Train {
        #[arg(long)]
        role: Role,
    },
    /// Score training sequences with the early small-model checkpoint.
    Score,
    /// Keep the top-m scored sequences.
    Select,
    /// Held-out and per-bucket metrics for trained roles.
    Eval {
        /// Roles to evaluate; defaults to every role with a checkpoint.
        #[arg(long, value_delimiter = ',')]
        roles: Vec<Role>,
    },
    /// Comparison table and training-curve CSVs.
    Report,
    /// Risk, bound and variance diagnostics against the synthetic source.
    Diagnose,
    /// gen-data, train slm, score/select, train roles, eval, report, diagnose.
    Run {
        #[arg(long, value_delimiter = ',', default_value = "baseline,salt,salt_ds,rkd")]
        roles: Vec<Role>,
    },
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(&cli.common.config, &cli.common.set)?;
    let mut ws = Workspace::resolve(cfg, cli.common.out);
    ws.quiet = cli.common.quiet;
    match cli.cmd {
        Cmd::GenData => {
            ws.gen_data()?;
        }
        Cmd::Train { role } => {
            let s = ws.train(role)?;
            if let Some(h) = s.final_heldout {
                println!("{role}: accuracy {:.4}  log-perplexity {:.4}", h.accuracy, h.log_perplexity);
            }
        }
        Cmd::Score => {
            ws.score()?;
        }
        Cmd::Select => {
            ws.select()?;
        }
        Cmd::Eval { roles } => {
            let roles = if roles.is_empty() { Role::ALL.to_vec() } else { roles };
            ws.eval(&roles)?;
        }
        Cmd::Report => print!("{}", ws.report()?),
        Cmd::Diagnose => {
            let r = ws.diagnose()?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::Run { roles } => ws.run_all(&roles)?,
        Cmd::ShowConfig => print!("{}", ws.cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
