use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use misret::cli::{
    cmd_eval, cmd_gen_data, cmd_pretrain_lm, cmd_stitch_demo, cmd_sweep, cmd_train, TrainFlags,
};
use misret::config::load_config;
use misret::error::Error;
use misret::model::{EmbedKind, FreezeMode};

#[derive(Parser)]
#[command(
    name = "misret",
    about = "Offline RL recommender with maximal in-support return search and an LM prior"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the training dataset (or the stitching toy) plus sidecar.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Emit the two-trajectory stitching toy dataset instead.
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the character-level LM prior checkpoint.
    PretrainLm {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the policy (optionally an ablated variant).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random init + auxiliary language loss off.
        #[arg(long)]
        ablate_lm: bool,
        /// Maximal-return head off (fixed full-length history at eval).
        #[arg(long)]
        ablate_max: bool,
        /// Embedding kind override: mlp | linear.
        #[arg(long)]
        embed: Option<String>,
        /// Fine-tuning mode override: lora | frozen | full.
        #[arg(long)]
        freeze: Option<String>,
        /// Run train+eval once per value: --sweep model.t_max=5,10,15,20,25
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Evaluate a checkpoint on parallel test environments.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episodes per environment.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// End-to-end trajectory-stitching demonstration on the toy MDP.
    StitchDemo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn parse_embed(s: &str) -> Result<EmbedKind, Error> {
    match s {
        "mlp" => Ok(EmbedKind::Mlp),
        "linear" => Ok(EmbedKind::Linear),
        other => Err(Error::InvalidArgument(format!(
            "--embed must be mlp or linear, got {other}"
        ))),
    }
}

fn parse_freeze(s: &str) -> Result<FreezeMode, Error> {
    match s {
        "lora" => Ok(FreezeMode::Lora),
        "frozen" => Ok(FreezeMode::Frozen),
        "full" => Ok(FreezeMode::Full),
        other => Err(Error::InvalidArgument(format!(
            "--freeze must be lora, frozen, or full, got {other}"
        ))),
    }
}

fn run() -> Result<u8, Error> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenData { config, toy, force } => {
            let cfg = load_config(config.as_deref(), &[])?;
            println!("config digest {}", cfg.digest());
            cmd_gen_data(&cfg, toy, force)?;
            Ok(0)
        }
        Cmd::PretrainLm { config } => {
            let cfg = load_config(config.as_deref(), &[])?;
            println!("config digest {}", cfg.digest());
            cmd_pretrain_lm(&cfg)?;
            Ok(0)
        }
        Cmd::Train {
            config,
            ablate_lm,
            ablate_max,
            embed,
            freeze,
            sweep,
        } => {
            let flags = TrainFlags {
                ablate_lm,
                ablate_max,
                embed: embed.as_deref().map(parse_embed).transpose()?,
                freeze: freeze.as_deref().map(parse_freeze).transpose()?,
            };
            if let Some(spec) = sweep {
                let (key, values) = spec.split_once('=').ok_or_else(|| {
                    Error::InvalidArgument(
                        "--sweep expects key=v1,v2,... (e.g. search.delta=2,4,6,8)".into(),
                    )
                })?;
                let values: Vec<String> =
                    values.split(',').map(|v| v.trim().to_string()).collect();
                cmd_sweep(config.as_deref(), key, &values, &flags)?;
                return Ok(0);
            }
            let cfg = load_config(config.as_deref(), &[])?;
            println!("config digest {}", cfg.digest());
            cmd_train(&cfg, &flags)?;
            Ok(0)
        }
        Cmd::Eval {
            config,
            checkpoint,
            episodes,
        } => {
            let cfg = load_config(config.as_deref(), &[])?;
            println!("config digest {}", cfg.digest());
            cmd_eval(&cfg, checkpoint.as_deref(), episodes)?;
            Ok(0)
        }
        Cmd::StitchDemo { config, seeds } => {
            let cfg = load_config(config.as_deref(), &[])?;
            println!("config digest {}", cfg.digest());
            let results = cmd_stitch_demo(&cfg, seeds)?;
            if results.iter().all(|r| r.pass) {
                Ok(0)
            } else {
                Ok(3)
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e @ Error::NanLoss { .. }) => {
            eprintln!("numerical failure: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
