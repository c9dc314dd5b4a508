mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::*;
use config::*;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "relay",
    about = "Translate by relaying a source-language model's hidden states \
             through a trained bridge into a target-language model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config for the command.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain one monolingual language model.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the bridge (and adapters per flags) on a parallel corpus.
    TrainBridge {
        #[command(flatten)]
        common: Common,
        /// Bridge variant override: fc | ca | caq.
        #[arg(long)]
        bridge: Option<String>,
        /// Attach adapters to the source-side model.
        #[arg(long)]
        finetune_a: bool,
        /// Attach adapters to the target-side model.
        #[arg(long)]
        finetune_b: bool,
    },
    /// Translate a file line by line with a relay checkpoint.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Output file (default: <out>/output.txt).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Beam width override (beam search when > 1).
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score hypotheses (or decode a checkpoint) against references.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Pre-decoded hypotheses, one per line.
        #[arg(long)]
        hyp: Option<PathBuf>,
        /// Source sentences to decode (needs a checkpoint in the config).
        #[arg(long)]
        src: Option<PathBuf>,
        /// Reference translations, one per line.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Run one ablation sweep: finetune-grid | data-size | mapping-variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
    },
    /// Generate the synthetic language pair with its exact oracle.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn apply_beam(decode: &mut relay_core::decode::DecodeSettings, beam: Option<usize>) {
    if let Some(w) = beam {
        decode.beam_width = w;
        decode.strategy = if w > 1 {
            relay_core::decode::Strategy::Beam
        } else {
            relay_core::decode::Strategy::Greedy
        };
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { common } => {
            let mut cfg: PretrainConfig = load_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cmd_pretrain(cfg, &common.out)
        }
        Command::TrainBridge {
            common,
            bridge,
            finetune_a,
            finetune_b,
        } => {
            let mut cfg: TrainBridgeConfig = load_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(b) = bridge {
                cfg.bridge.variant = parse_bridge_variant(&b)?;
            }
            if finetune_a {
                cfg.finetune_a = true;
            }
            if finetune_b {
                cfg.finetune_b = true;
            }
            cmd_train_bridge(cfg, &common.out)
        }
        Command::Translate {
            common,
            input,
            output,
            beam,
        } => {
            let mut cfg: TranslateConfig = load_config(&common.config)?;
            apply_beam(&mut cfg.decode, beam);
            let output = output.unwrap_or_else(|| common.out.join("output.txt"));
            cmd_translate(cfg, &input, &output, &common.out)
        }
        Command::Evaluate {
            common,
            hyp,
            src,
            refs,
            beam,
        } => {
            let mut cfg: EvaluateConfig = load_config(&common.config)?;
            apply_beam(&mut cfg.decode, beam);
            cmd_evaluate(cfg, hyp.as_deref(), src.as_deref(), &refs, &common.out)
        }
        Command::Ablate { common, axis } => {
            let mut cfg: AblateConfig = load_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cmd_ablate(cfg, &axis, &common.out)
        }
        Command::GenData { common } => {
            let mut cfg: GenDataConfig = load_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cmd_gen_data(cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // core errors carry their exit class; config/data problems
            // surfaced as anyhow strings keep the same convention
            let code = if let Some(core) = err.downcast_ref::<relay_core::Error>() {
                core.exit_code()
            } else if err.to_string().contains("config error")
                || err.to_string().contains("data error")
            {
                2
            } else {
                1
            };
            ExitCode::from(code as u8)
        }
    }
}
