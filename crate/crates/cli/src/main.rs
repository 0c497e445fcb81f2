use std::path::PathBuf;
use std::process::ExitCode;

use chanforge_cli::{commands, exit, Mode, RunConfig, Workdir};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Simulate,
    Pretrain,
    Finetune,
    Generate,
    Evaluate,
    Sweep,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simulate => Mode::Simulate,
            ModeArg::Pretrain => Mode::Pretrain,
            ModeArg::Finetune => Mode::Finetune,
            ModeArg::Generate => Mode::Generate,
            ModeArg::Evaluate => Mode::Evaluate,
            ModeArg::Sweep => Mode::Sweep,
        }
    }
}

/// Terahertz channel simulation, transformer GAN training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "chanforge", version)]
struct Args {
    mode: ModeArg,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory relative paths resolve against; defaults to the config
    /// file's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = RunConfig::load(&args.config).and_then(|mut cfg| {
        cfg.apply_seed(args.seed);
        let dir = match &args.out {
            Some(d) => d.clone(),
            None => args.config.parent().map(PathBuf::from).unwrap_or_default(),
        };
        std::fs::create_dir_all(&dir).map_err(|e| chanforge_cli::CliError::io(&dir, e))?;
        commands::run(args.mode.into(), &cfg, &Workdir::new(dir))
    });
    match result {
        Ok(()) => ExitCode::from(exit::SUCCESS as u8),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
