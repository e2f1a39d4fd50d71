use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kcf::config::{ExperimentConfig, Threshold};
use kcf::pipeline::{self, Stage, StageOutcome};
use kcf::Error;

#[derive(Parser)]
#[command(name = "kcf", version, about = "Koopman bilinear identification and LMI feedback synthesis")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Artifact directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Factorization threshold (a number, "auto" or "inf"); overrides the
    /// config. It enters the config hash, so pass it to every later stage too.
    #[arg(long)]
    eps_h: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration template with documented defaults.
    Init {
        /// Destination file.
        #[arg(long, short, default_value = "kcf.json")]
        config: PathBuf,
        /// single_pendulum, double_pendulum or smoke.
        #[arg(long, default_value = "single_pendulum")]
        preset: String,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Generate the motor-babbling dataset.
    Babble(Common),
    /// Select the bilinear features and fit the measurement matrix H.
    Factorize(Common),
    /// Fit the bilinear Koopman model (needs `factorize` output).
    Identify(Common),
    /// Synthesize the feedback gain.
    Synthesize(Common),
    /// Closed-loop evaluation on the true plant.
    Evaluate(Common),
    /// All stages, skipping those already done for this configuration.
    Pipeline(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(e) = &common.eps_h {
        cfg.factorization.eps_h = e.parse::<Threshold>()?;
        cfg.validate()?;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    let out = cfg.output_dir();
    Ok((cfg, out))
}

fn print_outcome(o: &StageOutcome) {
    println!("[{}]{}", o.stage.name(), if o.cached { " (cached)" } else { "" });
    for line in &o.summary {
        println!("  {line}");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let stage = |common: &Common, stage: Stage| -> Result<(), Error> {
        let (cfg, out) = load(common)?;
        println!("config {} -> {}", &cfg.config_hash()[..12], out.display());
        print_outcome(&pipeline::run_stage(stage, &cfg, &out)?);
        Ok(())
    };
    match cli.command {
        Command::Init { config, preset, force } => {
            let cfg = ExperimentConfig::preset(&preset)?;
            if config.exists() && !force {
                return Err(Error::Config(format!("{} exists; pass --force to overwrite", config.display())));
            }
            std::fs::write(&config, cfg.to_json_pretty() + "\n")?;
            println!("wrote {} (preset {preset}, config hash {})", config.display(), &cfg.config_hash()[..12]);
            Ok(())
        }
        Command::Babble(c) => stage(&c, Stage::Babble),
        Command::Factorize(c) => stage(&c, Stage::Factorize),
        Command::Identify(c) => stage(&c, Stage::Identify),
        Command::Synthesize(c) => stage(&c, Stage::Synthesize),
        Command::Evaluate(c) => stage(&c, Stage::Evaluate),
        Command::Pipeline(c) => {
            let (cfg, out) = load(&c)?;
            println!("config {} -> {}", &cfg.config_hash()[..12], out.display());
            pipeline::run_pipeline(&cfg, &out, print_outcome)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
