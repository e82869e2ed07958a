use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use windbo::cli::{cmd_run, cmd_subsets, cmd_synth, cmd_tune, CliError, ExperimentConfig, SynthOptions};

#[derive(Parser)]
#[command(name = "windbo", version, about = "Wind-informed Bayesian optimisation over gridded concentration images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic plume corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        count: usize,
        #[arg(long, default_value_t = 28)]
        width: usize,
        #[arg(long, default_value_t = 28)]
        height: usize,
        /// Shared wind angle in radians; random per image when omitted.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 1)]
        sources: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Filter the image directory and write subset manifests.
    Subsets(Common),
    /// Fit hyperparameter priors on the tuning subset and report BIC.
    Tune(Common),
    /// Run BO for every configured kernel plus the random baseline.
    Run {
        #[command(flatten)]
        common: Common,
        /// Keep traces already present in the output directory.
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set n_iters=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[arg(long)]
    manifest_dir: Option<PathBuf>,
    #[arg(long)]
    prior_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated kernel list.
    #[arg(long)]
    kernels: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let named = [
            ("image_dir", self.image_dir.as_ref().map(|p| p.display().to_string())),
            ("manifest_dir", self.manifest_dir.as_ref().map(|p| p.display().to_string())),
            ("prior_dir", self.prior_dir.as_ref().map(|p| p.display().to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
            ("kernels", self.kernels.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            out,
            count,
            width,
            height,
            gamma,
            sources,
            noise,
            seed,
        } => {
            let opts = SynthOptions {
                count,
                width,
                height,
                gamma,
                n_sources: sources,
                noise_level: noise,
                seed,
            };
            let ids = cmd_synth(&out, &opts)?;
            println!("wrote {} images to {}", ids.len(), out.display());
        }
        Command::Subsets(common) => {
            let cfg = common.resolve()?;
            let bundle = cmd_subsets(&cfg.image_dir, &cfg.manifest_dir, cfg.missing_threshold)?;
            if bundle.scaled {
                eprintln!("warning: corpus is below the full protocol size; subsets were scaled down");
            }
            for (name, ids) in bundle.subsets() {
                println!("{name} {}", ids.len());
            }
        }
        Command::Tune(common) => {
            let cfg = common.resolve()?;
            let report = cmd_tune(&cfg)?;
            for k in &report.degenerate {
                eprintln!("warning: {k} prior is degenerate (fitted from a single image)");
            }
            println!("tuned {} images; priors in {}", report.bic.len(), cfg.prior_dir.display());
            print!("{}", report.table());
        }
        Command::Run { common, resume } => {
            let cfg = common.resolve()?;
            let report = cmd_run(&cfg, resume)?;
            for id in &report.failed {
                eprintln!("warning: image {id} failed");
            }
            println!(
                "completed {} images ({} failed, {} traces reused); results in {}",
                report.completed.len(),
                report.failed.len(),
                report.resumed,
                cfg.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
