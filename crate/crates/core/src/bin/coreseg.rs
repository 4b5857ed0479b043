use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coreseg::experiment::{toy_config, ExperimentConfig, Mode, Pipeline, ScenarioConfig};
use coreseg::{CoreSegError, Result};

/// Open-set semantic segmentation by conditional reconstruction.
#[derive(Parser)]
#[command(name = "coreseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or index) the dataset and fit channel statistics.
    SynthData(Common),
    /// Train the closed-set U-net.
    TrainClosed(Common),
    /// Train the conditional autoencoder against the frozen backbone.
    TrainCae(Common),
    /// Sweep all class conditionings over validation and test patches.
    Infer(Common),
    /// Pick the error quantile threshold on validation pixels.
    Calibrate(Common),
    /// Fuse, score and render the test predictions.
    Evaluate(Common),
    /// Run every stage of every scenario and write the summary.
    RunSuite(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; the built-in toy config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict a per-scenario stage to one scenario (default: all).
    #[arg(long)]
    scenario: Option<String>,
    /// Output directory (default: runs/<config name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse cached stage artifacts that are still valid.
    #[arg(long)]
    resume: bool,
}

impl Common {
    fn pipeline(&self) -> Result<Pipeline> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => toy_config(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
        let p = Pipeline::new(config, out, self.resume);
        p.write_config()?;
        Ok(p)
    }

    fn scenarios(&self, p: &Pipeline) -> Result<Vec<ScenarioConfig>> {
        match &self.scenario {
            Some(name) => Ok(vec![p.config.scenario(name)?.clone()]),
            None => Ok(p.config.scenarios.clone()),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, stage): (&Common, fn(&Pipeline, &ScenarioConfig) -> Result<()>) = match &cli.command {
        Command::SynthData(c) => {
            let m = c.pipeline()?.data(Mode::Stage)?;
            println!("data fingerprint {}", m.fingerprint);
            return Ok(());
        }
        Command::RunSuite(c) => {
            let p = c.pipeline()?;
            let suite = match &c.scenario {
                Some(name) => {
                    let only = ExperimentConfig {
                        scenarios: vec![p.config.scenario(name)?.clone()],
                        ..p.config.clone()
                    };
                    Pipeline::new(only, &p.out, p.resume).run_suite()?
                }
                None => p.run_suite()?,
            };
            print!("{}", suite.to_csv());
            println!("summary: {}", p.out.join("summary.html").display());
            if let Some((name, err)) = suite.failures.first() {
                return Err(CoreSegError::Stage {
                    stage: format!("scenario {name}"),
                    source: Box::new(CoreSegError::Invalid(err.clone())),
                });
            }
            return Ok(());
        }
        Command::TrainClosed(c) => (c, |p, s| p.closed(s, Mode::Stage).map(drop)),
        Command::TrainCae(c) => (c, |p, s| p.cae(s, Mode::Stage).map(drop)),
        Command::Infer(c) => (c, |p, s| p.infer(s, Mode::Stage).map(drop)),
        Command::Calibrate(c) => (c, |p, s| p.calibrate(s, Mode::Stage).map(drop)),
        Command::Evaluate(c) => (c, |p, s| {
            let (_, report) = p.evaluate(s, Mode::Stage)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }),
    };
    let p = common.pipeline()?;
    for s in common.scenarios(&p)? {
        stage(&p, &s)?;
        log::info!("scenario {} done", s.name);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
