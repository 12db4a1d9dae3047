use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpcc_warmstart::bench::{
    cmd_experiment, cmd_run, BenchError, Experiment, RunConfig, VariantChoice, OUT_ENV,
};

#[derive(Parser)]
#[command(
    name = "mpcc-bench",
    version,
    about = "Closed-loop benchmark for MPCC with learning-aided warmstarts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (single episode or Monte Carlo).
    Run(Overrides),
    /// Run one of the bundled experiments: exp1, exp2 or exp3.
    Experiment {
        name: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    /// Start from this run config (JSON) instead of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario file or bundled scenario name (merge, overtake, crossing).
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(VariantChoice))]
    variant: Option<VariantChoice>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Solver time budget per call.
    #[arg(long = "t-max-s")]
    t_max_s: Option<f64>,
    /// Posterior samples per mode.
    #[arg(long)]
    samples: Option<usize>,
    /// Softmin temperature.
    #[arg(long)]
    lambda: Option<f64>,
    /// Maximum number of prediction modes.
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, BenchError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.scenario {
            c.scenario = v.clone();
        }
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if self.runs.is_some() {
            c.runs = self.runs;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.t_max_s {
            c.t_max_s = v;
        }
        if let Some(v) = self.samples {
            c.samples = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.modes {
            c.modes = v;
        }
        if let Some(v) = &self.out {
            c.out_dir = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(o) => o.resolve().and_then(|c| {
            if o.dump_config {
                print!("{}", c.to_json());
                return Ok(());
            }
            let s = cmd_run(&c)?;
            print!("{}", s.table.to_csv());
            eprintln!(
                "wrote {} files to {}",
                s.files.len() + 1,
                c.out_dir.display()
            );
            Ok(())
        }),
        Command::Experiment { name, overrides } => name.parse::<Experiment>().and_then(|exp| {
            let c = overrides.resolve()?;
            if overrides.dump_config {
                print!("{}", c.to_json());
                return Ok(());
            }
            let r = cmd_experiment(exp, &c)?;
            print!("{}", r.summary());
            eprintln!(
                "wrote artifacts to {}",
                c.out_dir.join(exp.to_string()).display()
            );
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
