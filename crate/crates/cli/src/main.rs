use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use bh_cli::{commands, CliResult, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

/// Butterfly Hessian experiments.
#[derive(Parser)]
#[command(name = "bh", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a synthetic symmetric matrix and trace the average angle.
    SynthApprox(Common),
    /// Final angle as a function of the number of dominant eigenvalues.
    NmuSweep(Common),
    /// Learn a rotation with a single butterfly product.
    Rotation(Common),
    /// Learn the covariance of an IDX or CSV dataset.
    Covariance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// idx or csv; guessed from the file extension when omitted.
        #[arg(long)]
        format: Option<String>,
    },
    /// Gradient descent with a tracked Hessian model against plain GD.
    Optimize(Common),
    /// Operation counts and timings against a dense mat-vec.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra key=value setting, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::new(),
        };
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", s);
        }
        if let Some(o) = &self.out {
            cfg.set("out", o.display());
        }
        if let Some(n) = self.n {
            cfg.set("n", n);
        }
        if let Some(e) = self.epochs {
            cfg.set("epochs", e);
        }
        Ok(cfg)
    }
}

fn dispatch(command: Command) -> CliResult<Vec<String>> {
    match command {
        Command::SynthApprox(c) => commands::synth_approx(&c.config()?),
        Command::NmuSweep(c) => commands::nmu_sweep_cmd(&c.config()?),
        Command::Rotation(c) => commands::rotation(&c.config()?),
        Command::Covariance { common, dataset, format } => {
            let mut cfg = common.config()?;
            if let Some(d) = dataset {
                cfg.set("dataset", d.display());
            }
            if let Some(f) = format {
                cfg.set("format", f);
            }
            commands::covariance_cmd(&cfg)
        }
        Command::Optimize(c) => commands::optimize_cmd(&c.config()?),
        Command::Bench(c) => commands::bench_cmd(&c.config()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(lines) => {
            let mut out = std::io::stdout().lock();
            // a closed pipe is not an error of the run
            let _ = lines.iter().try_for_each(|l| writeln!(out, "{l}"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bh: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
