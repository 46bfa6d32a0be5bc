use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use ivpb_cli::commands;
use ivpb_cli::config::ConfigFile;

#[derive(Parser)]
#[command(name = "ivpb", version, about = "Ionic Vlasov-Poisson-Boltzmann solver near equilibrium")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Seed for randomized trial functions.
    #[arg(long, global = true, value_name = "U64", default_value_t = 0)]
    seed: u64,
    /// Continue a run from a snapshot.
    #[arg(long, global = true, value_name = "SNAPSHOT")]
    resume: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Advance the initial data and write the time series.
    Run,
    /// Verify operator and solver invariants; exits nonzero on failure.
    Check,
    /// Solve the Poisson problem for a density.
    Poisson,
    /// Report the coercivity constant and null-space structure.
    Spectrum,
}

fn execute(cli: &Cli) -> Result<bool> {
    let c = &cli.common;
    let cfg = match &c.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if c.resume.is_some() && !matches!(cli.command, Command::Run) {
        anyhow::bail!("--resume only applies to the run subcommand");
    }
    match cli.command {
        Command::Run => {
            let o = commands::run(&cfg, &c.out, c.resume.as_deref())?;
            println!("{:?}: {} steps of dt = {:e}, {} rows in {}", o.status, o.steps, o.dt, o.rows, o.csv_path.display());
            Ok(true)
        }
        Command::Check => {
            let rows = commands::check(&cfg, &c.out, c.seed)?;
            print!("{}", commands::format_check(&rows));
            let failed = rows.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                eprintln!("{failed} invariant(s) failed");
            }
            Ok(failed == 0)
        }
        Command::Poisson => {
            let (_, st) = commands::poisson(&cfg, &c.out)?;
            println!(
                "newton_iters = {}, residual = {:e}, neutrality = {:e}",
                st.newton_iters,
                st.residual_norm,
                st.neutrality_residual()
            );
            Ok(true)
        }
        Command::Spectrum => {
            let s = commands::spectrum(&cfg, &c.out, c.seed)?;
            print!("{}", commands::format_spectrum(&s));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.common.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(e.into()),
        },
        None => execute(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
