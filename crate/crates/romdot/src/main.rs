use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use romdot::commands::{diagnose, invert, simulate, with_threads, Which};
use romdot::parallel::RayonBuilder;
use romdot::scenario::Scenario;
use romdot::CliResult;
use romdot_core::inversion::Mode;

#[derive(Parser)]
#[command(name = "romdot", version, about = "Reduced-order models for diffuse optical tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory (default: ./out)
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the scenario seed used for noise and sketches
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for candidate builds
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy measurements for the scenario's true anomaly
    Simulate { scenario: PathBuf },
    /// Recover the anomaly from simulated data
    Invert {
        scenario: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
    },
    /// Run one of the subspace and perturbation diagnostics
    Diagnose {
        scenario: PathBuf,
        #[arg(long, value_parser = parse_which)]
        which: Which,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

fn parse_which(s: &str) -> Result<Which, String> {
    s.parse()
}

fn load(path: &Path, seed: Option<u64>) -> CliResult<Scenario> {
    let mut sc = Scenario::from_path(path)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    Ok(sc)
}

fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out.clone();
    match cli.command {
        Command::Simulate { scenario } => {
            let sc = load(&scenario, cli.seed)?;
            let rep = with_threads(cli.threads, || simulate(&sc, &out))??;
            println!(
                "simulated {}x{} data, noise norm {:e}",
                rep.data.data.nrows(),
                rep.data.data.ncols(),
                rep.data.noise_norm
            );
        }
        Command::Invert { scenario, mode } => {
            let sc = load(&scenario, cli.seed)?;
            let rep = with_threads(cli.threads, || invert(&sc, mode, &out, &RayonBuilder))??;
            println!(
                "{mode}: residual {:e} (full-order {:e}), noise {:e}, {:?}",
                rep.result.residual_norm, rep.fom_residual, rep.result.noise_norm, rep.result.stopped_by
            );
        }
        Command::Diagnose { scenario, which } => {
            let sc = load(&scenario, cli.seed)?;
            with_threads(cli.threads, || diagnose(&sc, which, &out, &RayonBuilder))??;
            println!("wrote {which:?} report to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
