use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multidirac::experiments::{
    compare_stored, load_config, mc_sweep, mesh_study, parse_config, run_scenario, write_flux_tables, write_sweep_csv,
    Config,
};
use multidirac::models::MeshPair;
use multidirac::Error;

#[derive(Parser)]
#[command(name = "multidirac", about = "Exclusion and point-source models of a secreting cell")]
struct Cli {
    /// Configuration file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the mesh and write it as text.
    Mesh,
    /// Tabulate Dirac intensities and the approximate boundary flux.
    Flux,
    /// Run the configured variants.
    Run,
    /// Compare two stored run directories.
    Compare { exclusion: PathBuf, point: PathBuf },
    /// Monte Carlo sweep over diffusivity and flux ratio.
    Sweep {
        /// Number of flux extrema.
        #[arg(long, default_value_t = 1)]
        n: u32,
    },
    /// Fine and coarse mesh errors against the exclusion reference.
    MeshStudy,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse(_) => 2,
        e if e.is_numerical_failure() => 3,
        _ => 1,
    }
}

fn execute(cli: Cli) -> Result<u8, Error> {
    let mut cfg: Config = match &cli.config {
        Some(path) => load_config(path)?,
        None => parse_config("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.sweep.seed = seed;
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Config { key: "workers".into(), message: "must be at least 1".into() });
        }
        cfg.sweep.workers = w;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::Mesh => {
            let pair = MeshPair::build(&cfg.scenario)?;
            pair.full.write_to(&out.join("mesh.txt"))?;
            println!("{} nodes, {} triangles", pair.full.nodes().len(), pair.full.triangles().len());
        }
        Command::Flux => write_flux_tables(&cfg, &out)?,
        Command::Run => {
            let summary = run_scenario(&cfg, &out)?;
            for v in &summary.completed {
                println!("{}: ok", v.name());
            }
            for (v, msg) in &summary.failed {
                eprintln!("{}: failed: {msg}", v.name());
            }
            if summary.numerical_failure() {
                return Ok(3);
            }
        }
        Command::Compare { exclusion, point } => {
            let curves = compare_stored(&exclusion, &point, &cfg)?;
            curves.write_csv(&out.join("compare.csv"))?;
        }
        Command::Sweep { n } => {
            let rows = mc_sweep(&cfg.scenario, &cfg.sweep, n)?;
            write_sweep_csv(&out.join(format!("sweep_n{n}.csv")), &rows)?;
            let count = |l: i32| rows.iter().filter(|r| r.label == l).count();
            println!("label 0: {}, label 1: {}, failed: {}", count(0), count(1), count(-1));
        }
        Command::MeshStudy => {
            let study = mesh_study(&cfg.scenario, &cfg.mesh_study)?;
            study.write_csv(&out.join("mesh_study.csv"))?;
            let (g, d) = study.final_excess();
            println!("coarse minus fine at t = {}: green {g:.4e}, direct {d:.4e}", study.times.last().unwrap_or(&0.0));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
