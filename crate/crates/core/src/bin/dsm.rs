use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dsm::config::RunConfig;
use dsm::runner::{self, EXIT_ERROR};

#[derive(Parser)]
#[command(name = "dsm", version, about = "Continuous Newton-type flows for F(x) = 0 with checked convergence certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    config: PathBuf,
    /// Output directory, overriding `outputs.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for constant sampling and data noise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Certify, integrate and check bounds; writes CSV and reports.
    Solve(Common),
    /// Print the certificate only.
    Check(Common),
    /// Run every entry of the `sweep` list and write a summary CSV.
    Sweep(Common),
}

fn load(c: &Common) -> dsm::Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    let dir = c.out.clone().unwrap_or_else(|| cfg.outputs.dir.clone());
    Ok((cfg, dir))
}

fn solve(c: &Common) -> dsm::Result<i32> {
    let (cfg, dir) = load(c)?;
    let out = runner::solve(&cfg)?;
    print!("{}", out.certificate.to_text());
    if let Some(r) = &out.refused {
        println!("note: {r}");
    }
    if let Some(b) = &out.bounds {
        print!("{}", b.to_text());
    }
    if let Some(t) = &out.trajectory {
        println!("{}", t.summary().trim_end());
    }
    for path in runner::write_outputs(&out, &dir, &cfg.outputs.formats)? {
        println!("wrote {}", path.display());
    }
    Ok(out.exit_code())
}

fn check(c: &Common) -> dsm::Result<i32> {
    let (cfg, _) = load(c)?;
    let setup = runner::setup(&cfg)?;
    let cert = runner::certify(&cfg, &setup)?;
    print!("{}", cert.to_text());
    Ok(runner::check_exit_code(&cert))
}

fn sweep(c: &Common) -> dsm::Result<i32> {
    let (cfg, dir) = load(c)?;
    let out = runner::sweep(&cfg, &dir)?;
    for (k, r) in out.runs.iter().enumerate() {
        if let Err(e) = r {
            eprintln!("error: run {k}: {e}");
        }
    }
    print!("{}", out.summary);
    println!("wrote {}", Path::new(&dir).join("sweep_summary.csv").display());
    Ok(out.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(c) => solve(c),
        Command::Check(c) => check(c),
        Command::Sweep(c) => sweep(c),
    };
    let code = result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_ERROR
    });
    ExitCode::from(code as u8)
}
