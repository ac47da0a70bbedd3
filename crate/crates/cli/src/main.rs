use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vibcorr_cli::config::{parse_config, RunConfig, TaskKind};
use vibcorr_cli::plot::{write_svg, PlotSeries};
use vibcorr_cli::{scan, tasks, CliError, ConfigError};

#[derive(Parser)]
#[command(name = "vibcorr", version, about = "Photon and phonon correlations of a driven vibronic monomer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for scans.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Run the oracle suite first and stop with status 4 if it fails.
    #[arg(long, global = true)]
    verify: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Pre-equilibrate the hierarchy and write a checkpoint.
    Equilibrate,
    /// Detection probability D(t).
    G1,
    /// Two-time correlation g2(τ).
    G2,
    /// Parameter scan over the [scan] block.
    Scan,
    /// Run the oracle suite and write oracle.jsonl.
    Verify,
}

fn load(cli: &Cli, wanted: TaskKind) -> Result<RunConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| ConfigError { line: None, message: "--config <path> is required".into() })?;
    let cfg = parse_config(path)?;
    if cfg.task.kind != wanted {
        return Err(ConfigError {
            line: None,
            message: format!("subcommand {} does not match [task] kind = \"{}\"", wanted.name(), cfg.task.kind.name()),
        }
        .into());
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out.clone().or_else(|| cfg.map(|c| c.output.dir.clone())).unwrap_or_else(|| PathBuf::from("out"))
}

fn verify(dir: &Path) -> Result<(), CliError> {
    let (path, reports) = tasks::run_verify(dir).map_err(|e| {
        eprintln!("oracle report in {}", dir.join("oracle.jsonl").display());
        e
    })?;
    for r in &reports {
        println!("{} {} max_rel_err={:e}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.max_rel_err);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.command == Command::Verify {
        return verify(&out_dir(cli, None));
    }
    let kind = match cli.command {
        Command::Equilibrate => TaskKind::Equilibrate,
        Command::G1 => TaskKind::G1,
        Command::G2 => TaskKind::G2,
        Command::Scan => TaskKind::Scan,
        Command::Verify => unreachable!(),
    };
    let cfg = load(cli, kind)?;
    let dir = out_dir(cli, Some(&cfg));
    if cli.verify {
        verify(&dir)?;
    }
    let written = match kind {
        TaskKind::Equilibrate => tasks::run_equilibrate(&cfg, &dir)?,
        TaskKind::Scan => scan::run_scan(&cfg, &dir, cli.threads.max(1))?,
        _ => {
            let out = tasks::run_cell(&cfg, kind)?;
            let mut paths = vec![out.write(&dir)?];
            if cfg.output.svg {
                let svg = dir.join(out.file_name.replace(".csv", ".svg"));
                let series = [PlotSeries { label: out.file_name.clone(), x: out.trace.grid.clone(), y: out.trace.values.clone() }];
                let x_label = if kind == TaskKind::G1 { "t (ps)" } else { "τ (ps)" };
                write_svg(&svg, &series, x_label, "value")?;
                paths.push(svg);
            }
            paths
        }
    };
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
