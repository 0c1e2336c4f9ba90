use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hcl_core::config::ExperimentConfig;
use hcl_core::metrics::EvalMode;
use hcl_core::report::{write_plots, write_report};
use hcl_core::trainer::{continual_run, RunOptions};
use hcl_core::Error;

#[derive(Parser)]
#[command(name = "hcl", about = "Heterogeneous continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task of the configured stream for one seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to every seed listed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        dump_synth: Option<PathBuf>,
        /// Run directory; defaults to `runs/<config name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate finished runs under a directory into results tables.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot accuracy over tasks for the runs under a directory.
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            data_dir,
            dump_synth,
            out,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
            let opts = RunOptions {
                out_dir,
                data_dir,
                dump_synth,
                stop_after: None,
            };
            for s in seeds {
                let rec = continual_run(&cfg, s, &opts)?;
                for (mode, m) in &rec.matrices {
                    let f = match m.average_forgetting() {
                        Ok(f) => format!("{f:.2}"),
                        Err(_) => "n/a".into(),
                    };
                    println!(
                        "{} seed {s} {}: A_T {:.2}  F_T {f}",
                        cfg.name,
                        mode.as_str(),
                        m.average_accuracy()?
                    );
                }
                if let (Ok(t), Ok(c)) = (rec.matrix(EvalMode::TaskIl), rec.matrix(EvalMode::ClassIl)) {
                    if t.average_accuracy()? < c.average_accuracy()? {
                        eprintln!("warning: task-IL accuracy below class-IL accuracy");
                    }
                }
            }
            println!("wrote {}", opts.out_dir.display());
        }
        Command::Report { out } => {
            let table = write_report(&out)?;
            print!("{}", table.to_text());
        }
        Command::Plot { out } => {
            for p in write_plots(&out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
