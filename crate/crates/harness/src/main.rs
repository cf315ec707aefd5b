use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use soaheap_harness::{fragmentation_curve_file, run, write_output, HarnessError, Overrides, ScenarioConfig};

#[derive(Parser)]
#[command(name = "soaheap", version, about = "Run soaheap benchmark scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv and summary.json.
    Run(Box<Overrides>),
    /// Print the fragmentation curve (x, F) of a metrics file.
    Curve { metrics: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Run(o) => {
            let c = ScenarioConfig::load(&o)?;
            let out = run(&c)?;
            write_output(&c.out, &out)?;
            let s = &out.summary;
            println!(
                "{}: {} iterations, F={:.4}, utilization={:.4}, {} defrag passes -> {}",
                s.app,
                s.iterations,
                s.final_fragmentation,
                s.utilization,
                s.defrag_passes,
                c.out.display()
            );
        }
        Command::Curve { metrics } => print!("{}", fragmentation_curve_file(&metrics)?.to_csv()),
    }
    Ok(())
}
