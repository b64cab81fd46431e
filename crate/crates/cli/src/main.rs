use std::process::ExitCode;

use boxsqp_cli::{compare_methods, report, run_experiment, ExperimentConfig, Overrides};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "boxsqp", version, about = "SQP experiments for box-constrained control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method and write table, CSV and summary.
    Run(Overrides),
    /// Run both methods on the same instance and compare them.
    Compare(Overrides),
    /// Print the resolved configuration as a config file.
    ShowConfig(Overrides),
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(o) => {
            let cfg = ExperimentConfig::resolve(&o)?;
            let run = run_experiment(&cfg)?;
            print!("{}", report::table(&run.records));
            println!("status: {}", run.status);
            if let Some(m) = &run.message {
                println!("message: {m}");
            }
            println!("results in {}", cfg.output.display());
            Ok(if run.converged() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Compare(o) => {
            let cfg = ExperimentConfig::resolve(&o)?;
            let c = compare_methods(&cfg)?;
            for (name, run) in [("sqpnln", &c.sqpnln), ("sqplin", &c.sqplin)] {
                match run {
                    Ok(r) => {
                        let wall = r.records.last().map(|x| x.wall_time_seconds).unwrap_or(0.0);
                        println!("{name}: {} after {} iterations, {wall:.3} s", r.status, r.iterations());
                    }
                    Err(e) => println!("{name}: failed: {e}"),
                }
            }
            match c.relative_difference {
                Some(d) => println!("relative L-inf difference of final controls: {}", report::sci(d, 3)),
                None => println!("relative L-inf difference of final controls: n/a"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ShowConfig(o) => {
            let cfg = ExperimentConfig::resolve(&o)?;
            print!("{}", toml::to_string(&cfg.to_file())?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
