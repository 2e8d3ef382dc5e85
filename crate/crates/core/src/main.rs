use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use meanfield::cli::presets::description;
use meanfield::cli::{parse_config, preset, run_scenario, PRESETS};
use meanfield::Error;

/// Runs a mean-field scenario from a configuration file or a built-in preset.
#[derive(Debug, Parser)]
#[command(name = "meanfield", version)]
struct Args {
    /// Configuration file.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Overrides `numerics.seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Directory for the CSV table and summary.txt.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Prints the preset names and exits.
    #[arg(long)]
    list_presets: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_presets {
        for (name, text) in PRESETS {
            println!("{name:<28} {}", description(text));
        }
        return ExitCode::SUCCESS;
    }
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let text = match (&args.config, &args.preset) {
        (Some(path), _) => match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        (None, Some(name)) => match preset(name) {
            Some(t) => t.to_string(),
            None => {
                eprintln!("error: unknown preset `{name}`; see --list-presets");
                return ExitCode::from(2);
            }
        },
        (None, None) => {
            eprintln!("error: pass --config PATH or --preset NAME");
            return ExitCode::from(2);
        }
    };
    let mut config = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let report = match run_scenario(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 3,
            });
        }
    };
    for line in &report.lines {
        println!("{line}");
    }
    match report.write(&config, &args.out) {
        Ok((csv, summary)) => eprintln!("wrote {} and {}", csv.display(), summary.display()),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
