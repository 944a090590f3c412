use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pni::experiment::{
    self, parse_assignment, parse_config, parse_sweep, ExperimentError, ExperimentSpec, Study,
};

#[derive(Parser)]
#[command(name = "pni", version, about = "Run passivity-and-immersion studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one study and write its CSV trajectory and report.
    Run {
        study: String,
        /// Flat `key = value` file; `--set` entries take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a parameter, `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (default: $PNI_OUT_DIR, then ./pni_out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Repeat the run for each value, `key=v1,v2,...`.
        #[arg(long, value_name = "KEY=V1,V2")]
        sweep: Option<String>,
    },
    /// List studies and their parameters.
    List,
}

fn run(
    study: &str,
    config: Option<PathBuf>,
    set: &[String],
    out: Option<PathBuf>,
    sweep: Option<&str>,
) -> Result<(), ExperimentError> {
    let mut spec = ExperimentSpec::new(study.parse::<Study>()?);
    if let Some(path) = config {
        let text = fs::read_to_string(&path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        spec.overrides.extend(parse_config(&text)?);
    }
    for s in set {
        let (k, v) = parse_assignment(s)?;
        spec.overrides.insert(k, v);
    }
    let out_dir = experiment::resolve_out_dir(out);
    let outcomes = match sweep {
        Some(s) => {
            let (key, values) = parse_sweep(s)?;
            experiment::run_sweep(&spec, &key, &values, &out_dir)?
        }
        None => vec![experiment::run(&spec, &out_dir)?],
    };
    for o in outcomes {
        print!("{}", o.report);
        println!("wrote {} and {}", o.csv_path.display(), o.report_path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for s in Study::ALL {
                println!("{:<13} {}", s.name(), s.description());
                for p in s.schema() {
                    println!("    {:<12} = {:<20} {}", p.key, p.default, p.help);
                }
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            study,
            config,
            set,
            out,
            sweep,
        } => match run(&study, config, &set, out, sweep.as_deref()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
