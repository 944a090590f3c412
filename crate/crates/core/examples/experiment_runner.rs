//! Drives the batch runner from code: a sweep over the P&I integral gain,
//! written to a directory given on the command line (default `pni_out`).

use std::path::PathBuf;

use pni::experiment::{run, run_sweep, ExperimentSpec, Study};

fn main() {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "pni_out".into());

    let a1 = ExperimentSpec::new(Study::A1).set("alpha", "1");
    match run(&a1, &out) {
        Ok(o) => print!("{}", o.report),
        Err(e) => eprintln!("A1 failed: {e}"),
    }

    let buck = ExperimentSpec::new(Study::BuckPni).set("t_end", "0.05");
    let values = vec!["30".to_string(), "100".to_string()];
    match run_sweep(&buck, "ki1", &values, &out) {
        Ok(outcomes) => {
            for o in outcomes {
                println!("wrote {}", o.csv_path.display());
            }
        }
        Err(e) => eprintln!("sweep failed: {e}"),
    }
}
