use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use gammaforge::job::JobSpec;
use gammaforge::report::{rows_to_csv, Report};
use gammaforge::run::execute;

/// Runs one job document and writes a deterministic report.
///
/// Exit codes: 0 the check passed (or the command only computes values),
/// 1 a verified inequality failed, 2 usage or domain errors.
#[derive(Parser)]
#[command(name = "gammaforge", version, arg_required_else_help = true)]
struct Cli {
    /// Command to run; must match the job document's `command` field.
    command: String,
    /// Path to the JSON job document.
    #[arg(long)]
    job: PathBuf,
    /// Report destination (default: the job's output.report, else stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the job seed (default 17).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the command's tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let text = match fs::read_to_string(&cli.job) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("gammaforge: cannot read {}: {e}", cli.job.display());
            return ExitCode::from(2);
        }
    };
    let job: JobSpec = match serde_json::from_str(&text) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("gammaforge: invalid job document: {e}");
            return ExitCode::from(2);
        }
    };
    if job.command != cli.command {
        eprintln!(
            "gammaforge: the job document runs {:?}, not {:?}",
            job.command, cli.command
        );
        return ExitCode::from(2);
    }

    let body = match execute(&job, cli.seed, cli.tol) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("gammaforge: {e}");
            return ExitCode::from(2);
        }
    };
    let pass = body.pass;
    let report = Report::new(body);
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');

    let out = cli
        .out
        .or_else(|| job.output.as_ref().and_then(|o| o.report.as_ref().map(PathBuf::from)));
    match out {
        Some(path) => {
            if let Err(e) = fs::write(&path, &json) {
                eprintln!("gammaforge: cannot write {}: {e}", path.display());
                return ExitCode::from(2);
            }
        }
        None => print!("{json}"),
    }

    if let Some(csv_path) = job.output.as_ref().and_then(|o| o.csv.as_ref()) {
        let csv = rows_to_csv(&report.body.rows, job.operator.dim);
        if let Err(e) = fs::write(csv_path, csv) {
            eprintln!("gammaforge: cannot write {csv_path}: {e}");
            return ExitCode::from(2);
        }
    }

    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
