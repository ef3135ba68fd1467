use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eigendyn::analysis::{classify, Thresholds, TrajectoryRecord};
use eigendyn::experiment::{
    load_run_config, run, run_suite, sweep_initializations, ExperimentError,
};
use eigendyn::losses::LossSpec;
use eigendyn::theory::{integrate_table1, DEFAULT_DT};

#[derive(Parser)]
#[command(name = "eigendyn", version, about = "Eigenvalue dynamics of toy non-contrastive SSL networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and classify its eigenvalue dynamics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set model.predictor.alpha=1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output prefix for the CSV and JSON files.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every configuration of a suite file and print a summary table.
    Suite {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Exit with status 4 if any run disagrees with its predicted regime.
        #[arg(long)]
        check: bool,
        /// Also write the summary as CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Repeat a configuration across encoder initialization scales.
    SweepInit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        scales: Vec<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Integrate the eigenvalue-level ODE of a loss configuration.
    Theory {
        /// e.g. `euclidean/standard` or `cosine/iso`
        #[arg(long)]
        loss: String,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        lambda0: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long, default_value_t = DEFAULT_DT)]
        dt: f64,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        /// Write the trajectory as CSV (`time,index,value`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn write_file(path: &PathBuf, body: &str) -> Result<(), ExperimentError> {
    fs::write(path, body).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn execute(cli: Cli) -> Result<u8, ExperimentError> {
    match cli.command {
        Command::Run { config, overrides, output } => {
            let mut cfg = load_run_config(&config, &overrides)?;
            if output.is_some() {
                cfg.output_path = output;
            }
            let o = run(&cfg)?;
            println!("run: {} ({})", o.name, cfg.loss.label());
            match &o.verdict {
                Some(v) => println!(
                    "verdict: {} (expected {}, match: {})",
                    v.label,
                    eigendyn::analysis::expected_regime(&cfg.loss),
                    v.matches_table1.unwrap_or(false)
                ),
                None => println!("verdict: none ({})", o.classification_error.as_deref().unwrap_or("-")),
            }
            if let Some(last) = o.record.corr_eigenvalues.last() {
                println!("terminal eigenvalues: {}", fmt_vec(last));
            }
            println!("eigen_sum_drift: {:.4}", o.eigen_sum_drift);
            if let Some(c) = &o.comparison {
                println!(
                    "theory: max terminal deviation {:.4} (time scale {:.4e})",
                    c.max_terminal_deviation, c.time_scale
                );
            }
            if let Some(e) = &o.error {
                eprintln!("run aborted: {e}");
                return Ok(3);
            }
            Ok(0)
        }
        Command::Suite { file, jobs, check, summary } => {
            let s = run_suite(&file, jobs.max(1))?;
            print!("{s}");
            if let Some(path) = summary {
                write_file(&path, &s.to_csv())?;
            }
            Ok(if check && !s.all_pass() { 4 } else { 0 })
        }
        Command::SweepInit { config, scales, overrides } => {
            let cfg = load_run_config(&config, &overrides)?;
            let points = sweep_initializations(&cfg, &scales)?;
            println!("{:<10}  {:<18}  {:>10}  {:>8}  terminal", "init_scale", "verdict", "mean", "cv");
            for p in &points {
                println!(
                    "{:<10}  {:<18}  {:>10.4}  {:>8.4}  {}",
                    p.init_scale,
                    p.verdict.as_deref().unwrap_or("-"),
                    p.terminal_mean,
                    p.terminal_cv,
                    fmt_vec(&p.terminal)
                );
            }
            Ok(0)
        }
        Command::Theory { loss, lambda0, rate, dt, steps, output } => {
            let spec: LossSpec = loss
                .parse()
                .map_err(|e: eigendyn::losses::LossError| ExperimentError::Config {
                    message: e.to_string(),
                    line: None,
                })?;
            let traj = integrate_table1(&spec, &lambda0, rate, dt, steps).map_err(|e| match e {
                eigendyn::theory::TheoryError::Unsupported(_)
                | eigendyn::theory::TheoryError::InvalidStep(_) => ExperimentError::Config {
                    message: e.to_string(),
                    line: None,
                },
                other => ExperimentError::Numerical(other.to_string()),
            })?;
            println!("loss: {}  t_end: {}  diverged: {}", traj.label, traj.times.last().unwrap(), traj.diverged);
            println!("final: {}", fmt_vec(traj.last()));
            match classify(&TrajectoryRecord::from_theory(&traj), &Thresholds::default()) {
                Ok(v) => println!("verdict: {}", v.label),
                Err(e) => println!("verdict: none ({e})"),
            }
            if let Some(path) = output {
                let mut body = String::from("time,index,value\n");
                for (t, s) in traj.times.iter().zip(&traj.states) {
                    for (i, v) in s.iter().enumerate() {
                        body.push_str(&format!("{t},{i},{v}\n"));
                    }
                }
                write_file(&path, &body)?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
