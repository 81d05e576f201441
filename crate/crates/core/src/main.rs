use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use safelearn::experiments::{self, validate_trace_file, Scenario, ScenarioConfig};
use safelearn::kedmd::{plan_reference, read_points_csv};
use safelearn::Result;

#[derive(Parser)]
#[command(name = "safelearn", version, about = "Funnel-safeguarded learning MPC experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its CSV (plus `<out>.meta`).
    Run {
        #[arg(long)]
        scenario: Scenario,
        /// Flat `key = value` file; omitted keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a trace CSV against its funnel column.
    ValidateTrace { csv: PathBuf },
    /// Build a sampling reference through virtual points.
    Plan {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        dt: f64,
        #[arg(long = "eps-c")]
        eps_c: f64,
        #[arg(long)]
        out: PathBuf,
        /// Lower bound on the funnel gain.
        #[arg(long, default_value_t = 1.0)]
        sigma_floor: f64,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            config,
            out,
            seed,
        } => {
            let cfg = match config {
                Some(p) => ScenarioConfig::parse(scenario, &std::fs::read_to_string(p)?)?,
                None => ScenarioConfig::defaults(scenario),
            };
            let output = experiments::run(&cfg, seed)?;
            experiments::write_outputs(&cfg, seed, &output, &out)?;
            for line in output.summary() {
                println!("{line}");
            }
            Ok(true)
        }
        Cmd::ValidateTrace { csv } => {
            let rep = validate_trace_file(&csv)?;
            println!("rows = {}", rep.rows);
            println!("violations = {}", rep.violations.len());
            println!("min_margin = {}", rep.min_margin);
            println!("activation_episodes = {}", rep.activation_episodes);
            if let Some(&i) = rep.violations.first() {
                println!("first_violation_row = {i}");
            }
            println!("{}", if rep.passed() { "PASS" } else { "FAIL" });
            Ok(rep.passed())
        }
        Cmd::Plan {
            points,
            dt,
            eps_c,
            out,
            sigma_floor,
        } => {
            let pts = read_points_csv(&points)?;
            let plan = plan_reference(&pts, dt, eps_c, sigma_floor)?;
            plan.write_csv(&out)?;
            println!("knots = {}", plan.knots.len());
            println!("sigma = {}", plan.sigma);
            println!("duration = {}", plan.duration());
            println!("max_acceleration = {}", plan.max_acceleration());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
