use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use supertransport::scenario::{run, RunError, RunOptions, Scenario, Suite};

/// Verify transport and flatness identities for a superconnection scenario.
#[derive(Debug, Parser)]
#[command(name = "supertransport", version)]
struct Cli {
    /// One of check-flat, transport, psi, stokes, simplex, twisting, ainfty, cobar, all.
    subcommand: String,
    /// Scenario JSON document.
    #[arg(long)]
    scenario: PathBuf,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RK4 steps per unit of t (overrides the scenario).
    #[arg(long = "quad-n")]
    quad_n: Option<usize>,
    /// Gauss-Legendre order per panel (overrides the scenario).
    #[arg(long = "gauss-order")]
    gauss_order: Option<usize>,
    /// Tolerance override NAME=VALUE; NAME is exact, smooth, kink, order or a check name.
    #[arg(long = "tol", value_name = "NAME=VALUE")]
    tol: Vec<String>,
    /// Seed for randomized suites.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the JSON report on stdout instead of a table.
    #[arg(long)]
    json: bool,
}

fn load(cli: &Cli) -> Result<(Suite, Scenario), RunError> {
    let suite: Suite = cli.subcommand.parse()?;
    let mut sc = Scenario::from_file(&cli.scenario)?;
    if let Some(n) = cli.quad_n {
        sc.quad.rk4_steps = n;
    }
    if let Some(g) = cli.gauss_order {
        sc.quad.gauss_order = g;
    }
    sc.quad.validate().map_err(|e| RunError::Config(e.to_string()))?;
    for t in &cli.tol {
        let (name, value) = t
            .rsplit_once('=')
            .ok_or_else(|| RunError::Config(format!("--tol expects NAME=VALUE, got '{t}'")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| RunError::Config(format!("--tol {name}: '{value}' is not a number")))?;
        sc.tolerances.apply_override(name.trim(), value)?;
    }
    Ok((suite, sc))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (suite, sc) = match load(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let out = match run(&sc, suite, &RunOptions { seed: cli.seed }) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let report = out.to_json();
    if let Some(path) = &cli.out {
        if let Err(e) = std::fs::write(path, format!("{report}\n")) {
            eprintln!("cannot write {}: {e}", path.display());
            return ExitCode::from(3);
        }
    }
    if cli.json {
        println!("{report}");
    } else {
        for r in &out.records {
            println!(
                "{:<4} {:<40} residual {:>10.3e}  tol {:>8.1e}  [{}]",
                if r.pass { "ok" } else { "FAIL" },
                r.name,
                r.residual,
                r.tolerance,
                &r.inputs_digest[..12]
            );
        }
        let failed = out.records.iter().filter(|r| !r.pass).count();
        println!("{} checks, {} failed", out.records.len(), failed);
    }
    for (r, dt) in out.records.iter().zip(&out.timings) {
        eprintln!("time {:>9.3} ms  {}", dt.as_secs_f64() * 1e3, r.name);
    }
    if out.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
