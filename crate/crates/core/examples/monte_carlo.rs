//! Monte Carlo evaluation: coverage of the conformal region and joint
//! constraint satisfaction over independent rollouts.

use conformal_smpc::config::{Mode, RunConfig};
use conformal_smpc::evaluation::run_monte_carlo;
use conformal_smpc::Result;

pub fn run(n_test: usize) -> Result<f64> {
    let cfg = RunConfig::default();
    let region = cfg.calibrate(Mode::State)?;
    let smpc = cfg.controller(Mode::State, &region)?;
    let noise = cfg.noise(Mode::State, false)?;
    let (report, _) = run_monte_carlo(&smpc, &region, &cfg.x0(), &noise, n_test, 2024)?;
    print!("{}", report.to_text());
    Ok(report.joint_satisfaction)
}

fn main() -> Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    run(n).map(|_| ())
}
