//! Receding-horizon controller against the one-shot open-loop tube policy on
//! shared disturbance realizations.

use conformal_smpc::config::{Mode, RunConfig};
use conformal_smpc::evaluation::compare_policies;
use conformal_smpc::Result;

pub fn run(n_test: usize) -> Result<f64> {
    let cfg = RunConfig::default();
    let region = cfg.calibrate(Mode::State)?;
    let smpc = cfg.controller(Mode::State, &region)?;
    let noise = cfg.noise(Mode::State, false)?;
    let cmp = compare_policies(&smpc, &region, &cfg.x0(), &noise, n_test, 2024)?;
    print!("{}", cmp.to_text());
    Ok(cmp.relative_reduction)
}

fn main() -> Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    run(n).map(|_| ())
}
