//! Output-feedback closed loop: the controller only sees y = Cx + η and runs
//! a Luenberger observer, with the region calibrated on ê + ē.

use conformal_smpc::config::{Mode, RunConfig};
use conformal_smpc::evaluation::{draw_realization, run_rollout};
use conformal_smpc::Result;

pub fn run() -> Result<f64> {
    let cfg = RunConfig::default();
    let region = cfg.calibrate(Mode::Output)?;
    println!("output-feedback q̂ = {:.4}", region.qhat);
    let smpc = cfg.controller(Mode::Output, &region)?;
    let noise = cfg.noise(Mode::Output, false)?;
    let (w, eta) = draw_realization(&noise, cfg.horizon.n_bar, 5, 0)?;
    let (record, _) = run_rollout(&smpc, &region, &cfg.x0(), &w, eta.as_ref())?;
    let est = record.est_error.as_ref().expect("output mode records ê");
    let worst = est.iter().map(|e| e.amax()).fold(0.0, f64::max);
    println!("largest estimation error {worst:.4}");
    println!("identity residual {:.2e}", record.identity_residual);
    println!("cost {:.3}; constraints met {}", record.cost, record.state_feasible && record.input_feasible);
    Ok(record.cost)
}

fn main() -> Result<()> {
    run().map(|_| ())
}
