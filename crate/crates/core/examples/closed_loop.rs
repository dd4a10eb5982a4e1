//! One state-feedback closed loop on the pendulum reference experiment,
//! printing the per-step solver diagnostics.

use conformal_smpc::config::{Mode, RunConfig};
use conformal_smpc::evaluation::{draw_realization, run_rollout};
use conformal_smpc::Result;

pub fn run() -> Result<f64> {
    let cfg = RunConfig::default();
    let region = cfg.calibrate(Mode::State)?;
    let smpc = cfg.controller(Mode::State, &region)?;
    let noise = cfg.noise(Mode::State, false)?;
    let (w, _) = draw_realization(&noise, cfg.horizon.n_bar, 11, 0)?;
    let (record, diags) = run_rollout(&smpc, &region, &cfg.x0(), &w, None)?;
    for d in diags.iter().step_by(20) {
        println!(
            "t={:3} status {:?} iterations {:2} cost {:9.3} candidate ok {:?} active {:?}",
            d.t, d.status, d.iterations, d.cost, d.candidate_feasible, d.active
        );
    }
    let last = record.x.last().expect("nonempty");
    println!("x(N̄) = [{:+.4}, {:+.4}]", last[0], last[1]);
    println!(
        "cost {:.3}; region kept {}; constraints met {}",
        record.cost,
        record.within_region,
        record.state_feasible && record.input_feasible
    );
    Ok(record.cost)
}

fn main() -> Result<()> {
    run().map(|_| ())
}
