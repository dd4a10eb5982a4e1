//! Propagates disturbance samples through the state-feedback and
//! output-feedback error dynamics.

use conformal_smpc::data::{generate_gaussian, Role};
use conformal_smpc::linalg::{mat, Vector};
use conformal_smpc::model::LtiSystem;
use conformal_smpc::propagation::{propagate_output_errors, propagate_state_errors};
use conformal_smpc::Result;

fn pendulum() -> Result<LtiSystem> {
    LtiSystem::new(
        mat(&[&[1.0, 0.1], &[0.75, 0.95]]),
        mat(&[&[0.0], &[0.1]]),
        mat(&[&[1.0, 0.0]]),
        mat(&[&[0.0]]),
        mat(&[&[-10.0, -4.0]]),
        mat(&[&[0.7], &[1.2]]),
    )
}

pub fn run() -> Result<f64> {
    let sys = pendulum()?;
    let w = generate_gaussian(Role::Disturbance, 50, 200, &(mat(&[&[1.0, 0.0], &[0.0, 1.0]]) * 4e-4), &Vector::zeros(2), 3)?;
    let eta = generate_gaussian(Role::Noise, 50, 200, &mat(&[&[1e-4]]), &Vector::zeros(1), 4)?;

    let state = propagate_state_errors(&sys, &w)?;
    let output = propagate_output_errors(&sys, &w, &eta)?;
    let spread = |ds: &conformal_smpc::data::TrajectoryDataset, t: usize| {
        ds.samples.iter().map(|s| s.column(t - 1).norm()).sum::<f64>() / ds.count() as f64
    };
    for t in [1, 5, 20, 50] {
        println!(
            "t={t:2}  mean |e| state {:.5}  output {:.5}",
            spread(&state.state_errors, t),
            spread(&output.state_errors, t)
        );
    }
    Ok(spread(&state.state_errors, 50))
}

fn main() -> Result<()> {
    run().map(|_| ())
}
