//! Calibrates Mahalanobis confidence regions for the error trajectories,
//! with and without the PAC-tightened level, and checks them on fresh data.

use conformal_smpc::conformal::{calibrate, score_dataset, CalibrationOptions};
use conformal_smpc::data::{generate_gaussian, Role, SplitSpec};
use conformal_smpc::linalg::{mat, Vector};
use conformal_smpc::model::LtiSystem;
use conformal_smpc::propagation::propagate_state_errors;
use conformal_smpc::Result;

pub fn run() -> Result<f64> {
    let sys = LtiSystem::state_feedback(
        mat(&[&[1.0, 0.1], &[0.75, 0.95]]),
        mat(&[&[0.0], &[0.1]]),
        mat(&[&[-10.0, -4.0]]),
    )?;
    let cov = mat(&[&[4e-4, 0.0], &[0.0, 4e-4]]);
    let w = generate_gaussian(Role::Disturbance, 120, 750, &cov, &Vector::zeros(2), 1)?;
    let errors = propagate_state_errors(&sys, &w)?;

    let split = SplitSpec { n_fit: 250, n_cal: 500, shuffle_seed: 4 };
    let mut opts = CalibrationOptions::mahalanobis(0.9, split);
    opts.zero_mean = true;
    let region = calibrate(&errors, &opts)?;
    println!("q̂ = {:.4} (order statistic {} of {})", region.qhat, region.rank, region.m_cal);
    for t in [1, 10, 120] {
        let e = region.project(t)?;
        println!("E_{t}: radius {:.4}, shape diag [{:.3e}, {:.3e}]", e.radius, e.shape[(0, 0)], e.shape[(1, 1)]);
    }

    opts.pac_epsilon = Some(0.01);
    let pac = calibrate(&errors, &opts)?;
    if let Some(info) = pac.pac {
        println!("PAC ε = {}: ϑ̃ = {:.4}, q̂ = {:.4}", info.epsilon, info.tightened_violation, pac.qhat);
    }

    let test_w = generate_gaussian(Role::Disturbance, 120, 2000, &cov, &Vector::zeros(2), 99)?;
    let test = propagate_state_errors(&sys, &test_w)?;
    let scores = score_dataset(&region.score, &test.state_errors)?;
    let coverage = scores.iter().filter(|&&s| s <= region.qhat).count() as f64 / scores.len() as f64;
    println!("coverage on 2000 fresh trajectories: {coverage:.4}");
    Ok(coverage)
}

fn main() -> Result<()> {
    run().map(|_| ())
}
