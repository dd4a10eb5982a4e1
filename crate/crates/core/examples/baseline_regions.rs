//! Compares the conformal region with the Chebyshev mean-variance region and
//! the Gaussian ground truth, and writes ellipse outlines for plotting.

use conformal_smpc::config::{Mode, RunConfig};
use conformal_smpc::evaluation::{
    chebyshev_region, compare_regions, ellipse_polyline, gaussian_truth_region, BaselineRegion,
};
use conformal_smpc::Result;

pub fn run() -> Result<Vec<f64>> {
    let cfg = RunConfig::default();
    let region = cfg.calibrate(Mode::State)?;
    let horizon = cfg.calibration_horizon();
    let conformal = BaselineRegion::from_conformal("conformal", &region)?;
    let cheb = chebyshev_region(&region, cfg.horizon.theta, horizon)?;
    let sigma_w = cfg.gaussian_w().expect("reference disturbance is Gaussian");
    let truth = gaussian_truth_region(&sigma_w, &cfg.system()?, cfg.level(), horizon)?;
    let table = compare_regions(&conformal, &[cheb, truth])?;
    for row in table.rows.iter().step_by(30) {
        for e in &row.entries {
            println!(
                "t={:3} {:9} radius {:8.4} ratio {:.4} volume ratio {:.3e}",
                row.t, e.name, e.radius, e.radius_ratio, e.volume_ratio
            );
        }
    }
    let outline = ellipse_polyline(&conformal.per_step[horizon - 1], 64);
    println!("E_{horizon} outline starts at [{:+.4}, {:+.4}]", outline[0][0], outline[0][1]);
    Ok(table.radius_ratios("gaussian"))
}

fn main() -> Result<()> {
    run().map(|_| ())
}
