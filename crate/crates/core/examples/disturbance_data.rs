//! Generates Gaussian and uniform disturbance datasets, splits them into fit
//! and calibration parts, and round-trips one through CSV.

use conformal_smpc::data::{generate_gaussian, generate_uniform, load_dataset, save_dataset, split, Role, SplitSpec};
use conformal_smpc::linalg::{mat, vector, Vector};
use conformal_smpc::Result;

pub fn run() -> Result<usize> {
    let cov = mat(&[&[4e-4, 0.0], &[0.0, 4e-4]]);
    let w = generate_gaussian(Role::Disturbance, 120, 750, &cov, &Vector::zeros(2), 1)?;
    let eta = generate_uniform(Role::Noise, 120, 750, &vector(&[0.02]), 2)?;
    println!("disturbances: M={} T={} n={}", w.count(), w.len(), w.dim());
    println!("noise:        M={} T={} n={}", eta.count(), eta.len(), eta.dim());

    let parts = split(&w, &SplitSpec { n_fit: 250, n_cal: 500, shuffle_seed: 7 })?;
    println!("split: {} fit / {} calibration", parts.fit.count(), parts.cal.count());

    let dir = std::env::temp_dir().join(format!("csmpc-data-{}", std::process::id()));
    let path = dir.join("w.csv");
    save_dataset(&parts.cal, &path)?;
    let back = load_dataset(&path, Some(2), Some(120))?;
    let same = back.samples == parts.cal.samples;
    println!("CSV round trip exact: {same}");
    let _ = std::fs::remove_dir_all(&dir);
    Ok(back.count())
}

fn main() -> Result<()> {
    run().map(|_| ())
}
