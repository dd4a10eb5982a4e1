//! Builds the pendulum model, checks the closed-loop and observer matrices
//! and simulates a few steps of plant, nominal system and observer.

use conformal_smpc::linalg::{mat, vector};
use conformal_smpc::model::{check_schur, CostSpec, LtiSystem};
use conformal_smpc::Result;

pub fn run() -> Result<f64> {
    let sys = LtiSystem::new(
        mat(&[&[1.0, 0.1], &[0.75, 0.95]]),
        mat(&[&[0.0], &[0.1]]),
        mat(&[&[1.0, 0.0]]),
        mat(&[&[0.0]]),
        mat(&[&[-10.0, -4.0]]),
        mat(&[&[0.7], &[1.2]]),
    )?;
    for (name, m) in [("A", &sys.a), ("A + BK", &sys.a_k()), ("A - LC", &sys.a_l())] {
        let r = check_schur(m)?;
        println!("{name:7} spectral radius {:.4} stable {}", r.spectral_radius, r.stable);
    }
    let cost = CostSpec::stage_only(mat(&[&[100.0, 0.0], &[0.0, 100.0]]), mat(&[&[10.0]]))?;

    let mut x = vector(&[0.75, -0.70]);
    let mut xhat = x.clone();
    let mut total = 0.0;
    for t in 0..5 {
        let u = &sys.k * &xhat;
        let w = vector(&[0.01, -0.01]);
        let y = sys.output(&x, &u, &vector(&[0.0]))?;
        total += cost.stage(&x, &u);
        xhat = sys.step_observer(&xhat, &u, &y)?;
        x = sys.step_plant(&x, &u, &w)?;
        println!("t={t} x=[{:+.4}, {:+.4}] xhat=[{:+.4}, {:+.4}] u={:+.4}", x[0], x[1], xhat[0], xhat[1], u[0]);
    }
    println!("stage cost over 5 steps {total:.4}");
    Ok(total)
}

fn main() -> Result<()> {
    run().map(|_| ())
}
