//! Solves a small constrained QP, verifies its KKT residuals and reuses the
//! factorization with a warm start on a shifted right-hand side.

use conformal_smpc::linalg::{mat, vector, Mat, Vector};
use conformal_smpc::qp::{kkt_residuals, solve, solve_lp, PreparedQp, QpSettings, QuadraticProgram};
use conformal_smpc::Result;

pub fn run() -> Result<f64> {
    let qp = QuadraticProgram::new(mat(&[&[4.0, 1.0, 0.0], &[1.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]), vector(&[1.0, 1.0, -1.0]))
        .with_equalities(mat(&[&[1.0, 1.0, 1.0]]), vector(&[1.0]))
        .with_inequalities(mat(&[&[-1.0, 0.0, 0.0], &[0.0, -1.0, 0.0], &[0.0, 0.0, 1.0]]), vector(&[0.0, 0.0, 0.6]));
    let settings = QpSettings::default();
    let sol = solve(&qp, &settings, None)?;
    let r = kkt_residuals(&qp, &sol.xi, &sol.lambda, &sol.nu);
    println!("status {:?} ξ = {:?} objective {:.6}", sol.status, sol.xi.as_slice(), sol.objective);
    println!("active rows {:?} residuals {r:?}", sol.active);

    let prepared = PreparedQp::new(&qp.h, &qp.a_eq, &qp.a_in, settings)?;
    let shifted = prepared.solve(&qp.g, &vector(&[1.2]), &qp.b_in, Some(&sol.xi))?;
    println!("warm-started shifted solve {:?} in {} iterations", shifted.xi.as_slice(), shifted.iterations);

    let lp = solve_lp(
        &vector(&[-1.0, -1.0]),
        &mat(&[&[1.0, 2.0], &[3.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]),
        &vector(&[4.0, 6.0, 0.0, 0.0]),
        &Mat::zeros(0, 2),
        &Vector::zeros(0),
    )?;
    println!("LP optimum {:?} value {:.4}", lp.xi.as_slice(), lp.objective);
    Ok(sol.objective)
}

fn main() -> Result<()> {
    run().map(|_| ())
}
