//! Tightens state and input boxes by ellipsoidal error sets and checks an
//! invariant terminal set.

use conformal_smpc::geometry::{
    check_terminal_invariance, tighten, tighten_inputs, Ellipsoid, HalfspacePolytope, TerminalSet,
};
use conformal_smpc::linalg::{mat, vector};
use conformal_smpc::Result;

pub fn run() -> Result<bool> {
    let x = HalfspacePolytope::symmetric_box(&[1.0, 1.0])?;
    let u = HalfspacePolytope::symmetric_box(&[10.0])?;
    let k = mat(&[&[-10.0, -4.0]]);
    let e = Ellipsoid::new(vector(&[0.0, 0.0]), mat(&[&[4e-4, 1e-4], &[1e-4, 3e-3]]), 3.7)?;

    let z = tighten(&x, &e)?;
    let v = tighten_inputs(&u, &k, &e)?;
    println!("Z offsets {:?} empty {}", z.set.offsets().as_slice(), z.empty);
    println!("V offsets {:?} empty {}", v.set.offsets().as_slice(), v.empty);

    let big = Ellipsoid::ball(2, 1.5)?;
    println!("tightening by a radius 1.5 ball leaves an empty set: {}", tighten(&x, &big)?.empty);

    let a = mat(&[&[1.0, 0.1], &[0.75, 0.95]]);
    let b = mat(&[&[0.0], &[0.1]]);
    let terminal = TerminalSet::Polytope {
        set: HalfspacePolytope::symmetric_box(&[0.05, 0.05])?,
        gain: k.clone(),
    };
    let report = check_terminal_invariance(&terminal, &a, &b, Some(&v.set))?;
    println!("box terminal set invariant {} inputs admissible {} margin {:.3e}", report.invariant, report.inputs_admissible, report.worst_margin);
    let origin = check_terminal_invariance(&TerminalSet::Origin, &a, &b, Some(&v.set))?;
    println!("origin terminal set ok {}", origin.ok());
    Ok(origin.ok())
}

fn main() -> Result<()> {
    run().map(|_| ())
}
