//! Error-trajectory datasets obtained by driving the autonomous error
//! dynamics with sampled disturbances (and measurement noise).
//!
//! Column `j` of a propagated trajectory holds the error at time `t = j + 1`;
//! the error at `t = 0` is zero by construction and not stored.

use rayon::prelude::*;

use crate::data::{Role, TrajectoryDataset};
use crate::error::{dim_err, DataError, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{check_schur, LtiSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMode {
    StateFeedback,
    OutputFeedback,
}

#[derive(Debug, Clone)]
pub struct ErrorTrajectorySet {
    pub mode: ErrorMode,
    /// `x − z` per sample: `e` for state feedback, `ê + ē` for output feedback.
    pub state_errors: TrajectoryDataset,
    /// `ê = x − x̂` (output feedback only).
    pub estimation_errors: Option<TrajectoryDataset>,
    /// `ē = x̂ − z` (output feedback only).
    pub nominal_errors: Option<TrajectoryDataset>,
    pub horizon: usize,
    pub gain_k: Mat,
    pub gain_l: Option<Mat>,
}

impl ErrorTrajectorySet {
    pub fn count(&self) -> usize {
        self.state_errors.count()
    }
}

fn require_stable(m: &Mat, name: &str) -> Result<()> {
    let r = check_schur(m)?;
    if r.stable {
        Ok(())
    } else {
        Err(Error::Unstable {
            name: name.into(),
            radius: r.spectral_radius,
        })
    }
}

/// `e(t+1) = A_K e(t) + w(t)` from `e(0) = 0`, for one disturbance trajectory.
pub fn propagate_single(a_k: &Mat, w: &Mat) -> Mat {
    let (n, t) = w.shape();
    let mut out = Mat::zeros(n, t);
    let mut e = Vector::zeros(n);
    for (j, w_t) in w.column_iter().enumerate() {
        e = a_k * &e + w_t;
        out.set_column(j, &e);
    }
    out
}

/// Coupled estimation / nominal error recursions for one sample, returning
/// `(ê, ē)` at times `1..=T`.
pub fn propagate_output_single(sys: &LtiSystem, w: &Mat, eta: &Mat) -> (Mat, Mat) {
    let (a_l, a_k) = (sys.a_l(), sys.a_k());
    let (n, t) = w.shape();
    let mut est = Mat::zeros(n, t);
    let mut nom = Mat::zeros(n, t);
    let mut eh = Vector::zeros(n);
    let mut eb = Vector::zeros(n);
    for j in 0..t {
        let w_t = w.column(j);
        let eta_t = eta.column(j);
        let innov = &sys.c * &eh + eta_t;
        let next_eh = &a_l * &eh + w_t - &sys.l * eta_t;
        let next_eb = &a_k * &eb + &sys.l * innov;
        eh = next_eh;
        eb = next_eb;
        est.set_column(j, &eh);
        nom.set_column(j, &eb);
    }
    (est, nom)
}

pub fn propagate_state_errors(sys: &LtiSystem, w: &TrajectoryDataset) -> Result<ErrorTrajectorySet> {
    if w.role != Role::Disturbance {
        return Err(Error::Invalid(format!("expected a disturbance dataset, got role {}", w.role)));
    }
    if w.dim() != sys.nx() {
        return Err(dim_err("disturbance dimension", sys.nx(), w.dim()));
    }
    let a_k = sys.a_k();
    require_stable(&a_k, "A + BK")?;
    let samples: Vec<Mat> = w.samples.par_iter().map(|s| propagate_single(&a_k, s)).collect();
    let mut errors = TrajectoryDataset::new(Role::Error, samples, w.seed)?;
    errors.origin = w.origin.clone();
    Ok(ErrorTrajectorySet {
        mode: ErrorMode::StateFeedback,
        horizon: w.len(),
        state_errors: errors,
        estimation_errors: None,
        nominal_errors: None,
        gain_k: sys.k.clone(),
        gain_l: None,
    })
}

pub fn propagate_output_errors(
    sys: &LtiSystem,
    w: &TrajectoryDataset,
    eta: &TrajectoryDataset,
) -> Result<ErrorTrajectorySet> {
    if w.count() != eta.count() || w.len() != eta.len() {
        return Err(DataError::Misaligned(format!(
            "disturbances M={} T={}, noise M={} T={}",
            w.count(),
            w.len(),
            eta.count(),
            eta.len()
        ))
        .into());
    }
    if w.dim() != sys.nx() {
        return Err(dim_err("disturbance dimension", sys.nx(), w.dim()));
    }
    if eta.dim() != sys.ny() {
        return Err(dim_err("noise dimension", sys.ny(), eta.dim()));
    }
    require_stable(&sys.a_k(), "A + BK")?;
    require_stable(&sys.a_l(), "A - LC")?;

    let pairs: Vec<(Mat, Mat)> = w
        .samples
        .par_iter()
        .zip(eta.samples.par_iter())
        .map(|(ws, es)| propagate_output_single(sys, ws, es))
        .collect();
    let combined: Vec<Mat> = pairs.iter().map(|(a, b)| a + b).collect();
    let (est, nom): (Vec<Mat>, Vec<Mat>) = pairs.into_iter().unzip();
    let wrap = |samples, role| -> Result<TrajectoryDataset> {
        let mut ds = TrajectoryDataset::new(role, samples, w.seed)?;
        ds.origin = w.origin.clone();
        Ok(ds)
    };
    Ok(ErrorTrajectorySet {
        mode: ErrorMode::OutputFeedback,
        horizon: w.len(),
        state_errors: wrap(combined, Role::Error)?,
        estimation_errors: Some(wrap(est, Role::EstimationError)?),
        nominal_errors: Some(wrap(nom, Role::NominalError)?),
        gain_k: sys.k.clone(),
        gain_l: Some(sys.l.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_gaussian;
    use crate::linalg::{mat, matrix_power, vector};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_sys(a: f64, b: f64, k: f64, l: f64) -> LtiSystem {
        LtiSystem {
            a: mat(&[&[a]]),
            b: mat(&[&[b]]),
            c: mat(&[&[1.0]]),
            d: mat(&[&[0.0]]),
            k: mat(&[&[k]]),
            l: mat(&[&[l]]),
        }
    }

    fn ds(role: Role, samples: Vec<Mat>) -> TrajectoryDataset {
        TrajectoryDataset::new(role, samples, None).unwrap()
    }

    /// Explicit convolution `e(t) = Σ_{i<t} A_K^{t-1-i} w(i)`.
    fn explicit_sum(a_k: &Mat, w: &Mat) -> Mat {
        let (n, t) = w.shape();
        let mut out = Mat::zeros(n, t);
        for step in 1..=t {
            let mut acc = Vector::zeros(n);
            for i in 0..step {
                acc += matrix_power(a_k, step - 1 - i) * w.column(i);
            }
            out.set_column(step - 1, &acc);
        }
        out
    }

    #[test]
    fn zero_forcing_gives_zero_errors() {
        let sys = scalar_sys(0.5, 0.0, 0.0, 0.0);
        let w = ds(Role::Disturbance, vec![Mat::zeros(1, 5); 3]);
        let e = propagate_state_errors(&sys, &w).unwrap();
        assert!(e.state_errors.samples.iter().all(|s| s.amax() == 0.0));
    }

    #[test]
    fn scalar_hand_iteration() {
        let sys = scalar_sys(0.5, 0.0, 0.0, 0.0);
        let w = ds(Role::Disturbance, vec![mat(&[&[1.0, 1.0, 1.0]])]);
        let e = propagate_state_errors(&sys, &w).unwrap();
        assert_abs_diff_eq!(e.state_errors.samples[0], mat(&[&[1.0, 1.5, 1.75]]), epsilon = 1e-15);
        // first error equals first disturbance
        assert_eq!(e.state_errors.samples[0][(0, 0)], 1.0);
    }

    #[test]
    fn recursion_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a_k = Mat::from_fn(2, 2, |_, _| rng.gen_range(-0.6..0.6));
            let w = Mat::from_fn(2, 10, |_, _| rng.gen_range(-1.0..1.0));
            let diff = propagate_single(&a_k, &w) - explicit_sum(&a_k, &w);
            assert!(diff.amax() < 1e-12);
        }
    }

    #[test]
    fn unstable_feedback_refused() {
        let sys = scalar_sys(1.5, 0.0, 0.0, 0.0);
        let w = ds(Role::Disturbance, vec![Mat::zeros(1, 2)]);
        assert!(matches!(propagate_state_errors(&sys, &w), Err(Error::Unstable { .. })));
        let wrong = ds(Role::Noise, vec![Mat::zeros(1, 2)]);
        assert!(propagate_state_errors(&scalar_sys(0.5, 0.0, 0.0, 0.0), &wrong).is_err());
    }

    #[test]
    fn output_errors_hand_iteration() {
        let sys = scalar_sys(0.5, 0.0, 0.0, 0.2);
        let w = ds(Role::Disturbance, vec![mat(&[&[1.0, 0.0]])]);
        let eta = ds(Role::Noise, vec![mat(&[&[1.0, 0.0]])]);
        let set = propagate_output_errors(&sys, &w, &eta).unwrap();
        let est = &set.estimation_errors.as_ref().unwrap().samples[0];
        let nom = &set.nominal_errors.as_ref().unwrap().samples[0];
        assert_abs_diff_eq!(*est, mat(&[&[0.8, 0.24]]), epsilon = 1e-14);
        assert_abs_diff_eq!(*nom, mat(&[&[0.2, 0.26]]), epsilon = 1e-14);
        assert_abs_diff_eq!(set.state_errors.samples[0], mat(&[&[1.0, 0.5]]), epsilon = 1e-14);
    }

    #[test]
    fn output_errors_without_observer_gain() {
        // stable plant so that A - LC = A is Schur with L = 0
        let sys = scalar_sys(0.6, 1.0, -0.3, 0.0);
        let w = ds(Role::Disturbance, vec![mat(&[&[0.3, -0.2, 0.5, 0.1]])]);
        let eta = ds(Role::Noise, vec![mat(&[&[1.0, 2.0, -1.0, 0.4]])]);
        let set = propagate_output_errors(&sys, &w, &eta).unwrap();
        let open = propagate_single(&sys.a, &w.samples[0]);
        assert_abs_diff_eq!(set.estimation_errors.unwrap().samples[0], open, epsilon = 1e-15);
        assert!(set.nominal_errors.unwrap().samples[0].amax() == 0.0);
    }

    #[test]
    fn output_zero_noise_zero_errors() {
        let sys = scalar_sys(0.5, 0.0, 0.0, 0.2);
        let w = ds(Role::Disturbance, vec![Mat::zeros(1, 4)]);
        let eta = ds(Role::Noise, vec![Mat::zeros(1, 4)]);
        let set = propagate_output_errors(&sys, &w, &eta).unwrap();
        assert_eq!(set.state_errors.samples[0].amax(), 0.0);
    }

    #[test]
    fn misaligned_datasets_rejected() {
        let sys = scalar_sys(0.5, 0.0, 0.0, 0.2);
        let w = ds(Role::Disturbance, vec![Mat::zeros(1, 4); 2]);
        let eta = ds(Role::Noise, vec![Mat::zeros(1, 4); 3]);
        assert!(matches!(
            propagate_output_errors(&sys, &w, &eta),
            Err(Error::Data(DataError::Misaligned(_)))
        ));
        let eta = ds(Role::Noise, vec![Mat::zeros(1, 5); 2]);
        assert!(propagate_output_errors(&sys, &w, &eta).is_err());
    }

    #[test]
    fn output_identity_against_three_system_simulation() {
        let sys = crate::testutil::pendulum();
        let w = generate_gaussian(Role::Disturbance, 15, 1, &(Mat::identity(2, 2) * 1e-3), &vector(&[0.0, 0.0]), 3).unwrap();
        let eta = generate_gaussian(Role::Noise, 15, 1, &mat(&[&[1e-4]]), &vector(&[0.0]), 4).unwrap();
        let (est, nom) = propagate_output_single(&sys, &w.samples[0], &eta.samples[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = vector(&[0.3, -0.2]);
        let (mut x, mut xhat, mut z) = (x0.clone(), x0.clone(), x0);
        for t in 0..15 {
            let v = vector(&[rng.gen_range(-1.0..1.0)]);
            let u = &sys.k * (&xhat - &z) + &v;
            let y = sys.output(&x, &u, &eta.samples[0].column(t).into_owned()).unwrap();
            x = sys.step_plant(&x, &u, &w.samples[0].column(t).into_owned()).unwrap();
            xhat = sys.step_observer(&xhat, &u, &y).unwrap();
            z = sys.step_nominal(&z, &v).unwrap();
            assert!((&x - &xhat - est.column(t)).amax() < 1e-10);
            assert!((&xhat - &z - nom.column(t)).amax() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn propagation_commutes_with_permutation(seed in 0u64..500) {
            let sys = crate::testutil::pendulum();
            let w = generate_gaussian(Role::Disturbance, 6, 5, &Mat::identity(2, 2), &vector(&[0.0, 0.0]), seed).unwrap();
            let perm = [3usize, 0, 4, 1, 2];
            let a = propagate_state_errors(&sys, &w.select(&perm)).unwrap();
            let b = propagate_state_errors(&sys, &w).unwrap();
            for (pos, &k) in perm.iter().enumerate() {
                prop_assert_eq!(&a.state_errors.samples[pos], &b.state_errors.samples[k]);
            }
        }
    }
}
