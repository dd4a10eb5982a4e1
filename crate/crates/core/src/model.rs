//! Linear time-invariant plant with fixed tube and observer gains.
//!
//! The plant is `x⁺ = A x + B u + w`, `y = C x + D u + η`. The error
//! feedback gain `K` must make `A + BK` Schur stable; when output feedback is
//! used the observer gain `L` must make `A − LC` Schur stable as well.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Default margin below one for a spectral radius to count as stable.
pub const DEFAULT_SCHUR_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub spectral_radius: f64,
    pub stable: bool,
}

/// Spectral radius of `m` and whether it is strictly below `1 - margin`.
pub fn check_schur(m: &Mat) -> Result<StabilityReport> {
    check_schur_with_margin(m, DEFAULT_SCHUR_MARGIN)
}

pub fn check_schur_with_margin(m: &Mat, margin: f64) -> Result<StabilityReport> {
    if !m.is_square() {
        return Err(dim_err(
            "check_schur",
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let spectral_radius = linalg::spectral_radius(m);
    Ok(StabilityReport {
        spectral_radius,
        stable: spectral_radius < 1.0 - margin,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    /// Error feedback gain (n_u × n_x).
    pub k: Mat,
    /// Observer gain (n_x × n_y).
    pub l: Mat,
}

impl LtiSystem {
    /// Builds a system and checks dimensions and that `A + BK` is Schur.
    ///
    /// The observer gain is only validated by [`LtiSystem::validate_observer`],
    /// since state-feedback users may pass a placeholder `L`.
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat, k: Mat, l: Mat) -> Result<Self> {
        let nx = a.nrows();
        if !a.is_square() {
            return Err(dim_err("A", "square", format!("{}x{}", a.nrows(), a.ncols())));
        }
        let nu = b.ncols();
        let ny = c.nrows();
        let checks = [
            ("B", b.shape(), (nx, nu)),
            ("C", c.shape(), (ny, nx)),
            ("D", d.shape(), (ny, nu)),
            ("K", k.shape(), (nu, nx)),
            ("L", l.shape(), (nx, ny)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(dim_err(
                    name,
                    format!("{}x{}", want.0, want.1),
                    format!("{}x{}", got.0, got.1),
                ));
            }
        }
        let sys = Self { a, b, c, d, k, l };
        let report = check_schur(&sys.a_k())?;
        if !report.stable {
            return Err(Error::Unstable {
                name: "A + BK".into(),
                radius: report.spectral_radius,
            });
        }
        Ok(sys)
    }

    /// State-feedback-only system: `C = I`, `D = 0`, `L = 0`.
    pub fn state_feedback(a: Mat, b: Mat, k: Mat) -> Result<Self> {
        let nx = a.nrows();
        let nu = b.ncols();
        Self::new(
            a,
            b,
            Mat::identity(nx, nx),
            Mat::zeros(nx, nu),
            k,
            Mat::zeros(nx, nx),
        )
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c.nrows()
    }

    pub fn a_k(&self) -> Mat {
        &self.a + &self.b * &self.k
    }

    pub fn a_l(&self) -> Mat {
        &self.a - &self.l * &self.c
    }

    pub fn validate_observer(&self) -> Result<()> {
        let report = check_schur(&self.a_l())?;
        if report.stable {
            Ok(())
        } else {
            Err(Error::Unstable {
                name: "A - LC".into(),
                radius: report.spectral_radius,
            })
        }
    }

    fn expect_len(&self, what: &str, v: &Vector, n: usize) -> Result<()> {
        if v.len() == n {
            Ok(())
        } else {
            Err(dim_err(what, n, v.len()))
        }
    }

    /// `A x + B u + w`.
    pub fn step_plant(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
        self.expect_len("state", x, self.nx())?;
        self.expect_len("input", u, self.nu())?;
        self.expect_len("disturbance", w, self.nx())?;
        Ok(&self.a * x + &self.b * u + w)
    }

    /// `A z + B v`.
    pub fn step_nominal(&self, z: &Vector, v: &Vector) -> Result<Vector> {
        self.expect_len("nominal state", z, self.nx())?;
        self.expect_len("nominal input", v, self.nu())?;
        Ok(&self.a * z + &self.b * v)
    }

    /// `C x + D u + η`.
    pub fn output(&self, x: &Vector, u: &Vector, eta: &Vector) -> Result<Vector> {
        self.expect_len("state", x, self.nx())?;
        self.expect_len("input", u, self.nu())?;
        self.expect_len("noise", eta, self.ny())?;
        Ok(&self.c * x + &self.d * u + eta)
    }

    /// Luenberger update `A x̂ + B u + L (y − C x̂ − D u)`.
    pub fn step_observer(&self, xhat: &Vector, u: &Vector, y: &Vector) -> Result<Vector> {
        self.expect_len("estimate", xhat, self.nx())?;
        self.expect_len("input", u, self.nu())?;
        self.expect_len("measurement", y, self.ny())?;
        let innovation = y - &self.c * xhat - &self.d * u;
        Ok(&self.a * xhat + &self.b * u + &self.l * innovation)
    }
}

/// Quadratic stage cost `‖x‖²_Q + ‖u‖²_R` and terminal cost `‖x‖²_{P_f}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: Mat,
    pub r: Mat,
    pub p_f: Mat,
}

impl CostSpec {
    pub fn new(q: Mat, r: Mat, p_f: Mat) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r), ("P_f", &p_f)] {
            if !linalg::is_symmetric(m, 1e-12) {
                return Err(Error::Invalid(format!("{name} must be square and symmetric")));
            }
        }
        if q.shape() != p_f.shape() {
            return Err(dim_err("P_f", format!("{:?}", q.shape()), format!("{:?}", p_f.shape())));
        }
        if linalg::min_eigenvalue(&q) < -1e-12 || linalg::min_eigenvalue(&p_f) < -1e-12 {
            return Err(Error::Invalid("Q and P_f must be positive semidefinite".into()));
        }
        if r.nrows() == 0 || linalg::min_eigenvalue(&r) <= 0.0 {
            return Err(Error::Invalid("R must be positive definite".into()));
        }
        Ok(Self { q, r, p_f })
    }

    /// Zero terminal weight.
    pub fn stage_only(q: Mat, r: Mat) -> Result<Self> {
        let n = q.nrows();
        Self::new(q, r, Mat::zeros(n, n))
    }

    pub fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    pub fn terminal(&self, x: &Vector) -> f64 {
        x.dot(&(&self.p_f * x))
    }
}
