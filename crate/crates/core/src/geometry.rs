//! Halfspace polytopes, ellipsoids and the tightening operations between
//! them.
//!
//! Tightening a polytope `{x : Ax ≤ b}` by an ellipsoid is exact facet by
//! facet: the Pontryagin difference keeps the normals and lowers each offset
//! by the ellipsoid's support value in that direction.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, symmetrize, Mat, Vector};
use crate::qp::{solve_lp, PreparedQp, QpSettings, QpStatus};

/// Bound on the Chebyshev radius in the emptiness LP.
const CHEBYSHEV_CAP: f64 = 1e6;
/// Chebyshev radii below `-EMPTY_TOL` mark a set as empty.
const EMPTY_TOL: f64 = 1e-9;

/// `{x : aᵢᵀx ≤ bᵢ}` with unit-length normals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfspacePolytope {
    normals: Mat,
    offsets: Vector,
}

impl HalfspacePolytope {
    /// Normalizes every row; zero rows are rejected.
    pub fn new(normals: Mat, offsets: Vector) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(dim_err("polytope offsets", normals.nrows(), offsets.len()));
        }
        let mut normals = normals;
        let mut offsets = offsets;
        for i in 0..normals.nrows() {
            let norm = normals.row(i).norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Invalid(format!("facet {} has a zero normal", i + 1)));
            }
            normals.row_mut(i).unscale_mut(norm);
            offsets[i] /= norm;
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box `lo ≤ x ≤ hi`, facets ordered `+e₁, −e₁, +e₂, …`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(dim_err("box bounds", lo.len(), hi.len()));
        }
        let n = lo.len();
        let mut normals = Mat::zeros(2 * n, n);
        let mut offsets = Vector::zeros(2 * n);
        for i in 0..n {
            if lo[i] > hi[i] {
                return Err(Error::Invalid(format!("box coordinate {} has lo > hi", i + 1)));
            }
            normals[(2 * i, i)] = 1.0;
            offsets[2 * i] = hi[i];
            normals[(2 * i + 1, i)] = -1.0;
            offsets[2 * i + 1] = -lo[i];
        }
        Ok(Self { normals, offsets })
    }

    pub fn symmetric_box(half_widths: &[f64]) -> Result<Self> {
        let lo: Vec<f64> = half_widths.iter().map(|h| -h).collect();
        Self::from_box(&lo, half_widths)
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn facets(&self) -> usize {
        self.offsets.len()
    }

    pub fn normals(&self) -> &Mat {
        &self.normals
    }

    pub fn offsets(&self) -> &Vector {
        &self.offsets
    }

    /// Same normals, new offsets.
    pub fn with_offsets(&self, offsets: Vector) -> Result<Self> {
        if offsets.len() != self.facets() {
            return Err(dim_err("polytope offsets", self.facets(), offsets.len()));
        }
        Ok(Self {
            normals: self.normals.clone(),
            offsets,
        })
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        (&self.normals * x - &self.offsets).iter().all(|&s| s <= tol)
    }

    /// Checks `bᵢ > 0` for every facet, i.e. the origin is interior.
    pub fn require_origin_interior(&self, name: &str) -> Result<()> {
        match self.offsets.iter().position(|&b| !(b > 0.0)) {
            Some(i) => Err(Error::Invalid(format!(
                "{name} must contain the origin in its interior (facet {} has offset {})",
                i + 1,
                self.offsets[i]
            ))),
            None => Ok(()),
        }
    }

    /// Center and radius of the largest inscribed ball. A negative radius
    /// means the set is empty; radii are capped at 10⁶.
    pub fn chebyshev_center(&self) -> Result<(Vector, f64)> {
        let n = self.dim();
        let m = self.facets();
        let mut a = Mat::zeros(m + 1, n + 1);
        let mut b = Vector::zeros(m + 1);
        a.view_mut((0, 0), (m, n)).copy_from(&self.normals);
        for i in 0..m {
            a[(i, n)] = 1.0;
            b[i] = self.offsets[i];
        }
        a[(m, n)] = 1.0;
        b[m] = CHEBYSHEV_CAP;
        let mut c = Vector::zeros(n + 1);
        c[n] = -1.0;
        let sol = solve_lp(&c, &a, &b, &Mat::zeros(0, n + 1), &Vector::zeros(0))?;
        if sol.status != QpStatus::Optimal {
            return Err(Error::Qp(format!("Chebyshev center LP ended with {:?}", sol.status)));
        }
        Ok((sol.xi.rows(0, n).into_owned(), sol.xi[n]))
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.chebyshev_center()?.1 < -EMPTY_TOL)
    }

    /// `max_{x ∈ P} wᵀx` for each direction, sharing one factorization.
    pub fn support_values(&self, directions: &[Vector]) -> Result<Vec<f64>> {
        let n = self.dim();
        let prepared = PreparedQp::new(
            &Mat::zeros(n, n),
            &Mat::zeros(0, n),
            &self.normals,
            QpSettings::default(),
        )?;
        directions
            .iter()
            .map(|w| {
                let sol = prepared.solve(&(-w), &Vector::zeros(0), &self.offsets, None)?;
                match sol.status {
                    QpStatus::Optimal => Ok(-sol.objective),
                    other => Err(Error::Qp(format!("support LP ended with {other:?}"))),
                }
            })
            .collect()
    }
}

/// `{e : (e−μ)ᵀΣ⁻¹(e−μ) ≤ r²}`, read through its support function when `Σ`
/// is singular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vector,
    pub shape: Mat,
    pub radius: f64,
}

impl Ellipsoid {
    pub fn new(center: Vector, shape: Mat, radius: f64) -> Result<Self> {
        let n = center.len();
        if shape.shape() != (n, n) {
            return Err(dim_err("ellipsoid shape", format!("{n}x{n}"), format!("{:?}", shape.shape())));
        }
        if !(radius >= 0.0) {
            return Err(Error::Invalid(format!("ellipsoid radius {radius} is negative")));
        }
        let scale = shape.amax().max(1.0);
        if !is_symmetric(&shape, 1e-9 * scale) {
            return Err(Error::Invalid("ellipsoid shape is not symmetric".into()));
        }
        let shape = symmetrize(&shape);
        if n > 0 {
            let lam = min_eigenvalue(&shape);
            if lam < -1e-12 * scale {
                return Err(Error::NotPsd { min_eigenvalue: lam });
            }
        }
        Ok(Self {
            center,
            shape,
            radius,
        })
    }

    /// Euclidean ball around the origin.
    pub fn ball(n: usize, radius: f64) -> Result<Self> {
        Self::new(Vector::zeros(n), Mat::identity(n, n), radius)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `aᵀμ + r√(aᵀΣa)`.
    pub fn support(&self, a: &Vector) -> f64 {
        let quad = a.dot(&(&self.shape * a)).max(0.0);
        a.dot(&self.center) + self.radius * quad.sqrt()
    }

    /// Point attaining the support value in direction `a`.
    pub fn maximizer(&self, a: &Vector) -> Vector {
        let sa = &self.shape * a;
        let quad = a.dot(&sa);
        if quad <= 0.0 {
            return self.center.clone();
        }
        &self.center + sa * (self.radius / quad.sqrt())
    }

    /// Image under a linear map: center `Kμ`, shape `KΣKᵀ`, same radius.
    pub fn image(&self, k: &Mat) -> Result<Self> {
        if k.ncols() != self.dim() {
            return Err(dim_err("ellipsoid image map", self.dim(), k.ncols()));
        }
        Ok(Self {
            center: k * &self.center,
            shape: symmetrize(&(k * &self.shape * k.transpose())),
            radius: self.radius,
        })
    }

    /// Membership test. Singular shapes are handled through an
    /// eigendecomposition: the offset must lie in the range of `Σ`.
    pub fn contains(&self, e: &Vector, tol: f64) -> bool {
        let d = e - &self.center;
        if let Some(ch) = self.shape.clone().cholesky() {
            let y = ch.l().solve_lower_triangular(&d).expect("positive diagonal");
            return y.norm() <= self.radius + tol;
        }
        let eig = self.shape.clone().symmetric_eigen();
        let cutoff = 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let mut quad = 0.0;
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            let c = eig.eigenvectors.column(i).dot(&d);
            if lam > cutoff {
                quad += c * c / lam;
            } else if c.abs() > tol {
                return false;
            }
        }
        quad.sqrt() <= self.radius + tol
    }
}

pub fn support(ell: &Ellipsoid, a: &Vector) -> Result<f64> {
    if a.len() != ell.dim() {
        return Err(dim_err("support direction", ell.dim(), a.len()));
    }
    Ok(ell.support(a))
}

/// Result of a tightening; `empty` is set when the difference has no points.
#[derive(Debug, Clone, PartialEq)]
pub struct Tightened {
    pub set: HalfspacePolytope,
    pub empty: bool,
}

/// Exact Pontryagin difference `P ⊖ ell`.
pub fn tighten(p: &HalfspacePolytope, ell: &Ellipsoid) -> Result<Tightened> {
    let set = tighten_offsets(p, ell)?;
    let empty = set.is_empty()?;
    Ok(Tightened { set, empty })
}

/// `P ⊖ ell` without the emptiness LP.
pub fn tighten_offsets(p: &HalfspacePolytope, ell: &Ellipsoid) -> Result<HalfspacePolytope> {
    if p.dim() != ell.dim() {
        return Err(dim_err("tightening", p.dim(), ell.dim()));
    }
    let offsets = Vector::from_fn(p.facets(), |i, _| {
        p.offsets[i] - ell.support(&p.normals.row(i).transpose())
    });
    p.with_offsets(offsets)
}

/// `U ⊖ K·ell`.
pub fn tighten_inputs(u: &HalfspacePolytope, k: &Mat, ell: &Ellipsoid) -> Result<Tightened> {
    if k.nrows() != u.dim() {
        return Err(dim_err("input gain rows", u.dim(), k.nrows()));
    }
    tighten(u, &ell.image(k)?)
}

/// Facet-wise minimum offsets, the exact intersection of sets sharing normals.
pub fn horizon_intersection(sets: &[HalfspacePolytope]) -> Result<HalfspacePolytope> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Invalid("horizon intersection of no sets".into()))?;
    let mut offsets = first.offsets.clone();
    for (t, s) in sets.iter().enumerate().skip(1) {
        if s.normals.shape() != first.normals.shape()
            || (&s.normals - &first.normals).amax() > 1e-12
        {
            return Err(Error::Invalid(format!(
                "set {} does not share the normals of the first set",
                t + 1
            )));
        }
        offsets = offsets.zip_map(&s.offsets, f64::min);
    }
    first.with_offsets(offsets)
}

/// Terminal constraint on the last nominal state.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSet {
    /// `z_N = 0` with terminal law `π_f ≡ 0`.
    Origin,
    /// `z_N ∈ Z_f` with linear terminal law `π_f(z) = K_f z`.
    Polytope { set: HalfspacePolytope, gain: Mat },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    /// `(A + BK_f) Z_f ⊆ Z_f`.
    pub invariant: bool,
    /// `K_f Z_f ⊆ V_∞`, when `V_∞` was given.
    pub inputs_admissible: bool,
    /// Largest `max_{z∈Z_f} aᵢᵀ(A+BK_f)z − bᵢ` over facets.
    pub worst_margin: f64,
}

impl InvarianceReport {
    pub fn ok(&self) -> bool {
        self.invariant && self.inputs_admissible
    }
}

/// Positive invariance of the terminal set under its terminal law, checked
/// with one LP per facet.
pub fn check_terminal_invariance(
    terminal: &TerminalSet,
    a: &Mat,
    b: &Mat,
    v_inf: Option<&HalfspacePolytope>,
) -> Result<InvarianceReport> {
    let (set, gain) = match terminal {
        TerminalSet::Origin => {
            return Ok(InvarianceReport {
                invariant: true,
                inputs_admissible: v_inf.is_none_or(|v| v.contains(&Vector::zeros(v.dim()), 0.0)),
                worst_margin: 0.0,
            })
        }
        TerminalSet::Polytope { set, gain } => (set, gain),
    };
    if a.nrows() != set.dim() || gain.shape() != (b.ncols(), a.ncols()) {
        return Err(dim_err(
            "terminal gain",
            format!("{}x{}", b.ncols(), a.ncols()),
            format!("{:?}", gain.shape()),
        ));
    }
    let closed = a + b * gain;
    let dirs: Vec<Vector> = (0..set.facets())
        .map(|i| closed.transpose() * set.normals.row(i).transpose())
        .collect();
    let values = set.support_values(&dirs)?;
    let worst_margin = values
        .iter()
        .zip(set.offsets.iter())
        .map(|(v, b)| v - b)
        .fold(f64::NEG_INFINITY, f64::max);
    let inputs_admissible = match v_inf {
        None => true,
        Some(v) => {
            let dirs: Vec<Vector> = (0..v.facets())
                .map(|j| gain.transpose() * v.normals.row(j).transpose())
                .collect();
            set.support_values(&dirs)?
                .iter()
                .zip(v.offsets.iter())
                .all(|(s, d)| *s <= d + 1e-9)
        }
    };
    Ok(InvarianceReport {
        invariant: worst_margin <= 1e-9,
        inputs_admissible,
        worst_margin,
    })
}
