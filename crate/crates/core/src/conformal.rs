//! Split conformal calibration of joint-in-time confidence regions for error
//! trajectories.
//!
//! A score function maps a whole trajectory `(e(1), …, e(T))` to a scalar as
//! a maximum over time of a per-step norm. Calibrating takes the
//! `⌈(M+1)p⌉`-th smallest score over `M` held-out trajectories; the sublevel
//! set `{E : s(E) ≤ q̂}` then covers a fresh trajectory with probability at
//! least `p`, and at most `p + 1/(M+1)` for continuous scores.
//!
//! Because every score is a maximum over time, the region factors exactly
//! into per-step sets, which [`ConfidenceRegion::project`] exposes as
//! ellipsoids for constraint tightening.

use std::path::Path;

use nalgebra::Cholesky;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, SplitSpec, TrajectoryDataset};
use crate::error::{CalibrationError, Error, Result};
use crate::geometry::Ellipsoid;
use crate::linalg::{from_rows, symmetrize, to_rows, Mat, Vector};
use crate::propagation::ErrorTrajectorySet;

/// Relative diagonal loading applied to fitted covariances.
pub const COVARIANCE_REG_REL: f64 = 1e-8;
/// Absolute floor of the diagonal loading.
pub const COVARIANCE_REG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    MaxNorm,
    WeightedMaxNorm,
    Mahalanobis,
}

/// Sample mean and regularized covariance of the error at one time step.
#[derive(Debug, Clone)]
pub struct StepMoments {
    pub mean: Vector,
    pub cov: Mat,
    chol: Mat,
}

impl StepMoments {
    pub fn new(mean: Vector, cov: Mat) -> Result<Self> {
        let chol = Cholesky::new(symmetrize(&cov))
            .ok_or_else(|| {
                CalibrationError::Other("covariance is not positive definite".into())
            })?
            .l();
        Ok(Self { mean, cov, chol })
    }

    /// `‖e − μ̂‖_{Σ̂⁻¹}`.
    pub fn mahalanobis(&self, e: &Vector) -> f64 {
        let centered = e - &self.mean;
        self.chol
            .solve_lower_triangular(&centered)
            .expect("cholesky factor has a positive diagonal")
            .norm()
    }
}

#[derive(Debug, Clone)]
pub enum ScoreFunction {
    /// `max_t ‖e(t)‖₂`.
    MaxNorm { horizon: usize },
    /// `max_t α_t ‖e(t)‖₂` with user supplied weights.
    WeightedMaxNorm { weights: Vec<f64> },
    /// `max_t ‖e(t) − μ̂(t)‖_{Σ̂⁻¹(t)}`.
    Mahalanobis { moments: Vec<StepMoments> },
}

impl ScoreFunction {
    pub fn weighted(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Invalid("score weights must be positive".into()));
        }
        Ok(Self::WeightedMaxNorm { weights })
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            Self::MaxNorm { .. } => ScoreKind::MaxNorm,
            Self::WeightedMaxNorm { .. } => ScoreKind::WeightedMaxNorm,
            Self::Mahalanobis { .. } => ScoreKind::Mahalanobis,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::MaxNorm { horizon } => *horizon,
            Self::WeightedMaxNorm { weights } => weights.len(),
            Self::Mahalanobis { moments } => moments.len(),
        }
    }

    /// Per-step value at time `t` (1-based).
    pub fn step_value(&self, t: usize, e: &Vector) -> f64 {
        match self {
            Self::MaxNorm { .. } => e.norm(),
            Self::WeightedMaxNorm { weights } => weights[t - 1] * e.norm(),
            Self::Mahalanobis { moments } => moments[t - 1].mahalanobis(e),
        }
    }

    /// Per-step values for the first `min(len, horizon)` columns of a
    /// trajectory whose column `j` is the error at `t = j + 1`.
    pub fn step_scores(&self, traj: &Mat) -> Vec<f64> {
        let steps = traj.ncols().min(self.horizon());
        (0..steps)
            .map(|j| self.step_value(j + 1, &traj.column(j).into_owned()))
            .collect()
    }

    pub fn score(&self, traj: &Mat) -> Result<f64> {
        if traj.ncols() < self.horizon() {
            return Err(Error::Invalid(format!(
                "trajectory has {} steps, score needs {}",
                traj.ncols(),
                self.horizon()
            )));
        }
        Ok(self.step_scores(traj).into_iter().fold(0.0, f64::max))
    }
}

/// Per-step sample moments over the fit trajectories.
///
/// Covariances use the unbiased `1/(M−1)` normalization (around zero when
/// `zero_mean` is set), are symmetrized and receive a diagonal loading of
/// `1e-8·tr(Σ̂)/n` with absolute floor `1e-12`.
pub fn fit_moments(fit: &TrajectoryDataset, zero_mean: bool) -> Result<Vec<StepMoments>> {
    let n = fit.dim();
    let m = fit.count();
    if m < n + 1 {
        return Err(CalibrationError::TooFewFitSamples {
            available: m,
            needed: n + 1,
        }
        .into());
    }
    (0..fit.len())
        .map(|j| {
            let mean = if zero_mean {
                Vector::zeros(n)
            } else {
                fit.samples
                    .iter()
                    .fold(Vector::zeros(n), |acc, s| acc + s.column(j))
                    / m as f64
            };
            let mut cov = Mat::zeros(n, n);
            for s in &fit.samples {
                let d = s.column(j) - &mean;
                cov += &d * d.transpose();
            }
            cov /= (m - 1) as f64;
            let mut cov = symmetrize(&cov);
            let delta = (COVARIANCE_REG_REL * cov.trace() / n as f64).max(COVARIANCE_REG_FLOOR);
            for i in 0..n {
                cov[(i, i)] += delta;
            }
            StepMoments::new(mean, cov)
        })
        .collect()
}

/// Rank `k = ⌈(M+1)p⌉`, guarding against floating-point overshoot when
/// `(M+1)p` is an integer.
pub fn quantile_rank(m: usize, p: f64) -> usize {
    let x = (m as f64 + 1.0) * p;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Smallest calibration size for which level `p` gives a finite quantile.
pub fn min_calibration_size(p: f64) -> usize {
    (1..).find(|&m| quantile_rank(m, p) <= m).unwrap_or(usize::MAX)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    pub qhat: f64,
    /// 1-based rank of `q̂` among the sorted scores.
    pub rank: usize,
}

pub fn conformal_quantile(scores: &[f64], p: f64) -> Result<Quantile> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid(format!("level {p} outside (0, 1)")));
    }
    let m = scores.len();
    if m == 0 {
        return Err(CalibrationError::InsufficientSamples {
            available: 0,
            needed: min_calibration_size(p),
        }
        .into());
    }
    let k = quantile_rank(m, p);
    if k > m {
        return Err(CalibrationError::InsufficientSamples {
            available: m,
            needed: min_calibration_size(p),
        }
        .into());
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Quantile {
        qhat: sorted[k - 1],
        rank: k,
    })
}

/// `ϑ̃ = ϑ − √(−ln ε / (2M))`.
pub fn pac_tighten(violation: f64, epsilon: f64, m: usize) -> Result<f64> {
    if !(violation > 0.0 && violation < 1.0) || !(epsilon > 0.0 && epsilon < 1.0) || m == 0 {
        return Err(Error::Invalid("PAC tightening needs ϑ, ε in (0,1) and M ≥ 1".into()));
    }
    let slack = (-epsilon.ln() / (2.0 * m as f64)).sqrt();
    let tightened = violation - slack;
    if tightened <= 0.0 {
        let needed = (-epsilon.ln() / (2.0 * violation * violation)).ceil() as usize;
        let needed = if (-epsilon.ln() / (2.0 * needed as f64)).sqrt() >= violation {
            needed + 1
        } else {
            needed
        };
        return Err(CalibrationError::PacInfeasible {
            level: violation,
            tightened,
            needed,
        }
        .into());
    }
    Ok(tightened)
}

/// Per-step miscoverage that makes a union of `horizon` marginal regions
/// jointly cover with probability `p`.
pub fn union_bound_levels(p: f64, horizon: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || horizon == 0 {
        return Err(Error::Invalid("union bound needs p in (0,1) and horizon ≥ 1".into()));
    }
    Ok((1.0 - p) / horizon as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacInfo {
    pub epsilon: f64,
    pub tightened_violation: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub kind: ScoreKind,
    /// Nominal joint coverage `p`.
    pub level: f64,
    /// Required for the Mahalanobis score; optional otherwise.
    pub split: Option<SplitSpec>,
    pub pac_epsilon: Option<f64>,
    /// Force `μ̂ ≡ 0`.
    pub zero_mean: bool,
    /// Weights for the weighted max-norm score.
    pub weights: Option<Vec<f64>>,
}

impl CalibrationOptions {
    pub fn mahalanobis(level: f64, split: SplitSpec) -> Self {
        Self {
            kind: ScoreKind::Mahalanobis,
            level,
            split: Some(split),
            pac_epsilon: None,
            zero_mean: false,
            weights: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConfidenceRegion {
    pub score: ScoreFunction,
    pub qhat: f64,
    /// Nominal joint coverage `p` requested by the caller.
    pub level: f64,
    pub m_cal: usize,
    /// Rank of `q̂` among the sorted calibration scores.
    pub rank: usize,
    pub pac: Option<PacInfo>,
    /// Error dimension.
    pub dim: usize,
    /// Dataset positions used for fitting; disjoint from `cal_indices`.
    pub fit_indices: Vec<usize>,
    pub cal_indices: Vec<usize>,
}

impl ConfidenceRegion {
    pub fn horizon(&self) -> usize {
        self.score.horizon()
    }

    pub fn kind(&self) -> ScoreKind {
        self.score.kind()
    }

    pub fn contains(&self, traj: &Mat) -> Result<bool> {
        Ok(self.score.score(traj)? <= self.qhat)
    }

    /// Marginal set of the error at time `t` (1-based).
    pub fn project(&self, t: usize) -> Result<Ellipsoid> {
        let horizon = self.horizon();
        if t == 0 || t > horizon {
            return Err(CalibrationError::TimeOutOfRange { t, horizon }.into());
        }
        match &self.score {
            ScoreFunction::Mahalanobis { moments } => {
                let m = &moments[t - 1];
                Ellipsoid::new(m.mean.clone(), m.cov.clone(), self.qhat)
            }
            ScoreFunction::MaxNorm { .. } => Ellipsoid::ball(self.dim, self.qhat),
            ScoreFunction::WeightedMaxNorm { weights } => {
                Ellipsoid::ball(self.dim, self.qhat / weights[t - 1])
            }
        }
    }

    /// Projections for `t = 1..=horizon`.
    pub fn projections(&self) -> Result<Vec<Ellipsoid>> {
        (1..=self.horizon()).map(|t| self.project(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = RegionFile::from(self);
        crate::io::write_atomic(path, crate::io::to_json_string(&file)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: RegionFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        file.into_region()
    }
}

/// Scores every trajectory, in dataset order.
pub fn score_dataset(sf: &ScoreFunction, ds: &TrajectoryDataset) -> Result<Vec<f64>> {
    ds.samples.par_iter().map(|s| sf.score(s)).collect()
}

/// Calibrates a region for the errors that enter constraint tightening
/// (`x − z` in state feedback, `ê + ē` in output feedback).
pub fn calibrate(errors: &ErrorTrajectorySet, options: &CalibrationOptions) -> Result<ConfidenceRegion> {
    calibrate_dataset(&errors.state_errors, options)
}

pub fn calibrate_dataset(
    ds: &TrajectoryDataset,
    options: &CalibrationOptions,
) -> Result<ConfidenceRegion> {
    let (fit, cal) = match &options.split {
        Some(spec) => {
            let s = split(ds, spec)?;
            (Some(s.fit), s.cal)
        }
        None => (None, ds.clone()),
    };
    let horizon = ds.len();
    let score = match options.kind {
        ScoreKind::MaxNorm => ScoreFunction::MaxNorm { horizon },
        ScoreKind::WeightedMaxNorm => {
            let weights = options
                .weights
                .clone()
                .ok_or_else(|| Error::Invalid("weighted score needs weights".into()))?;
            if weights.len() != horizon {
                return Err(crate::error::dim_err("score weights", horizon, weights.len()));
            }
            ScoreFunction::weighted(weights)?
        }
        ScoreKind::Mahalanobis => {
            let fit = fit.as_ref().ok_or_else(|| {
                CalibrationError::Other("the Mahalanobis score needs a fit split".into())
            })?;
            ScoreFunction::Mahalanobis {
                moments: fit_moments(fit, options.zero_mean)?,
            }
        }
    };
    let m_cal = cal.count();
    let (effective, pac) = match options.pac_epsilon {
        Some(epsilon) => {
            let tightened = pac_tighten(1.0 - options.level, epsilon, m_cal)?;
            (
                1.0 - tightened,
                Some(PacInfo {
                    epsilon,
                    tightened_violation: tightened,
                }),
            )
        }
        None => (options.level, None),
    };
    let scores = score_dataset(&score, &cal)?;
    let q = conformal_quantile(&scores, effective)?;
    let fit_indices = fit.map(|f| f.origin).unwrap_or_default();
    debug_assert!(fit_indices.iter().all(|i| !cal.origin.contains(i)));
    log::info!(
        "calibrated {:?} score: q̂ = {:.6} (rank {} of {}, level {})",
        score.kind(),
        q.qhat,
        q.rank,
        m_cal,
        effective
    );
    Ok(ConfidenceRegion {
        score,
        qhat: q.qhat,
        level: options.level,
        m_cal,
        rank: q.rank,
        pac,
        dim: ds.dim(),
        fit_indices,
        cal_indices: cal.origin,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionFile {
    kind: ScoreKind,
    level: f64,
    qhat: f64,
    m_cal: usize,
    rank: usize,
    pac: Option<PacInfo>,
    dim: usize,
    horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    /// Per-step centers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<Vec<f64>>>,
    /// Per-step shapes, each flattened row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covariance: Option<Vec<Vec<f64>>>,
    fit_indices: Vec<usize>,
    cal_indices: Vec<usize>,
}

impl From<&ConfidenceRegion> for RegionFile {
    fn from(r: &ConfidenceRegion) -> Self {
        let (weights, mean, covariance) = match &r.score {
            ScoreFunction::MaxNorm { .. } => (None, None, None),
            ScoreFunction::WeightedMaxNorm { weights } => (Some(weights.clone()), None, None),
            ScoreFunction::Mahalanobis { moments } => (
                None,
                Some(moments.iter().map(|m| m.mean.iter().copied().collect()).collect()),
                Some(
                    moments
                        .iter()
                        .map(|m| to_rows(&m.cov).concat())
                        .collect(),
                ),
            ),
        };
        Self {
            kind: r.kind(),
            level: r.level,
            qhat: r.qhat,
            m_cal: r.m_cal,
            rank: r.rank,
            pac: r.pac,
            dim: r.dim,
            horizon: r.horizon(),
            weights,
            mean,
            covariance,
            fit_indices: r.fit_indices.clone(),
            cal_indices: r.cal_indices.clone(),
        }
    }
}

impl RegionFile {
    fn into_region(self) -> Result<ConfidenceRegion> {
        let n = self.dim;
        let score = match self.kind {
            ScoreKind::MaxNorm => ScoreFunction::MaxNorm {
                horizon: self.horizon,
            },
            ScoreKind::WeightedMaxNorm => ScoreFunction::weighted(
                self.weights
                    .ok_or_else(|| Error::Config("region file lacks weights".into()))?,
            )?,
            ScoreKind::Mahalanobis => {
                let (means, covs) = self
                    .mean
                    .zip(self.covariance)
                    .ok_or_else(|| Error::Config("region file lacks moments".into()))?;
                if means.len() != self.horizon || covs.len() != self.horizon {
                    return Err(Error::Config("region file horizon mismatch".into()));
                }
                let moments = means
                    .into_iter()
                    .zip(covs)
                    .map(|(m, c)| {
                        if m.len() != n || c.len() != n * n {
                            return Err(Error::Config("region file moment size mismatch".into()));
                        }
                        let rows: Vec<Vec<f64>> = c.chunks(n).map(<[f64]>::to_vec).collect();
                        StepMoments::new(Vector::from_vec(m), from_rows(&rows)?)
                    })
                    .collect::<Result<_>>()?;
                ScoreFunction::Mahalanobis { moments }
            }
        };
        Ok(ConfidenceRegion {
            score,
            qhat: self.qhat,
            level: self.level,
            m_cal: self.m_cal,
            rank: self.rank,
            pac: self.pac,
            dim: n,
            fit_indices: self.fit_indices,
            cal_indices: self.cal_indices,
        })
    }
}
