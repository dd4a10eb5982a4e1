//! Monte Carlo closed-loop evaluation and baseline confidence regions.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::gamma_lr;

use crate::conformal::{
    calibrate_dataset, conformal_quantile, score_dataset, CalibrationOptions, ConfidenceRegion, ScoreFunction,
};
use crate::controller::{Measurement, OpenLoopPlan, SmpcConfig, StepDiagnostics};
use crate::data::{gaussian_block, generate_gaussian, uniform_block, Role, SplitSpec};
use crate::error::{dim_err, Error, Result};
use crate::geometry::Ellipsoid;
use crate::linalg::{psd_factor, symmetrize, Mat, Vector};
use crate::model::LtiSystem;
use crate::propagation::{propagate_state_errors, ErrorMode};
use crate::qp::QpStatus;

/// Distribution of one noise channel.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Gaussian { cov: Mat },
    Uniform { half_widths: Vector },
}

impl NoiseModel {
    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { cov } => cov.nrows(),
            Self::Uniform { half_widths } => half_widths.len(),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::Gaussian {
            cov: Mat::zeros(dim, dim),
        }
    }

    fn sampler(&self) -> Result<Sampler> {
        Ok(match self {
            Self::Gaussian { cov } => Sampler::Gaussian(psd_factor(cov)?),
            Self::Uniform { half_widths } => Sampler::Uniform(half_widths.clone()),
        })
    }
}

enum Sampler {
    Gaussian(Mat),
    Uniform(Vector),
}

impl Sampler {
    fn draw(&self, rng: &mut ChaCha8Rng, length: usize) -> Mat {
        match self {
            Self::Gaussian(f) => gaussian_block(rng, f, &Vector::zeros(f.nrows()), length),
            Self::Uniform(h) => uniform_block(rng, h, length),
        }
    }
}

/// Disturbance and (for output feedback) measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub w: NoiseModel,
    pub eta: Option<NoiseModel>,
}

/// Realization for rollout `index` of a batch seeded with `seed`.
pub fn draw_realization(noise: &NoiseSpec, length: usize, seed: u64, index: u64) -> Result<(Mat, Option<Mat>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let w = noise.w.sampler()?.draw(&mut rng, length);
    let eta = match &noise.eta {
        Some(m) => Some(m.sampler()?.draw(&mut rng, length)),
        None => None,
    };
    Ok((w, eta))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopRecord {
    /// `x(0..=N̄)`.
    pub x: Vec<Vector>,
    /// `u(0..N̄)`.
    pub u: Vec<Vector>,
    /// `z(0..=N̄)`.
    pub z: Vec<Vector>,
    /// `x(t) − z(t)`, `t = 0..=N̄`.
    pub e: Vec<Vector>,
    /// `x(t) − x̂(t)` (output feedback).
    pub est_error: Option<Vec<Vector>>,
    /// `x̂(t) − z(t)` (output feedback).
    pub nom_error: Option<Vec<Vector>>,
    /// Per-step scores of `e(t)`, `t = 1..=N̄`.
    pub scores: Vec<f64>,
    pub within_region: bool,
    pub state_feasible: bool,
    pub input_feasible: bool,
    pub cost: f64,
    /// Shifted-candidate checks that failed.
    pub candidate_failures: usize,
    /// Steps after `t = 0` whose QP was not solved to optimality.
    pub infeasible_after_start: usize,
    pub fallbacks: usize,
    /// `max_t ‖(x(t) − z(t)) − e(t)‖∞` against the propagated error.
    pub identity_residual: f64,
}

impl ClosedLoopRecord {
    /// Region membership implies constraint satisfaction.
    pub fn implication_holds(&self) -> bool {
        !self.within_region || (self.state_feasible && self.input_feasible)
    }
}

fn total_cost(cfg: &SmpcConfig, x: &[Vector], u: &[Vector]) -> f64 {
    let stage: f64 = x.iter().zip(u).map(|(x, u)| cfg.cost.stage(x, u)).sum();
    stage + cfg.cost.terminal(x.last().expect("nonempty trajectory"))
}

fn finish_record(
    cfg: &SmpcConfig,
    region: &ConfidenceRegion,
    x: Vec<Vector>,
    u: Vec<Vector>,
    z: Vec<Vector>,
    predicted: &[Vector],
    diags: &[StepDiagnostics],
) -> ClosedLoopRecord {
    let n_bar = u.len();
    let e: Vec<Vector> = x.iter().zip(&z).map(|(x, z)| x - z).collect();
    let scores: Vec<f64> = (1..=n_bar.min(region.horizon()))
        .map(|t| region.score.step_value(t, &e[t]))
        .collect();
    let within_region = scores.iter().all(|&s| s <= region.qhat);
    let x_set = &cfg.sets.state[0];
    let u_set = &cfg.sets.input[0];
    let state_feasible = x.iter().skip(1).all(|x| x_set.contains(x, 0.0));
    let input_feasible = u.iter().all(|u| u_set.contains(u, 0.0));
    let identity_residual = e
        .iter()
        .zip(predicted)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    ClosedLoopRecord {
        cost: total_cost(cfg, &x, &u),
        x,
        u,
        z,
        e,
        est_error: None,
        nom_error: None,
        scores,
        within_region,
        state_feasible,
        input_feasible,
        candidate_failures: diags.iter().filter(|d| d.candidate_feasible == Some(false)).count(),
        infeasible_after_start: diags
            .iter()
            .filter(|d| d.t > 0 && d.status != QpStatus::Optimal)
            .count(),
        fallbacks: diags.iter().filter(|d| d.fallback).count(),
        identity_residual,
    }
}

/// One receding-horizon closed loop over `N̄` steps driven by `w` (and `eta`).
pub fn run_rollout(
    cfg: &SmpcConfig,
    region: &ConfidenceRegion,
    x0: &Vector,
    w: &Mat,
    eta: Option<&Mat>,
) -> Result<(ClosedLoopRecord, Vec<StepDiagnostics>)> {
    let sys = &cfg.sys;
    let n_bar = cfg.total_horizon;
    if w.nrows() != sys.nx() || w.ncols() < n_bar {
        return Err(dim_err("rollout disturbance", format!("{}x{n_bar}", sys.nx()), format!("{:?}", w.shape())));
    }
    let output = cfg.mode == ErrorMode::OutputFeedback;
    let eta = match (output, eta) {
        (true, Some(eta)) if eta.nrows() == sys.ny() && eta.ncols() >= n_bar => Some(eta),
        (true, _) => return Err(Error::Invalid("output feedback rollout needs aligned measurement noise".into())),
        (false, _) => None,
    };
    let (a_k, a_l) = (sys.a_k(), sys.a_l());
    let mut state = cfg.init(x0);
    let mut x = x0.clone();
    let (mut xs, mut us, mut zs) = (vec![x.clone()], Vec::with_capacity(n_bar), vec![state.z.clone()]);
    let mut diags = Vec::with_capacity(n_bar);
    let (mut e_hat, mut e_bar) = (Vector::zeros(sys.nx()), Vector::zeros(sys.nx()));
    let mut predicted = vec![Vector::zeros(sys.nx())];
    let (mut est, mut nom) = (vec![Vector::zeros(sys.nx())], vec![Vector::zeros(sys.nx())]);
    let mut y_prev = None;
    for t in 0..n_bar {
        let measurement = if output {
            Measurement::Output(y_prev.take())
        } else {
            Measurement::State(x.clone())
        };
        let step = cfg.control_step(&mut state, measurement)?;
        let wt = w.column(t).into_owned();
        if let Some(eta) = eta {
            let et = eta.column(t).into_owned();
            y_prev = Some(sys.output(&x, &step.u, &et)?);
            let next_bar = &a_k * &e_bar + &sys.l * (&sys.c * &e_hat + &et);
            e_hat = &a_l * &e_hat + &wt - &sys.l * &et;
            e_bar = next_bar;
        } else {
            e_bar = &a_k * &e_bar + &wt;
        }
        x = sys.step_plant(&x, &step.u, &wt)?;
        predicted.push(&e_hat + &e_bar);
        if output {
            // x̂(t+1) is formed at the next call; mirror it here for the record.
            let xhat_next = sys.step_observer(
                state.xhat.as_ref().expect("output mode"),
                &step.u,
                y_prev.as_ref().expect("set above"),
            )?;
            est.push(&x - &xhat_next);
            nom.push(&xhat_next - &step.z_next);
        }
        xs.push(x.clone());
        us.push(step.u);
        zs.push(step.z_next);
        diags.push(step.diagnostics);
    }
    let mut record = finish_record(cfg, region, xs, us, zs, &predicted, &diags);
    if output {
        record.est_error = Some(est);
        record.nom_error = Some(nom);
    }
    Ok((record, diags))
}

/// Replays an open-loop tube plan with `u(t) = K(x(t) − z_t*) + v_t*`.
pub fn run_open_loop(
    cfg: &SmpcConfig,
    region: &ConfidenceRegion,
    plan: &OpenLoopPlan,
    x0: &Vector,
    w: &Mat,
) -> Result<ClosedLoopRecord> {
    let sys = &cfg.sys;
    let n_bar = plan.v.len();
    let a_k = sys.a_k();
    let mut x = x0.clone();
    let mut xs = vec![x.clone()];
    let mut us = Vec::with_capacity(n_bar);
    let mut e = Vector::zeros(sys.nx());
    let mut predicted = vec![e.clone()];
    for t in 0..n_bar {
        let u = plan.input(&sys.k, t, &x);
        let wt = w.column(t).into_owned();
        x = sys.step_plant(&x, &u, &wt)?;
        e = &a_k * &e + &wt;
        predicted.push(e.clone());
        xs.push(x.clone());
        us.push(u);
    }
    Ok(finish_record(cfg, region, xs, us, plan.z.clone(), &predicted, &[]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub n_test: usize,
    pub seed: u64,
    pub qhat: f64,
    pub level: f64,
    pub m_cal: usize,
    /// Fraction of rollouts whose error stays in the region for `t = 1..=N̄`.
    pub coverage: f64,
    pub state_satisfaction: f64,
    pub input_satisfaction: f64,
    pub joint_satisfaction: f64,
    pub implication_failures: usize,
    pub candidate_failures: usize,
    pub infeasible_after_start: usize,
    pub fallbacks: usize,
    pub max_identity_residual: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baselines: Option<BaselineSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSection {
    /// Squared Chebyshev radius `p̃`.
    pub chebyshev_level: f64,
    /// Squared Gaussian-truth radius `χ²_{n_x}(p)`, when the truth is known.
    pub gaussian_level: Option<f64>,
    pub comparison: RegionComparison,
}

impl BaselineSection {
    pub fn to_text(&self) -> String {
        let mut s = format!("Chebyshev p̃               {:.6}\n", self.chebyshev_level);
        if let Some(g) = self.gaussian_level {
            let _ = writeln!(s, "Gaussian χ² level         {g:.6}");
        }
        s.push('\n');
        s.push_str(&self.comparison.to_text());
        s
    }
}

impl EvaluationReport {
    pub fn from_records(
        mode: ErrorMode,
        seed: u64,
        region: &ConfidenceRegion,
        records: &[ClosedLoopRecord],
    ) -> Self {
        let n = records.len();
        let rate = |f: &dyn Fn(&ClosedLoopRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n as f64;
        let costs: Vec<f64> = records.iter().map(|r| r.cost).collect();
        let (mean_cost, std_cost) = mean_std(&costs);
        Self {
            mode: mode_name(mode).into(),
            n_test: n,
            seed,
            qhat: region.qhat,
            level: region.level,
            m_cal: region.m_cal,
            coverage: rate(&|r| r.within_region),
            state_satisfaction: rate(&|r| r.state_feasible),
            input_satisfaction: rate(&|r| r.input_feasible),
            joint_satisfaction: rate(&|r| r.state_feasible && r.input_feasible),
            implication_failures: records.iter().filter(|r| !r.implication_holds()).count(),
            candidate_failures: records.iter().map(|r| r.candidate_failures).sum(),
            infeasible_after_start: records.iter().map(|r| r.infeasible_after_start).sum(),
            fallbacks: records.iter().map(|r| r.fallbacks).sum(),
            max_identity_residual: records.iter().map(|r| r.identity_residual).fold(0.0, f64::max),
            mean_cost,
            std_cost,
            baselines: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode                     {}", self.mode);
        let _ = writeln!(s, "rollouts                 {}", self.n_test);
        let _ = writeln!(s, "seed                     {}", self.seed);
        let _ = writeln!(s, "q̂ (level, M_cal)         {:.6} ({}, {})", self.qhat, self.level, self.m_cal);
        let _ = writeln!(s, "region coverage          {:.4}", self.coverage);
        let _ = writeln!(s, "state constraints met    {:.4}", self.state_satisfaction);
        let _ = writeln!(s, "input constraints met    {:.4}", self.input_satisfaction);
        let _ = writeln!(s, "all constraints met      {:.4}", self.joint_satisfaction);
        let _ = writeln!(s, "implication failures     {}", self.implication_failures);
        let _ = writeln!(s, "candidate failures       {}", self.candidate_failures);
        let _ = writeln!(s, "QP failures after t = 0  {}", self.infeasible_after_start);
        let _ = writeln!(s, "fallbacks                {}", self.fallbacks);
        let _ = writeln!(s, "max identity residual    {:.3e}", self.max_identity_residual);
        let _ = writeln!(s, "cost mean (std)          {:.6} ({:.6})", self.mean_cost, self.std_cost);
        if let Some(b) = &self.baselines {
            s.push('\n');
            s.push_str(&b.to_text());
        }
        s
    }
}

pub fn mode_name(mode: ErrorMode) -> &'static str {
    match mode {
        ErrorMode::StateFeedback => "state",
        ErrorMode::OutputFeedback => "output",
    }
}

/// Mean and sample standard deviation, summed in order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `n_test` independent rollouts; rollout `i` draws its noise from stream
/// `i` of the seed, so results do not depend on scheduling.
pub fn run_monte_carlo(
    cfg: &SmpcConfig,
    region: &ConfidenceRegion,
    x0: &Vector,
    noise: &NoiseSpec,
    n_test: usize,
    seed: u64,
) -> Result<(EvaluationReport, Vec<ClosedLoopRecord>)> {
    if n_test == 0 {
        return Err(Error::Invalid("n_test must be positive".into()));
    }
    let records = (0..n_test)
        .into_par_iter()
        .map(|i| {
            let (w, eta) = draw_realization(noise, cfg.total_horizon, seed, i as u64)?;
            run_rollout(cfg, region, x0, &w, eta.as_ref()).map(|(r, _)| r)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvaluationReport::from_records(cfg.mode, seed, region, &records);
    Ok((report, records))
}

/// Paired receding-horizon vs open-loop tube costs on shared realizations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyComparison {
    pub n_test: usize,
    pub seed: u64,
    pub mean_receding: f64,
    pub mean_open_loop: f64,
    /// Mean of `J_open − J_receding`.
    pub mean_difference: f64,
    pub se_difference: f64,
    /// `mean_difference / mean_open_loop`.
    pub relative_reduction: f64,
    pub receding_costs: Vec<f64>,
    pub open_loop_costs: Vec<f64>,
    pub receding_constraint_rate: f64,
    pub open_loop_constraint_rate: f64,
}

impl PolicyComparison {
    pub fn from_costs(seed: u64, receding: Vec<f64>, open_loop: Vec<f64>, rates: (f64, f64)) -> Self {
        let diffs: Vec<f64> = open_loop.iter().zip(&receding).map(|(o, r)| o - r).collect();
        let (mean_difference, sd) = mean_std(&diffs);
        let (mean_receding, _) = mean_std(&receding);
        let (mean_open_loop, _) = mean_std(&open_loop);
        Self {
            n_test: diffs.len(),
            seed,
            mean_receding,
            mean_open_loop,
            mean_difference,
            se_difference: sd / (diffs.len() as f64).sqrt(),
            relative_reduction: mean_difference / mean_open_loop,
            receding_costs: receding,
            open_loop_costs: open_loop,
            receding_constraint_rate: rates.0,
            open_loop_constraint_rate: rates.1,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "policy comparison over {} paired rollouts (seed {})\n\
             receding horizon mean cost  {:.6}\n\
             open-loop tube mean cost    {:.6}\n\
             mean difference (se)        {:.6} ({:.6})\n\
             relative reduction          {:.4} %\n\
             constraints met (rh / ol)   {:.4} / {:.4}\n",
            self.n_test,
            self.seed,
            self.mean_receding,
            self.mean_open_loop,
            self.mean_difference,
            self.se_difference,
            100.0 * self.relative_reduction,
            self.receding_constraint_rate,
            self.open_loop_constraint_rate,
        )
    }
}

/// State-feedback policies only: the open-loop baseline replays a plan.
pub fn compare_policies(
    cfg: &SmpcConfig,
    region: &ConfidenceRegion,
    x0: &Vector,
    noise: &NoiseSpec,
    n_test: usize,
    seed: u64,
) -> Result<PolicyComparison> {
    if cfg.mode != ErrorMode::StateFeedback {
        return Err(Error::Invalid("policy comparison runs in state feedback".into()));
    }
    let plan = cfg.open_loop_tube_policy(x0)?;
    let pairs = (0..n_test)
        .into_par_iter()
        .map(|i| {
            let (w, _) = draw_realization(noise, cfg.total_horizon, seed, i as u64)?;
            let (rh, _) = run_rollout(cfg, region, x0, &w, None)?;
            let ol = run_open_loop(cfg, region, &plan, x0, &w)?;
            Ok((rh, ol))
        })
        .collect::<Result<Vec<_>>>()?;
    let ok = |r: &ClosedLoopRecord| r.state_feasible && r.input_feasible;
    let n = pairs.len() as f64;
    let rates = (
        pairs.iter().filter(|(r, _)| ok(r)).count() as f64 / n,
        pairs.iter().filter(|(_, o)| ok(o)).count() as f64 / n,
    );
    Ok(PolicyComparison::from_costs(
        seed,
        pairs.iter().map(|(r, _)| r.cost).collect(),
        pairs.iter().map(|(_, o)| o.cost).collect(),
        rates,
    ))
}

/// Per-step ellipsoids `E_1..E_T` of a named region.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRegion {
    pub name: String,
    pub per_step: Vec<Ellipsoid>,
}

impl BaselineRegion {
    pub fn from_conformal(name: &str, region: &ConfidenceRegion) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            per_step: region.projections()?,
        })
    }

    pub fn horizon(&self) -> usize {
        self.per_step.len()
    }
}

/// `p̃ = n_x (N̄ + N) / ϑ`, the Chebyshev level after a union bound.
pub fn chebyshev_level(nx: usize, horizon: usize, theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) || horizon == 0 || nx == 0 {
        return Err(Error::Invalid("Chebyshev level needs ϑ in (0,1) and positive sizes".into()));
    }
    Ok(nx as f64 * horizon as f64 / theta)
}

/// Mean-variance region `(e − μ̂)ᵀΣ̂⁻¹(e − μ̂) ≤ p̃` from the fitted moments
/// of a Mahalanobis region.
pub fn chebyshev_region(region: &ConfidenceRegion, theta: f64, horizon: usize) -> Result<BaselineRegion> {
    let moments = match &region.score {
        ScoreFunction::Mahalanobis { moments } => moments,
        _ => return Err(Error::Invalid("Chebyshev baseline needs fitted moments".into())),
    };
    if moments.len() < horizon {
        return Err(Error::Invalid(format!(
            "moments cover {} steps, baseline needs {horizon}",
            moments.len()
        )));
    }
    let radius = chebyshev_level(region.dim, horizon, theta)?.sqrt();
    let per_step = moments[..horizon]
        .iter()
        .map(|m| Ellipsoid::new(m.mean.clone(), m.cov.clone(), radius))
        .collect::<Result<_>>()?;
    Ok(BaselineRegion {
        name: "chebyshev".into(),
        per_step,
    })
}

/// Upper `p`-quantile of the χ² distribution with `dof` degrees of freedom.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 || !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid("χ² quantile needs dof ≥ 1 and p in (0,1)".into()));
    }
    if dof == 2 {
        return Ok(-2.0 * (1.0 - p).ln());
    }
    let a = dof as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(a, x / 2.0);
    let mut hi = dof as f64 + 10.0 * (2.0 * dof as f64).sqrt();
    while cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `Σ(t+1) = A_K Σ(t) A_Kᵀ + Σ_w` from `Σ(0) = 0`, for `t = 1..=horizon`.
pub fn lyapunov_covariances(a_k: &Mat, sigma_w: &Mat, horizon: usize) -> Vec<Mat> {
    let mut sigma = Mat::zeros(a_k.nrows(), a_k.nrows());
    (0..horizon)
        .map(|_| {
            sigma = symmetrize(&(a_k * &sigma * a_k.transpose() + sigma_w));
            sigma.clone()
        })
        .collect()
}

/// Ground-truth marginal regions for Gaussian disturbances under state
/// feedback, squared radius `χ²_{n_x}(p)`.
pub fn gaussian_truth_region(sigma_w: &Mat, sys: &LtiSystem, p: f64, horizon: usize) -> Result<BaselineRegion> {
    let n = sys.nx();
    if sigma_w.shape() != (n, n) {
        return Err(dim_err("Σ_w", format!("{n}x{n}"), format!("{:?}", sigma_w.shape())));
    }
    let radius = chi2_quantile(n, p)?.sqrt();
    let per_step = lyapunov_covariances(&sys.a_k(), sigma_w, horizon)
        .into_iter()
        .map(|s| Ellipsoid::new(Vector::zeros(n), s, radius))
        .collect::<Result<_>>()?;
    Ok(BaselineRegion {
        name: "gaussian".into(),
        per_step,
    })
}

/// Ground truth for the combined error `ê + ē` under output feedback,
/// through the joint recursion of `(ê, ē)`.
pub fn gaussian_truth_region_output(
    sigma_w: &Mat,
    sigma_eta: &Mat,
    sys: &LtiSystem,
    p: f64,
    horizon: usize,
) -> Result<BaselineRegion> {
    let (n, ny) = (sys.nx(), sys.ny());
    if sigma_w.shape() != (n, n) || sigma_eta.shape() != (ny, ny) {
        return Err(dim_err("noise covariances", format!("{n}x{n}, {ny}x{ny}"), "mismatch"));
    }
    let mut a = Mat::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&sys.a_l());
    a.view_mut((n, 0), (n, n)).copy_from(&(&sys.l * &sys.c));
    a.view_mut((n, n), (n, n)).copy_from(&sys.a_k());
    let mut g = Mat::zeros(2 * n, n + ny);
    g.view_mut((0, 0), (n, n)).fill_with_identity();
    g.view_mut((0, n), (n, ny)).copy_from(&(-&sys.l));
    g.view_mut((n, n), (n, ny)).copy_from(&sys.l);
    let mut noise = Mat::zeros(n + ny, n + ny);
    noise.view_mut((0, 0), (n, n)).copy_from(sigma_w);
    noise.view_mut((n, n), (ny, ny)).copy_from(sigma_eta);
    let q = &g * noise * g.transpose();
    let mut sum = Mat::zeros(n, 2 * n);
    sum.view_mut((0, 0), (n, n)).fill_with_identity();
    sum.view_mut((0, n), (n, n)).fill_with_identity();
    let radius = chi2_quantile(n, p)?.sqrt();
    let per_step = lyapunov_covariances(&a, &q, horizon)
        .into_iter()
        .map(|s| Ellipsoid::new(Vector::zeros(n), symmetrize(&(&sum * s * sum.transpose())), radius))
        .collect::<Result<_>>()?;
    Ok(BaselineRegion {
        name: "gaussian".into(),
        per_step,
    })
}

/// `rⁿ √det Σ`, proportional to the ellipsoid volume.
pub fn volume_proxy(ell: &Ellipsoid) -> f64 {
    let n = ell.dim() as i32;
    ell.radius.powi(n) * ell.shape.determinant().max(0.0).sqrt()
}

/// Radius of the ball with the same volume, `(rⁿ√det Σ)^{1/n}`.
pub fn radius_equivalent(ell: &Ellipsoid) -> f64 {
    volume_proxy(ell).powf(1.0 / ell.dim() as f64)
}

/// `k` points on the boundary of the projection onto the first two
/// coordinates.
pub fn ellipse_polyline(ell: &Ellipsoid, k: usize) -> Vec<[f64; 2]> {
    let c = [ell.center[0], ell.center.get(1).copied().unwrap_or(0.0)];
    let block = if ell.dim() >= 2 {
        ell.shape.view((0, 0), (2, 2)).into_owned()
    } else {
        Mat::from_diagonal(&Vector::from_vec(vec![ell.shape[(0, 0)], 0.0]))
    };
    let f = psd_factor(&block).unwrap_or_else(|_| Mat::zeros(2, 2));
    (0..k)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            let p = &f * Vector::from_vec(vec![th.cos(), th.sin()]) * ell.radius;
            [c[0] + p[0], c[1] + p[1]]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonEntry {
    pub name: String,
    pub radius: f64,
    pub radius_equivalent: f64,
    /// Reference volume over this region's volume.
    pub volume_ratio: f64,
    /// Reference radius-equivalent over this region's.
    pub radius_ratio: f64,
    /// Fraction of reference boundary points inside this region.
    pub containment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub t: usize,
    pub reference_radius: f64,
    pub reference_radius_equivalent: f64,
    pub entries: Vec<ComparisonEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionComparison {
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

impl RegionComparison {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.entries.iter().map(|e| e.name.as_str()).collect())
            .unwrap_or_default();
        let _ = write!(s, "{:>4} {:>12}", "t", format!("{} r", self.reference));
        for n in &names {
            let _ = write!(s, " {:>14} {:>12} {:>10}", format!("{n} r"), "radius ratio", "contained");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:>4} {:>12.6}", row.t, row.reference_radius);
            for e in &row.entries {
                let _ = write!(s, " {:>14.6} {:>12.4} {:>10.3}", e.radius, e.radius_ratio, e.containment);
            }
            s.push('\n');
        }
        s
    }

    /// Radius ratios for one baseline, `t = 1..=T`.
    pub fn radius_ratios(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.entries.iter().find(|e| e.name == name).map(|e| e.radius_ratio))
            .collect()
    }
}

/// Per-step comparison of `reference` against each baseline.
pub fn compare_regions(reference: &BaselineRegion, others: &[BaselineRegion]) -> Result<RegionComparison> {
    for o in others {
        if o.horizon() != reference.horizon() {
            return Err(Error::Invalid(format!(
                "region {} covers {} steps, {} covers {}",
                o.name,
                o.horizon(),
                reference.name,
                reference.horizon()
            )));
        }
    }
    let rows = reference
        .per_step
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let boundary = boundary_points(r, 64);
            let entries = others
                .iter()
                .map(|o| {
                    let b = &o.per_step[i];
                    let inside = boundary.iter().filter(|p| b.contains(p, 1e-9)).count();
                    ComparisonEntry {
                        name: o.name.clone(),
                        radius: b.radius,
                        radius_equivalent: radius_equivalent(b),
                        volume_ratio: volume_proxy(r) / volume_proxy(b),
                        radius_ratio: radius_equivalent(r) / radius_equivalent(b),
                        containment: inside as f64 / boundary.len() as f64,
                    }
                })
                .collect();
            ComparisonRow {
                t: i + 1,
                reference_radius: r.radius,
                reference_radius_equivalent: radius_equivalent(r),
                entries,
            }
        })
        .collect();
    Ok(RegionComparison {
        reference: reference.name.clone(),
        rows,
    })
}

/// Boundary points `μ + r F u` for unit `u` (a circle in 2-D, coordinate
/// directions otherwise).
fn boundary_points(ell: &Ellipsoid, k: usize) -> Vec<Vector> {
    let n = ell.dim();
    let f = psd_factor(&ell.shape).unwrap_or_else(|_| Mat::zeros(n, n));
    let dirs: Vec<Vector> = if n == 2 {
        (0..k)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                Vector::from_vec(vec![th.cos(), th.sin()])
            })
            .collect()
    } else {
        (0..2 * n)
            .map(|i| {
                let mut v = Vector::zeros(n);
                v[i / 2] = if i % 2 == 0 { 1.0 } else { -1.0 };
                v
            })
            .collect()
    };
    dirs.into_iter().map(|u| &ell.center + &f * u * ell.radius).collect()
}

/// Repeated calibrate-then-test coverage of fresh error trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStudy {
    pub coverages: Vec<f64>,
    pub qhats: Vec<f64>,
    pub mean: f64,
    /// Monte Carlo standard error of the mean coverage.
    pub std_error: f64,
}

#[derive(Debug, Clone)]
pub struct CoverageSetup {
    pub sys: LtiSystem,
    pub sigma_w: Mat,
    pub horizon: usize,
    pub n_fit: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub level: f64,
    pub zero_mean: bool,
}

/// Each repetition draws new calibration and test disturbances, calibrates
/// a Mahalanobis region and measures the fraction of test error
/// trajectories inside it.
pub fn repeated_coverage(setup: &CoverageSetup, repetitions: usize, seed: u64) -> Result<CoverageStudy> {
    let n = setup.sys.nx();
    let mean = Vector::zeros(n);
    let results = (0..repetitions)
        .into_par_iter()
        .map(|rep| {
            let base = seed.wrapping_add(1_000_003 * rep as u64);
            let cal_w = generate_gaussian(
                Role::Disturbance,
                setup.horizon,
                setup.n_fit + setup.n_cal,
                &setup.sigma_w,
                &mean,
                base,
            )?;
            let cal = propagate_state_errors(&setup.sys, &cal_w)?;
            let mut opts = CalibrationOptions::mahalanobis(
                setup.level,
                SplitSpec {
                    n_fit: setup.n_fit,
                    n_cal: setup.n_cal,
                    shuffle_seed: base ^ 0x5eed,
                },
            );
            opts.zero_mean = setup.zero_mean;
            let region = calibrate_dataset(&cal.state_errors, &opts)?;
            let test_w = generate_gaussian(
                Role::Disturbance,
                setup.horizon,
                setup.n_test,
                &setup.sigma_w,
                &mean,
                base.wrapping_add(7),
            )?;
            let test = propagate_state_errors(&setup.sys, &test_w)?;
            let scores = score_dataset(&region.score, &test.state_errors)?;
            let inside = scores.iter().filter(|&&s| s <= region.qhat).count();
            Ok((inside as f64 / setup.n_test as f64, region.qhat))
        })
        .collect::<Result<Vec<_>>>()?;
    let coverages: Vec<f64> = results.iter().map(|r| r.0).collect();
    let (mean_cov, sd) = mean_std(&coverages);
    Ok(CoverageStudy {
        std_error: sd / (coverages.len() as f64).sqrt(),
        mean: mean_cov,
        qhats: results.iter().map(|r| r.1).collect(),
        coverages,
    })
}

/// Writes plot data for external plotting: ellipse outlines of every
/// region, per-step scores and optionally the closed-loop trajectories.
pub fn write_plot_data(
    dir: &Path,
    regions: &[BaselineRegion],
    qhat: f64,
    records: &[ClosedLoopRecord],
    trajectories: bool,
) -> Result<()> {
    let mut ellipses = String::from("region,t,k,e1,e2\n");
    for r in regions {
        for (i, ell) in r.per_step.iter().enumerate() {
            for (k, p) in ellipse_polyline(ell, 64).iter().enumerate() {
                let _ = writeln!(ellipses, "{},{},{},{:.16e},{:.16e}", r.name, i + 1, k, p[0], p[1]);
            }
        }
    }
    crate::io::write_atomic(&dir.join("ellipses.csv"), ellipses.as_bytes())?;

    let mut scores = format!("# qhat={qhat:.16e}\nrollout,t,score,within\n");
    for (j, rec) in records.iter().enumerate() {
        for (i, s) in rec.scores.iter().enumerate() {
            let _ = writeln!(scores, "{j},{},{s:.16e},{}", i + 1, rec.within_region);
        }
    }
    crate::io::write_atomic(&dir.join("scores.csv"), scores.as_bytes())?;
    if trajectories {
        crate::io::write_atomic(&dir.join("trajectories.csv"), trajectories_csv(records).as_bytes())?;
    }
    Ok(())
}

/// One row per rollout and time step: states, nominal states, inputs.
pub fn trajectories_csv(records: &[ClosedLoopRecord]) -> String {
    let Some(first) = records.first() else {
        return String::new();
    };
    let nx = first.x[0].len();
    let nu = first.u.first().map_or(0, |u| u.len());
    let mut s = String::from("rollout,t");
    for i in 1..=nx {
        let _ = write!(s, ",x{i}");
    }
    for i in 1..=nx {
        let _ = write!(s, ",z{i}");
    }
    for i in 1..=nu {
        let _ = write!(s, ",u{i}");
    }
    s.push('\n');
    for (j, rec) in records.iter().enumerate() {
        for t in 0..rec.x.len() {
            let _ = write!(s, "{j},{t}");
            for v in rec.x[t].iter().chain(rec.z[t].iter()) {
                let _ = write!(s, ",{v:.16e}");
            }
            for i in 0..nu {
                match rec.u.get(t) {
                    Some(u) => {
                        let _ = write!(s, ",{:.16e}", u[i]);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
    }
    s
}

/// Conformal quantile of scores restricted to a prefix `t = 1..=steps`, used
/// when rollouts are shorter than the calibration horizon.
pub fn prefix_quantile(region: &ConfidenceRegion, trajectories: &[Mat], steps: usize) -> Result<f64> {
    let scores: Vec<f64> = trajectories
        .iter()
        .map(|e| {
            region.score.step_scores(e)[..steps.min(e.ncols())]
                .iter()
                .fold(0.0, |m: f64, &s| m.max(s))
        })
        .collect();
    Ok(conformal_quantile(&scores, region.level)?.qhat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mat, vector};
    use crate::testutil::pendulum;
    use approx::assert_relative_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn chebyshev_levels() {
        assert_relative_eq!(chebyshev_level(2, 120, 0.1).unwrap(), 2400.0, epsilon = 1e-9);
        assert_relative_eq!(chebyshev_level(1, 1, 0.5).unwrap(), 2.0);
        assert!(chebyshev_level(2, 120, 0.0).is_err());
    }

    #[test]
    fn chi2_two_dof_closed_form() {
        assert_relative_eq!(chi2_quantile(2, 0.9).unwrap(), 4.605170185988091, epsilon = 1e-12);
    }

    #[test]
    fn chi2_one_dof_matches_normal_quantile() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        for p in [0.5, 0.9, 0.99] {
            let z = normal.inverse_cdf((1.0 + p) / 2.0);
            assert_relative_eq!(chi2_quantile(1, p).unwrap(), z * z, epsilon = 1e-8);
        }
    }

    #[test]
    fn chi2_inversion_is_consistent() {
        for dof in [3, 4, 7] {
            let x = chi2_quantile(dof, 0.9).unwrap();
            assert!((gamma_lr(dof as f64 / 2.0, x / 2.0) - 0.9).abs() < 1e-10);
        }
    }

    #[test]
    fn lyapunov_recursion_converges() {
        let sys = pendulum();
        let covs = lyapunov_covariances(&sys.a_k(), &(Mat::identity(2, 2) * 4e-4), 600);
        assert!((&covs[599] - &covs[598]).amax() < 1e-10);
        let zero = gaussian_truth_region(&Mat::zeros(2, 2), &sys, 0.9, 5).unwrap();
        assert!(zero.per_step.iter().all(|e| e.shape.amax() == 0.0));
    }

    #[test]
    fn output_truth_with_zero_gain_matches_state_truth() {
        // With L = 0 and a stable plant the estimation error carries all of w.
        let sys = LtiSystem::new(
            mat(&[&[0.5, 0.1], &[0.0, 0.4]]),
            mat(&[&[0.0], &[1.0]]),
            mat(&[&[1.0, 0.0]]),
            mat(&[&[0.0]]),
            mat(&[&[0.0, 0.0]]),
            mat(&[&[0.0], &[0.0]]),
        )
        .unwrap();
        let sw = mat(&[&[0.01, 0.0], &[0.0, 0.02]]);
        let a = gaussian_truth_region(&sw, &sys, 0.9, 10).unwrap();
        let b = gaussian_truth_region_output(&sw, &mat(&[&[0.3]]), &sys, 0.9, 10).unwrap();
        for (x, y) in a.per_step.iter().zip(&b.per_step) {
            assert_relative_eq!(x.shape, y.shape, epsilon = 1e-15);
        }
    }

    #[test]
    fn identical_regions_compare_to_one() {
        let ell = Ellipsoid::new(vector(&[0.1, 0.0]), mat(&[&[2.0, 0.3], &[0.3, 1.0]]), 1.5).unwrap();
        let a = BaselineRegion {
            name: "a".into(),
            per_step: vec![ell.clone(); 3],
        };
        let mut b = a.clone();
        b.name = "b".into();
        let cmp = compare_regions(&a, &[b]).unwrap();
        for row in &cmp.rows {
            assert_relative_eq!(row.entries[0].radius_ratio, 1.0, epsilon = 1e-12);
            assert_relative_eq!(row.entries[0].volume_ratio, 1.0, epsilon = 1e-12);
            assert_eq!(row.entries[0].containment, 1.0);
        }
        let short = BaselineRegion {
            name: "s".into(),
            per_step: vec![ell],
        };
        assert!(compare_regions(&a, &[short]).is_err());
    }

    #[test]
    fn radius_equivalent_of_scaled_ball() {
        let ell = Ellipsoid::new(Vector::zeros(2), Mat::identity(2, 2) * 4.0, 3.0).unwrap();
        assert_relative_eq!(radius_equivalent(&ell), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn polyline_lies_on_boundary() {
        let ell = Ellipsoid::new(vector(&[1.0, -1.0]), mat(&[&[0.5, 0.1], &[0.1, 0.3]]), 2.0).unwrap();
        let inv = ell.shape.clone().try_inverse().unwrap();
        let pts = ellipse_polyline(&ell, 64);
        assert_eq!(pts.len(), 64);
        for p in pts {
            let d = vector(&p) - &ell.center;
            assert_relative_eq!(d.dot(&(&inv * &d)).sqrt(), 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn paired_difference_ignores_order() {
        let a = PolicyComparison::from_costs(0, vec![1.0, 2.0, 3.0], vec![1.5, 2.0, 3.6], (1.0, 1.0));
        let b = PolicyComparison::from_costs(0, vec![3.0, 1.0, 2.0], vec![3.6, 1.5, 2.0], (1.0, 1.0));
        assert_relative_eq!(a.mean_difference, b.mean_difference, epsilon = 1e-15);
        assert_relative_eq!(a.mean_difference, 1.1 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn realizations_are_reproducible_and_distinct() {
        let noise = NoiseSpec {
            w: NoiseModel::Gaussian {
                cov: Mat::identity(2, 2),
            },
            eta: Some(NoiseModel::Uniform {
                half_widths: vector(&[0.1]),
            }),
        };
        let a = draw_realization(&noise, 5, 3, 0).unwrap();
        let b = draw_realization(&noise, 5, 3, 0).unwrap();
        let c = draw_realization(&noise, 5, 3, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
        assert!(a.1.unwrap().amax() <= 0.1);
    }
}
