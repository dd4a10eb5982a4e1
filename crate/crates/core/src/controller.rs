//! Scenario-averaged SMPC with indirect feedback.
//!
//! The nominal system `z⁺ = Az + Bv` is planned against time-varying
//! tightened sets `Z_t = X ⊖ E_t`, `V_t = U ⊖ K E_t`, where `E_t` is the
//! calibrated error region at absolute time `t`. The realized state only
//! enters the cost (through scenario forecasts of the error), so the feasible
//! set at time `t` never depends on the measurement and recursive feasibility
//! follows from the shifted previous plan.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::conformal::ConfidenceRegion;
use crate::data::TrajectoryDataset;
use crate::error::{dim_err, DataError, Error, Result};
use crate::geometry::{
    check_terminal_invariance, horizon_intersection, tighten_offsets, HalfspacePolytope,
    TerminalSet,
};
use crate::linalg::{Mat, Vector};
use crate::model::{CostSpec, LtiSystem};
use crate::propagation::ErrorMode;
use crate::qp::{solve_lp, PreparedQp, QpSettings, QpStatus, QuadraticProgram};

/// Tolerance of the shifted-candidate feasibility check.
pub const CANDIDATE_TOL: f64 = 1e-8;

/// Additional disturbance (and noise) samples used to average the cost.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub w: TrajectoryDataset,
    /// Measurement noise, aligned with `w` (output feedback only).
    pub eta: Option<TrajectoryDataset>,
}

impl ScenarioSet {
    pub fn count(&self) -> usize {
        self.w.count()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    fn validate(&self, sys: &LtiSystem, mode: ErrorMode, needed: usize) -> Result<()> {
        if self.w.dim() != sys.nx() {
            return Err(DataError::Mismatch {
                what: "scenario disturbance dimension",
                expected: sys.nx(),
                found: self.w.dim(),
            }
            .into());
        }
        if self.len() < needed {
            return Err(DataError::Mismatch {
                what: "scenario length",
                expected: needed,
                found: self.len(),
            }
            .into());
        }
        if mode == ErrorMode::OutputFeedback {
            let eta = self
                .eta
                .as_ref()
                .ok_or_else(|| DataError::Missing("scenario measurement noise".into()))?;
            if eta.dim() != sys.ny() || eta.count() != self.count() || eta.len() != self.len() {
                return Err(DataError::Misaligned(format!(
                    "scenario noise is {}x{} over {} samples, disturbances are {} steps over {}",
                    eta.dim(),
                    eta.len(),
                    eta.count(),
                    self.len(),
                    self.count()
                ))
                .into());
            }
        }
        Ok(())
    }
}

/// `Z_t` and `V_t` for `t = 0..=T` together with their intersections.
#[derive(Debug, Clone)]
pub struct TightenedSets {
    pub state: Vec<HalfspacePolytope>,
    pub input: Vec<HalfspacePolytope>,
    /// `Z_∞ = ∩_t Z_t`.
    pub state_inf: HalfspacePolytope,
    /// `V_∞ = ∩_t V_t`.
    pub input_inf: HalfspacePolytope,
}

impl TightenedSets {
    /// `Z_0 = X`, `V_0 = U`; `Z_t = X ⊖ E_t`, `V_t = U ⊖ K E_t` for
    /// `t = 1..=horizon`. Fails if any tightened set is empty.
    pub fn new(
        x_set: &HalfspacePolytope,
        u_set: &HalfspacePolytope,
        k: &Mat,
        region: &ConfidenceRegion,
        horizon: usize,
    ) -> Result<Self> {
        if region.horizon() < horizon {
            return Err(Error::Invalid(format!(
                "confidence region covers {} steps, tightening needs {horizon}",
                region.horizon()
            )));
        }
        let mut state = vec![x_set.clone()];
        let mut input = vec![u_set.clone()];
        for t in 1..=horizon {
            let ell = region.project(t)?;
            state.push(tighten_offsets(x_set, &ell)?);
            input.push(tighten_offsets(u_set, &ell.image(k)?)?);
        }
        let state_inf = horizon_intersection(&state)?;
        let input_inf = horizon_intersection(&input)?;
        for (name, inf, sets) in [("Z", &state_inf, &state), ("V", &input_inf, &input)] {
            if inf.is_empty()? {
                let mut violated = Vec::new();
                for (t, s) in sets.iter().enumerate() {
                    if s.is_empty()? {
                        violated.push(format!("{name}_{t} is empty"));
                    }
                }
                if violated.is_empty() {
                    violated.push(format!("{name}_∞ is empty"));
                }
                return Err(Error::InitialInfeasible { violated });
            }
        }
        Ok(Self {
            state,
            input,
            state_inf,
            input_inf,
        })
    }

    pub fn horizon(&self) -> usize {
        self.state.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintFamily {
    State,
    Input,
    Terminal,
}

/// Origin of one inequality row of the horizon QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLabel {
    pub family: ConstraintFamily,
    /// Prediction step `i`.
    pub step: usize,
    pub facet: usize,
}

impl RowLabel {
    /// Name of the constrained set at closed-loop time `t`.
    pub fn describe(&self, t: usize) -> String {
        match self.family {
            ConstraintFamily::State => format!("Z_{} facet {}", t + self.step, self.facet + 1),
            ConstraintFamily::Input => format!("V_{} facet {}", t + self.step, self.facet + 1),
            ConstraintFamily::Terminal => format!("Z_f facet {}", self.facet + 1),
        }
    }
}

/// Horizon-`n` QP over `ξ = (z_0..z_n, v_0..v_{n−1})` with fixed matrices.
#[derive(Debug, Clone)]
struct HorizonProblem {
    n: usize,
    nx: usize,
    nu: usize,
    h: Mat,
    a_eq: Mat,
    a_in: Mat,
    labels: Vec<RowLabel>,
    prepared: PreparedQp,
}

impl HorizonProblem {
    fn new(
        sys: &LtiSystem,
        cost: &CostSpec,
        sets: &TightenedSets,
        terminal: &TerminalSet,
        n: usize,
        settings: QpSettings,
    ) -> Result<Self> {
        let (nx, nu) = (sys.nx(), sys.nu());
        let dim = (n + 1) * nx + n * nu;
        let zi = |i: usize| i * nx;
        let vi = |i: usize| (n + 1) * nx + i * nu;

        let mut h = Mat::zeros(dim, dim);
        for i in 0..n {
            h.view_mut((zi(i), zi(i)), (nx, nx)).copy_from(&(&cost.q * 2.0));
            h.view_mut((vi(i), vi(i)), (nu, nu)).copy_from(&(&cost.r * 2.0));
        }
        h.view_mut((zi(n), zi(n)), (nx, nx)).copy_from(&(&cost.p_f * 2.0));

        let terminal_eq = matches!(terminal, TerminalSet::Origin);
        let eq_rows = (n + 1) * nx + if terminal_eq { nx } else { 0 };
        let mut a_eq = Mat::zeros(eq_rows, dim);
        a_eq.view_mut((0, zi(0)), (nx, nx)).fill_with_identity();
        for i in 0..n {
            let r = (i + 1) * nx;
            a_eq.view_mut((r, zi(i + 1)), (nx, nx)).fill_with_identity();
            a_eq.view_mut((r, zi(i)), (nx, nx)).copy_from(&(-&sys.a));
            a_eq.view_mut((r, vi(i)), (nx, nu)).copy_from(&(-&sys.b));
        }
        if terminal_eq {
            a_eq.view_mut(((n + 1) * nx, zi(n)), (nx, nx)).fill_with_identity();
        }

        let zx = sets.state[0].normals();
        let zu = sets.input[0].normals();
        let terminal_rows = match terminal {
            TerminalSet::Origin => None,
            TerminalSet::Polytope { set, .. } => Some(set.normals()),
        };
        let in_rows = n * (zx.nrows() + zu.nrows()) + terminal_rows.map_or(0, |m| m.nrows());
        let mut a_in = Mat::zeros(in_rows, dim);
        let mut labels = Vec::with_capacity(in_rows);
        let mut r = 0;
        for i in 0..n {
            a_in.view_mut((r, zi(i)), zx.shape()).copy_from(zx);
            labels.extend((0..zx.nrows()).map(|facet| RowLabel {
                family: ConstraintFamily::State,
                step: i,
                facet,
            }));
            r += zx.nrows();
            a_in.view_mut((r, vi(i)), zu.shape()).copy_from(zu);
            labels.extend((0..zu.nrows()).map(|facet| RowLabel {
                family: ConstraintFamily::Input,
                step: i,
                facet,
            }));
            r += zu.nrows();
        }
        if let Some(zf) = terminal_rows {
            a_in.view_mut((r, zi(n)), zf.shape()).copy_from(zf);
            labels.extend((0..zf.nrows()).map(|facet| RowLabel {
                family: ConstraintFamily::Terminal,
                step: n,
                facet,
            }));
        }
        let prepared = PreparedQp::new(&h, &a_eq, &a_in, settings)?;
        Ok(Self {
            n,
            nx,
            nu,
            h,
            a_eq,
            a_in,
            labels,
            prepared,
        })
    }

    fn dim(&self) -> usize {
        (self.n + 1) * self.nx + self.n * self.nu
    }

    fn z_at(&self, xi: &Vector, i: usize) -> Vector {
        xi.rows(i * self.nx, self.nx).into_owned()
    }

    fn v_at(&self, xi: &Vector, i: usize) -> Vector {
        xi.rows((self.n + 1) * self.nx + i * self.nu, self.nu).into_owned()
    }

    /// Right-hand sides at closed-loop time `t` with `z_0 = z_t`.
    fn rhs(&self, sets: &TightenedSets, terminal: &TerminalSet, t: usize, z_t: &Vector) -> Result<(Vector, Vector)> {
        if t + self.n > sets.state.len() {
            return Err(Error::Invalid(format!(
                "time {t} with horizon {} exceeds the tightened sets ({} steps)",
                self.n,
                sets.horizon()
            )));
        }
        let mut b_eq = Vector::zeros(self.a_eq.nrows());
        b_eq.rows_mut(0, self.nx).copy_from(z_t);
        let mut b_in = Vector::zeros(self.a_in.nrows());
        let mut r = 0;
        for i in 0..self.n {
            let zo = sets.state[t + i].offsets();
            b_in.rows_mut(r, zo.len()).copy_from(zo);
            r += zo.len();
            let vo = sets.input[t + i].offsets();
            b_in.rows_mut(r, vo.len()).copy_from(vo);
            r += vo.len();
        }
        if let TerminalSet::Polytope { set, .. } = terminal {
            b_in.rows_mut(r, set.facets()).copy_from(set.offsets());
        }
        Ok((b_eq, b_in))
    }

    fn linear_term(&self, cost: &CostSpec, f: &Forecast) -> Vector {
        let mut g = Vector::zeros(self.dim());
        for i in 0..self.n {
            g.rows_mut(i * self.nx, self.nx)
                .copy_from(&(&cost.q * &f.mean_state[i] * 2.0));
            g.rows_mut((self.n + 1) * self.nx + i * self.nu, self.nu)
                .copy_from(&(&cost.r * &f.mean_input[i] * 2.0));
        }
        g.rows_mut(self.n * self.nx, self.nx)
            .copy_from(&(&cost.p_f * &f.mean_state[self.n] * 2.0));
        g
    }

    /// `(z₁*, …, z_n*, A z_n* + B π_f(z_n*))` and `(v₁*, …, v*_{n−1}, π_f(z_n*))`.
    fn shifted(&self, sys: &LtiSystem, terminal: &TerminalSet, prev: &Vector) -> Vector {
        let mut xi = Vector::zeros(self.dim());
        for i in 0..self.n {
            xi.rows_mut(i * self.nx, self.nx).copy_from(&self.z_at(prev, i + 1));
        }
        for i in 0..self.n.saturating_sub(1) {
            xi.rows_mut((self.n + 1) * self.nx + i * self.nu, self.nu)
                .copy_from(&self.v_at(prev, i + 1));
        }
        let z_end = self.z_at(prev, self.n);
        let v_end = match terminal {
            TerminalSet::Origin => Vector::zeros(self.nu),
            TerminalSet::Polytope { gain, .. } => gain * &z_end,
        };
        let z_next = &sys.a * &z_end + &sys.b * &v_end;
        xi.rows_mut(self.n * self.nx, self.nx).copy_from(&z_next);
        xi.rows_mut((self.n + 1) * self.nx + (self.n - 1) * self.nu, self.nu)
            .copy_from(&v_end);
        xi
    }

    fn is_feasible(&self, xi: &Vector, b_eq: &Vector, b_in: &Vector, tol: f64) -> bool {
        (&self.a_eq * xi - b_eq).amax() <= tol && (&self.a_in * xi - b_in).iter().all(|&s| s <= tol)
    }

    /// Labels of rows that cannot be satisfied together with the equalities,
    /// found by minimizing the total violation.
    fn diagnose(&self, b_eq: &Vector, b_in: &Vector, t: usize) -> Result<Vec<String>> {
        let (m, d) = (self.a_in.nrows(), self.dim());
        let mut a = Mat::zeros(2 * m, d + m);
        a.view_mut((0, 0), (m, d)).copy_from(&self.a_in);
        a.view_mut((0, d), (m, m)).fill_diagonal(-1.0);
        a.view_mut((m, d), (m, m)).fill_diagonal(-1.0);
        let mut b = Vector::zeros(2 * m);
        b.rows_mut(0, m).copy_from(b_in);
        let mut a_eq = Mat::zeros(self.a_eq.nrows(), d + m);
        a_eq.view_mut((0, 0), self.a_eq.shape()).copy_from(&self.a_eq);
        let mut c = Vector::zeros(d + m);
        c.rows_mut(d, m).fill(1.0);
        let sol = solve_lp(&c, &a, &b, &a_eq, b_eq)?;
        if sol.status == QpStatus::Infeasible {
            return Ok(vec![format!(
                "nominal dynamics from z_0 cannot reach the terminal constraint in {} steps",
                self.n
            )]);
        }
        let mut names: Vec<String> = (0..m)
            .filter(|&i| sol.xi[d + i] > 1e-7)
            .map(|i| self.labels[i].describe(t))
            .collect();
        if names.is_empty() {
            names.push("no single set identified".into());
        }
        Ok(names)
    }
}

/// Scenario-averaged error forecast over one horizon.
#[derive(Debug, Clone)]
struct Forecast {
    /// Mean of `e^j_i`, `i = 0..=n`.
    mean_state: Vec<Vector>,
    /// Mean of the input error `K e^j_i` (or `K ē^j_i`), `i = 0..n`.
    mean_input: Vec<Vector>,
    /// Scenario average of the error-only cost terms.
    offset: f64,
}

/// Everything fixed for a closed-loop experiment.
#[derive(Debug, Clone)]
pub struct SmpcSetup {
    pub sys: LtiSystem,
    pub cost: CostSpec,
    pub mode: ErrorMode,
    /// MPC horizon `N`.
    pub horizon: usize,
    /// Closed-loop length `N̄`.
    pub total_horizon: usize,
    pub state_constraints: HalfspacePolytope,
    pub input_constraints: HalfspacePolytope,
    pub terminal: TerminalSet,
    pub scenarios: ScenarioSet,
    pub qp_settings: QpSettings,
}

#[derive(Debug, Clone)]
pub struct SmpcConfig {
    pub sys: LtiSystem,
    pub cost: CostSpec,
    pub mode: ErrorMode,
    pub horizon: usize,
    pub total_horizon: usize,
    pub sets: TightenedSets,
    pub terminal: TerminalSet,
    pub scenarios: ScenarioSet,
    pub qp_settings: QpSettings,
    problem: HorizonProblem,
}

impl SmpcConfig {
    /// Tightens the constraints with `region` over `N̄ + N` steps and
    /// validates the terminal ingredients.
    pub fn new(setup: SmpcSetup, region: &ConfidenceRegion) -> Result<Self> {
        let SmpcSetup {
            sys,
            cost,
            mode,
            horizon,
            total_horizon,
            state_constraints,
            input_constraints,
            terminal,
            scenarios,
            qp_settings,
        } = setup;
        if horizon == 0 || horizon > total_horizon {
            return Err(Error::Invalid(format!(
                "need 1 ≤ N ≤ N̄, got N = {horizon}, N̄ = {total_horizon}"
            )));
        }
        if cost.q.nrows() != sys.nx() || cost.r.nrows() != sys.nu() {
            return Err(dim_err("cost weights", sys.nx(), cost.q.nrows()));
        }
        if state_constraints.dim() != sys.nx() || input_constraints.dim() != sys.nu() {
            return Err(dim_err("constraint sets", sys.nx(), state_constraints.dim()));
        }
        if region.dim != sys.nx() {
            return Err(dim_err("confidence region", sys.nx(), region.dim));
        }
        state_constraints.require_origin_interior("X")?;
        input_constraints.require_origin_interior("U")?;
        if mode == ErrorMode::OutputFeedback {
            sys.validate_observer()?;
        }
        scenarios.validate(&sys, mode, total_horizon + horizon - 1)?;
        let sets = TightenedSets::new(
            &state_constraints,
            &input_constraints,
            &sys.k,
            region,
            total_horizon + horizon,
        )?;
        validate_terminal(&sys, &terminal, &sets)?;
        let problem = HorizonProblem::new(&sys, &cost, &sets, &terminal, horizon, qp_settings)?;
        Ok(Self {
            sys,
            cost,
            mode,
            horizon,
            total_horizon,
            sets,
            terminal,
            scenarios,
            qp_settings,
            problem,
        })
    }

    pub fn scenario_count(&self) -> usize {
        self.scenarios.count()
    }

    /// Labels of the inequality rows, in QP order.
    pub fn row_labels(&self) -> &[RowLabel] {
        &self.problem.labels
    }

    pub fn init(&self, x0: &Vector) -> ControllerState {
        let s = self.scenario_count();
        let nx = self.sys.nx();
        let output = self.mode == ErrorMode::OutputFeedback;
        ControllerState {
            t: 0,
            z: x0.clone(),
            xhat: output.then(|| x0.clone()),
            last_u: None,
            prev_solution: None,
            est_errors: if output { vec![Vector::zeros(nx); s] } else { Vec::new() },
            nom_errors: if output { vec![Vector::zeros(nx); s] } else { Vec::new() },
        }
    }

    fn forecast(&self, n: usize, t: usize, anchor: &Vector, est: &[Vector]) -> Forecast {
        let sys = &self.sys;
        let a_k = sys.a_k();
        let a_l = sys.a_l();
        let nx = sys.nx();
        let nu = sys.nu();
        let s = self.scenario_count();
        let mut mean_state = vec![Vector::zeros(nx); n + 1];
        let mut mean_input = vec![Vector::zeros(nu); n];
        let mut offset = 0.0;
        for j in 0..s {
            let w = self.scenarios.w.sample(j);
            let mut e_hat = match self.mode {
                ErrorMode::StateFeedback => Vector::zeros(nx),
                ErrorMode::OutputFeedback => est[j].clone(),
            };
            let mut e_bar = anchor.clone();
            for i in 0..=n {
                let e = &e_hat + &e_bar;
                offset += if i < n {
                    let ue = &sys.k * &e_bar;
                    let c = e.dot(&(&self.cost.q * &e)) + ue.dot(&(&self.cost.r * &ue));
                    mean_input[i] += ue;
                    c
                } else {
                    e.dot(&(&self.cost.p_f * &e))
                };
                mean_state[i] += e;
                if i == n {
                    break;
                }
                let wi = w.column(t + i);
                match self.mode {
                    ErrorMode::StateFeedback => e_bar = &a_k * &e_bar + wi,
                    ErrorMode::OutputFeedback => {
                        let eta = self.scenarios.eta.as_ref().expect("validated").sample(j);
                        let ei = eta.column(t + i);
                        let next_bar = &a_k * &e_bar + &sys.l * (&sys.c * &e_hat + ei);
                        e_hat = &a_l * &e_hat + wi - &sys.l * ei;
                        e_bar = next_bar;
                    }
                }
            }
        }
        let inv = 1.0 / s as f64;
        for m in mean_state.iter_mut() {
            *m *= inv;
        }
        for m in mean_input.iter_mut() {
            *m *= inv;
        }
        Forecast {
            mean_state,
            mean_input,
            offset: offset * inv,
        }
    }

    fn assemble(&self, problem: &HorizonProblem, t: usize, z: &Vector, f: &Forecast) -> Result<QuadraticProgram> {
        let (b_eq, b_in) = problem.rhs(&self.sets, &self.terminal, t, z)?;
        let mut qp = QuadraticProgram::new(problem.h.clone(), problem.linear_term(&self.cost, f))
            .with_equalities(problem.a_eq.clone(), b_eq)
            .with_inequalities(problem.a_in.clone(), b_in);
        qp.offset = f.offset;
        Ok(qp)
    }

    /// QP at the current state for measured `x(t)`.
    pub fn build_qp_state_feedback(&self, state: &ControllerState, x: &Vector) -> Result<QuadraticProgram> {
        self.require_mode(ErrorMode::StateFeedback)?;
        if x.len() != self.sys.nx() {
            return Err(dim_err("measured state", self.sys.nx(), x.len()));
        }
        let f = self.forecast(self.horizon, state.t, &(x - &state.z), &[]);
        self.assemble(&self.problem, state.t, &state.z, &f)
    }

    /// QP at the current state for estimate `x̂(t)`.
    pub fn build_qp_output_feedback(&self, state: &ControllerState, xhat: &Vector) -> Result<QuadraticProgram> {
        self.require_mode(ErrorMode::OutputFeedback)?;
        if xhat.len() != self.sys.nx() {
            return Err(dim_err("state estimate", self.sys.nx(), xhat.len()));
        }
        let f = self.forecast(self.horizon, state.t, &(xhat - &state.z), &state.est_errors);
        self.assemble(&self.problem, state.t, &state.z, &f)
    }

    fn require_mode(&self, mode: ErrorMode) -> Result<()> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(Error::Invalid(format!("controller runs in {:?} mode", self.mode)))
        }
    }

    /// One closed-loop step: solve, apply the tube law, advance the nominal
    /// state and the persisted scenario errors.
    pub fn control_step(&self, state: &mut ControllerState, measurement: Measurement) -> Result<StepResult> {
        let t = state.t;
        if t >= self.total_horizon {
            return Err(Error::Invalid(format!("closed loop ends at t = {}", self.total_horizon)));
        }
        let anchor_point = match (self.mode, measurement) {
            (ErrorMode::StateFeedback, Measurement::State(x)) => x,
            (ErrorMode::OutputFeedback, Measurement::Output(y)) => {
                if let Some(y) = y {
                    let (xhat, u) = match (&state.xhat, &state.last_u) {
                        (Some(xh), Some(u)) => (xh, u),
                        _ => return Err(Error::Invalid("measurement before the first input".into())),
                    };
                    state.xhat = Some(self.sys.step_observer(xhat, u, &y)?);
                } else if t > 0 {
                    return Err(Error::Invalid(format!("missing measurement y({})", t - 1)));
                }
                state.xhat.clone().expect("output mode keeps an estimate")
            }
            _ => return Err(Error::Invalid(format!("measurement does not match {:?} mode", self.mode))),
        };
        if anchor_point.len() != self.sys.nx() {
            return Err(dim_err("measurement", self.sys.nx(), anchor_point.len()));
        }
        let p = &self.problem;
        let f = self.forecast(self.horizon, t, &(&anchor_point - &state.z), &state.est_errors);
        let g = p.linear_term(&self.cost, &f);
        let (b_eq, b_in) = p.rhs(&self.sets, &self.terminal, t, &state.z)?;

        let candidate = state.prev_solution.as_ref().map(|prev| p.shifted(&self.sys, &self.terminal, prev));
        let candidate_feasible = candidate
            .as_ref()
            .map(|c| p.is_feasible(c, &b_eq, &b_in, CANDIDATE_TOL));
        if candidate_feasible == Some(false) {
            log::error!("shifted candidate infeasible at t = {t}");
        }
        let sol = p.prepared.solve_with_offset(&g, &b_eq, &b_in, f.offset, candidate.as_ref())?;
        let (xi, fallback) = match sol.status {
            QpStatus::Optimal => (sol.xi.clone(), false),
            status if t == 0 => {
                return Err(match status {
                    QpStatus::Infeasible => Error::InitialInfeasible {
                        violated: p.diagnose(&b_eq, &b_in, t)?,
                    },
                    _ => Error::Qp(format!("initial QP ended with {status:?}")),
                })
            }
            status => match (candidate, candidate_feasible) {
                (Some(c), Some(true)) => {
                    log::error!(
                        "QP ended with {status:?} at t = {t} although the shifted plan is feasible; \
                         applying the shifted plan"
                    );
                    (c, true)
                }
                _ => return Err(Error::Qp(format!("QP ended with {status:?} at t = {t}"))),
            },
        };
        let cost = if fallback {
            let qp = self.assemble(p, t, &state.z, &f)?;
            qp.objective(&xi)
        } else {
            sol.objective
        };
        let v0 = p.v_at(&xi, 0);
        let u = &self.sys.k * (&anchor_point - &state.z) + &v0;
        let z_next = p.z_at(&xi, 1);

        let slack = &b_in - &p.a_in * &xi;
        let mut min_slack = [f64::INFINITY; 3];
        let mut active = Vec::new();
        for (i, label) in p.labels.iter().enumerate() {
            let k = label.family as usize;
            min_slack[k] = min_slack[k].min(slack[i]);
            if slack[i] <= 1e-9 {
                active.push(label.describe(t));
            }
        }
        let diagnostics = StepDiagnostics {
            t,
            status: sol.status,
            iterations: sol.iterations,
            cost,
            candidate_feasible,
            fallback,
            min_slack_state: min_slack[0],
            min_slack_input: min_slack[1],
            min_slack_terminal: (min_slack[2].is_finite()).then_some(min_slack[2]),
            active,
        };

        if self.mode == ErrorMode::OutputFeedback {
            let eta = self.scenarios.eta.as_ref().expect("validated");
            let a_l = self.sys.a_l();
            let a_k = self.sys.a_k();
            for j in 0..self.scenario_count() {
                let w = self.scenarios.w.sample(j).column(t);
                let e = eta.sample(j).column(t);
                let e_hat = &state.est_errors[j];
                let next_bar = &a_k * &state.nom_errors[j] + &self.sys.l * (&self.sys.c * e_hat + e);
                state.est_errors[j] = &a_l * e_hat + w - &self.sys.l * e;
                state.nom_errors[j] = next_bar;
            }
        }
        let z = std::mem::replace(&mut state.z, z_next.clone());
        state.prev_solution = Some(xi);
        state.last_u = Some(u.clone());
        state.t += 1;
        Ok(StepResult {
            u,
            v0,
            z,
            z_next,
            diagnostics,
        })
    }

    /// Solves one horizon-`N̄` problem at `t = 0` from `x₀` for the
    /// open-loop tube baseline.
    pub fn open_loop_tube_policy(&self, x0: &Vector) -> Result<OpenLoopPlan> {
        if x0.len() != self.sys.nx() {
            return Err(dim_err("initial state", self.sys.nx(), x0.len()));
        }
        let n = self.total_horizon;
        let problem = HorizonProblem::new(&self.sys, &self.cost, &self.sets, &self.terminal, n, self.qp_settings)?;
        let est = vec![Vector::zeros(self.sys.nx()); self.scenario_count()];
        let f = self.forecast(n, 0, &Vector::zeros(self.sys.nx()), &est);
        let g = problem.linear_term(&self.cost, &f);
        let (b_eq, b_in) = problem.rhs(&self.sets, &self.terminal, 0, x0)?;
        let sol = problem.prepared.solve_with_offset(&g, &b_eq, &b_in, f.offset, None)?;
        match sol.status {
            QpStatus::Optimal => Ok(OpenLoopPlan {
                z: (0..=n).map(|i| problem.z_at(&sol.xi, i)).collect(),
                v: (0..n).map(|i| problem.v_at(&sol.xi, i)).collect(),
                objective: sol.objective,
            }),
            QpStatus::Infeasible => Err(Error::InitialInfeasible {
                violated: problem.diagnose(&b_eq, &b_in, 0)?,
            }),
            status => Err(Error::Qp(format!("open-loop QP ended with {status:?}"))),
        }
    }
}

fn validate_terminal(sys: &LtiSystem, terminal: &TerminalSet, sets: &TightenedSets) -> Result<()> {
    let mut violated = Vec::new();
    match terminal {
        TerminalSet::Origin => {
            if sets.state_inf.offsets().iter().any(|&b| b < 0.0) {
                violated.push("Z_f = {0} is not contained in Z_∞".to_string());
            }
        }
        TerminalSet::Polytope { set, .. } => {
            if set.dim() != sys.nx() {
                return Err(dim_err("terminal set", sys.nx(), set.dim()));
            }
            let dirs: Vec<Vector> = (0..sets.state_inf.facets())
                .map(|i| sets.state_inf.normals().row(i).transpose())
                .collect();
            let values = set.support_values(&dirs)?;
            for (i, (v, b)) in values.iter().zip(sets.state_inf.offsets().iter()).enumerate() {
                if *v > b + 1e-9 {
                    violated.push(format!("Z_f exceeds Z_∞ facet {}", i + 1));
                }
            }
        }
    }
    let report = check_terminal_invariance(terminal, &sys.a, &sys.b, Some(&sets.input_inf))?;
    if !report.invariant {
        violated.push(format!(
            "Z_f is not invariant under the terminal law (margin {:.3e})",
            report.worst_margin
        ));
    }
    if !report.inputs_admissible {
        violated.push("terminal law leaves V_∞".to_string());
    }
    if violated.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("terminal ingredients: {}", violated.join("; "))))
    }
}

/// What the controller observes at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    /// Full state `x(t)`.
    State(Vector),
    /// Output `y(t−1)` for the observer update; `None` at `t = 0`.
    Output(Option<Vector>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub t: usize,
    /// Nominal state `z(t)`.
    pub z: Vector,
    /// Observer estimate `x̂(t)` (output feedback).
    pub xhat: Option<Vector>,
    pub last_u: Option<Vector>,
    /// Optimal `ξ*` of the previous step.
    pub prev_solution: Option<Vector>,
    /// Per-scenario `ê^j(t)` (output feedback).
    pub est_errors: Vec<Vector>,
    /// Per-scenario `ē^j(t)` (output feedback).
    pub nom_errors: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub status: QpStatus,
    pub iterations: usize,
    pub cost: f64,
    /// `None` at `t = 0`.
    pub candidate_feasible: Option<bool>,
    /// The shifted plan was applied instead of a fresh solution.
    pub fallback: bool,
    pub min_slack_state: f64,
    pub min_slack_input: f64,
    pub min_slack_terminal: Option<f64>,
    /// Tightened sets with an active facet.
    pub active: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub u: Vector,
    pub v0: Vector,
    /// `z(t)` used in this step.
    pub z: Vector,
    /// `z(t+1) = z₁*`.
    pub z_next: Vector,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopPlan {
    pub z: Vec<Vector>,
    pub v: Vec<Vector>,
    pub objective: f64,
}

impl OpenLoopPlan {
    /// `u(t) = K(x(t) − z_t*) + v_t*`.
    pub fn input(&self, k: &Mat, t: usize, x: &Vector) -> Vector {
        k * (x - &self.z[t]) + &self.v[t]
    }
}

impl fmt::Display for StepDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.16e}"));
        write!(
            f,
            "{},{:?},{},{:.16e},{},{},{:.16e},{:.16e},{},{}",
            self.t,
            self.status,
            self.iterations,
            self.cost,
            self.candidate_feasible.map_or(String::new(), |b| b.to_string()),
            self.fallback,
            self.min_slack_state,
            self.min_slack_input,
            opt(self.min_slack_terminal),
            self.active.join(";")
        )
    }
}

pub fn diagnostics_csv(diags: &[StepDiagnostics]) -> String {
    let mut out = String::from(
        "t,status,iterations,cost,candidate_feasible,fallback,min_slack_state,min_slack_input,min_slack_terminal,active\n",
    );
    for d in diags {
        out.push_str(&d.to_string());
        out.push('\n');
    }
    out
}

pub fn write_diagnostics(diags: &[StepDiagnostics], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, diagnostics_csv(diags).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{calibrate, CalibrationOptions};
    use crate::data::{generate_gaussian, Role, SplitSpec};
    use crate::linalg::{mat, vector};
    use crate::propagation::{propagate_output_errors, propagate_state_errors};
    use crate::testutil::pendulum;
    use approx::assert_relative_eq;

    const N: usize = 8;
    const NBAR: usize = 20;

    fn noise_cov() -> Mat {
        Mat::identity(2, 2) * 4e-4
    }

    fn region(mode: ErrorMode) -> ConfidenceRegion {
        let sys = pendulum();
        let w = generate_gaussian(Role::Disturbance, NBAR + N, 300, &noise_cov(), &Vector::zeros(2), 1).unwrap();
        let errors = match mode {
            ErrorMode::StateFeedback => propagate_state_errors(&sys, &w).unwrap(),
            ErrorMode::OutputFeedback => {
                let eta = generate_gaussian(Role::Noise, NBAR + N, 300, &mat(&[&[1e-4]]), &Vector::zeros(1), 2)
                    .unwrap();
                propagate_output_errors(&sys, &w, &eta).unwrap()
            }
        };
        let mut opts = CalibrationOptions::mahalanobis(0.9, SplitSpec {
            n_fit: 100,
            n_cal: 200,
            shuffle_seed: 3,
        });
        opts.zero_mean = true;
        calibrate(&errors, &opts).unwrap()
    }

    fn scenarios(mode: ErrorMode, count: usize, zero: bool) -> ScenarioSet {
        let cov = if zero { Mat::zeros(2, 2) } else { noise_cov() };
        let w = generate_gaussian(Role::Disturbance, NBAR + N, count, &cov, &Vector::zeros(2), 5).unwrap();
        let eta = (mode == ErrorMode::OutputFeedback).then(|| {
            let c = if zero { 0.0 } else { 1e-4 };
            generate_gaussian(Role::Noise, NBAR + N, count, &mat(&[&[c]]), &Vector::zeros(1), 6).unwrap()
        });
        ScenarioSet { w, eta }
    }

    fn config(mode: ErrorMode, count: usize, zero: bool) -> SmpcConfig {
        let setup = SmpcSetup {
            sys: pendulum(),
            cost: CostSpec::stage_only(Mat::identity(2, 2) * 100.0, mat(&[&[10.0]])).unwrap(),
            mode,
            horizon: N,
            total_horizon: NBAR,
            state_constraints: HalfspacePolytope::symmetric_box(&[1.0, 1.0]).unwrap(),
            input_constraints: HalfspacePolytope::symmetric_box(&[10.0]).unwrap(),
            terminal: TerminalSet::Origin,
            scenarios: scenarios(mode, count, zero),
            qp_settings: QpSettings::default(),
        };
        SmpcConfig::new(setup, &region(mode)).unwrap()
    }

    fn x0() -> Vector {
        vector(&[0.3, -0.2])
    }

    /// Scenario-sum objective evaluated directly from the trajectories.
    fn explicit_objective(cfg: &SmpcConfig, t: usize, x: &Vector, z: &Vector, xi: &Vector) -> f64 {
        let p = &cfg.problem;
        let a_k = cfg.sys.a_k();
        let s = cfg.scenario_count();
        let mut total = 0.0;
        for j in 0..s {
            let mut e = x - z;
            for i in 0..N {
                let xj = p.z_at(xi, i) + &e;
                let uj = &cfg.sys.k * &e + p.v_at(xi, i);
                total += cfg.cost.stage(&xj, &uj);
                e = &a_k * &e + cfg.scenarios.w.sample(j).column(t + i);
            }
            total += cfg.cost.terminal(&(p.z_at(xi, N) + &e));
        }
        total / s as f64
    }

    #[test]
    fn objective_matches_scenario_sum_and_gradient() {
        let cfg = config(ErrorMode::StateFeedback, 5, false);
        let state = cfg.init(&x0());
        let x = vector(&[0.35, -0.1]);
        let qp = cfg.build_qp_state_feedback(&state, &x).unwrap();
        let mut rng_xi = Vector::from_fn(qp.dim(), |i, _| ((i * 37 % 11) as f64 - 5.0) / 7.0);
        assert_relative_eq!(
            qp.objective(&rng_xi),
            explicit_objective(&cfg, 0, &x, &state.z, &rng_xi),
            max_relative = 1e-12
        );
        let grad = &qp.h * &rng_xi + &qp.g;
        let h = 1e-6;
        for k in 0..qp.dim() {
            let orig = rng_xi[k];
            rng_xi[k] = orig + h;
            let fp = explicit_objective(&cfg, 0, &x, &state.z, &rng_xi);
            rng_xi[k] = orig - h;
            let fm = explicit_objective(&cfg, 0, &x, &state.z, &rng_xi);
            rng_xi[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5 * grad[k].abs().max(1.0), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn constraints_do_not_depend_on_the_measurement() {
        let cfg = config(ErrorMode::StateFeedback, 4, false);
        let state = cfg.init(&x0());
        let a = cfg.build_qp_state_feedback(&state, &x0()).unwrap();
        let b = cfg.build_qp_state_feedback(&state, &vector(&[0.9, 0.4])).unwrap();
        assert_eq!(a.a_eq, b.a_eq);
        assert_eq!(a.b_eq, b.b_eq);
        assert_eq!(a.a_in, b.a_in);
        assert_eq!(a.b_in, b.b_in);
        assert_eq!(a.h, b.h);
        assert_ne!(a.g, b.g);
    }

    #[test]
    fn single_zero_scenario_is_nominal_mpc() {
        let cfg = config(ErrorMode::StateFeedback, 1, true);
        let state = cfg.init(&x0());
        let qp = cfg.build_qp_state_feedback(&state, &x0()).unwrap();
        assert_eq!(qp.g.amax(), 0.0);
        assert_eq!(qp.offset, 0.0);
    }

    #[test]
    fn noiseless_closed_loop_tracks_nominal() {
        let cfg = config(ErrorMode::StateFeedback, 3, false);
        let mut state = cfg.init(&x0());
        let mut x = x0();
        for _ in 0..NBAR {
            let step = cfg.control_step(&mut state, Measurement::State(x.clone())).unwrap();
            assert_relative_eq!(step.u, step.v0, epsilon = 1e-12);
            if step.diagnostics.t > 0 {
                assert_eq!(step.diagnostics.candidate_feasible, Some(true));
            }
            x = cfg.sys.step_plant(&x, &step.u, &Vector::zeros(2)).unwrap();
            assert!((&x - &state.z).amax() < 1e-10);
        }
    }

    #[test]
    fn noisy_closed_loop_error_law_and_candidates() {
        let cfg = config(ErrorMode::StateFeedback, 10, false);
        let w = generate_gaussian(Role::Disturbance, NBAR, 1, &noise_cov(), &Vector::zeros(2), 99).unwrap();
        let mut state = cfg.init(&x0());
        let mut x = x0();
        let a_k = cfg.sys.a_k();
        let mut e = Vector::zeros(2);
        for t in 0..NBAR {
            let step = cfg.control_step(&mut state, Measurement::State(x.clone())).unwrap();
            assert!(!step.diagnostics.fallback);
            assert_ne!(step.diagnostics.candidate_feasible, Some(false));
            let wt = w.sample(0).column(t).into_owned();
            x = cfg.sys.step_plant(&x, &step.u, &wt).unwrap();
            e = &a_k * &e + &wt;
            assert!((&x - &state.z - &e).amax() < 1e-10);
        }
    }

    #[test]
    fn output_feedback_identities_hold() {
        let cfg = config(ErrorMode::OutputFeedback, 6, false);
        let w = generate_gaussian(Role::Disturbance, NBAR, 1, &noise_cov(), &Vector::zeros(2), 7).unwrap();
        let eta = generate_gaussian(Role::Noise, NBAR, 1, &mat(&[&[1e-4]]), &Vector::zeros(1), 8).unwrap();
        let mut state = cfg.init(&x0());
        let mut x = x0();
        let mut y_prev = None;
        let (mut e_hat, mut e_bar) = (Vector::zeros(2), Vector::zeros(2));
        let (a_k, a_l) = (cfg.sys.a_k(), cfg.sys.a_l());
        for t in 0..NBAR {
            let step = cfg.control_step(&mut state, Measurement::Output(y_prev.take())).unwrap();
            let xhat = state.xhat.clone().unwrap();
            assert!((&x - &xhat - &e_hat).amax() < 1e-10);
            assert!((&xhat - &step.z - &e_bar).amax() < 1e-10);
            let wt = w.sample(0).column(t).into_owned();
            let et = eta.sample(0).column(t).into_owned();
            y_prev = Some(cfg.sys.output(&x, &step.u, &et).unwrap());
            x = cfg.sys.step_plant(&x, &step.u, &wt).unwrap();
            let next_bar = &a_k * &e_bar + &cfg.sys.l * (&cfg.sys.c * &e_hat + &et);
            e_hat = &a_l * &e_hat + &wt - &cfg.sys.l * &et;
            e_bar = next_bar;
        }
    }

    #[test]
    fn output_forecast_matches_three_system_simulation() {
        let cfg = config(ErrorMode::OutputFeedback, 3, false);
        let mut state = cfg.init(&x0());
        state.est_errors = vec![vector(&[0.01, -0.02]), vector(&[0.0, 0.03]), vector(&[-0.01, 0.0])];
        let t = 4;
        state.t = t;
        let anchor = vector(&[0.02, 0.01]);
        let f = cfg.forecast(N, t, &anchor, &state.est_errors);
        let sys = &cfg.sys;
        let mut expected = vec![Vector::zeros(2); N + 1];
        for j in 0..3 {
            // Plant, observer and nominal system driven by the same samples
            // with v ≡ 0 and z starting at the origin.
            let mut z = Vector::zeros(2);
            let mut xhat = anchor.clone();
            let mut x = &xhat + &state.est_errors[j];
            for (i, slot) in expected.iter_mut().enumerate() {
                *slot += &x - &z;
                if i == N {
                    break;
                }
                let u = &sys.k * (&xhat - &z);
                let w = cfg.scenarios.w.sample(j).column(t + i).into_owned();
                let eta = cfg.scenarios.eta.as_ref().unwrap().sample(j).column(t + i).into_owned();
                let y = sys.output(&x, &u, &eta).unwrap();
                xhat = sys.step_observer(&xhat, &u, &y).unwrap();
                x = sys.step_plant(&x, &u, &w).unwrap();
                z = sys.step_nominal(&z, &Vector::zeros(1)).unwrap();
            }
        }
        for i in 0..=N {
            assert!((&f.mean_state[i] - &expected[i] / 3.0).amax() < 1e-10);
        }
    }

    #[test]
    fn open_loop_plan_respects_tightened_sets() {
        let cfg = config(ErrorMode::StateFeedback, 4, false);
        let plan = cfg.open_loop_tube_policy(&x0()).unwrap();
        assert_eq!(plan.z.len(), NBAR + 1);
        for (t, z) in plan.z.iter().enumerate().take(NBAR) {
            assert!(cfg.sets.state[t].contains(z, 1e-8));
        }
        assert!(plan.z[NBAR].amax() < 1e-8);
    }

    #[test]
    fn infeasible_start_names_sets() {
        let cfg = config(ErrorMode::StateFeedback, 2, false);
        let mut state = cfg.init(&vector(&[1.5, 0.0]));
        match cfg.control_step(&mut state, Measurement::State(vector(&[1.5, 0.0]))) {
            Err(Error::InitialInfeasible { violated }) => {
                assert!(violated.iter().any(|v| v.starts_with("Z_0")), "{violated:?}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_measurement_kind_is_rejected() {
        let cfg = config(ErrorMode::StateFeedback, 2, false);
        let mut state = cfg.init(&x0());
        assert!(cfg.control_step(&mut state, Measurement::Output(None)).is_err());
    }

    #[test]
    fn diagnostics_csv_has_one_row_per_step() {
        let cfg = config(ErrorMode::StateFeedback, 2, false);
        let mut state = cfg.init(&x0());
        let mut diags = Vec::new();
        for _ in 0..3 {
            let x = state.z.clone();
            diags.push(cfg.control_step(&mut state, Measurement::State(x)).unwrap().diagnostics);
        }
        let csv = diagnostics_csv(&diags);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,Optimal"));
    }
}
