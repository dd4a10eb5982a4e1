//! TOML run configuration and the pipeline pieces built from it.
//!
//! Every block has defaults equal to the inverted-pendulum reference
//! experiment, so a file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate_dataset, CalibrationOptions, ConfidenceRegion, ScoreKind};
use crate::controller::{ScenarioSet, SmpcConfig, SmpcSetup};
use crate::data::{generate_gaussian, generate_uniform, load_dataset, Role, SplitSpec, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::evaluation::{NoiseModel, NoiseSpec};
use crate::geometry::{HalfspacePolytope, TerminalSet};
use crate::linalg::{from_rows, Mat, Vector};
use crate::model::{CostSpec, LtiSystem};
use crate::propagation::{propagate_output_errors, propagate_state_errors, ErrorMode};
use crate::qp::QpSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    State,
    Output,
}

impl Mode {
    pub fn error_mode(self) -> ErrorMode {
        match self {
            Self::State => ErrorMode::StateFeedback,
            Self::Output => ErrorMode::OutputFeedback,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::State => "state",
            Self::Output => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemBlock {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
}

impl Default for SystemBlock {
    fn default() -> Self {
        Self {
            a: vec![vec![1.0, 0.1], vec![0.75, 0.95]],
            b: vec![vec![0.0], vec![0.1]],
            c: vec![vec![1.0, 0.0]],
            d: vec![vec![0.0]],
            k: vec![vec![-10.0, -4.0]],
            l: vec![vec![0.7], vec![1.2]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostBlock {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Zero when omitted.
    pub p_f: Option<Vec<Vec<f64>>>,
}

impl Default for CostBlock {
    fn default() -> Self {
        Self {
            q: vec![vec![100.0, 0.0], vec![0.0, 100.0]],
            r: vec![vec![10.0]],
            p_f: None,
        }
    }
}

/// A box `lower ≤ x ≤ upper` or halfspaces `normals · x ≤ offsets`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetSpec {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Halfspaces { normals: Vec<Vec<f64>>, offsets: Vec<f64> },
}

impl SetSpec {
    fn build(&self) -> Result<HalfspacePolytope> {
        match self {
            Self::Box { lower, upper } => HalfspacePolytope::from_box(lower, upper),
            Self::Halfspaces { normals, offsets } => {
                HalfspacePolytope::new(from_rows(normals)?, Vector::from_vec(offsets.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Origin,
    Polytope {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
        gain: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintBlock {
    pub state: SetSpec,
    pub input: SetSpec,
    pub terminal: TerminalSpec,
}

impl Default for ConstraintBlock {
    fn default() -> Self {
        Self {
            state: SetSpec::Box {
                lower: vec![-1.0, -1.0],
                upper: vec![1.0, 1.0],
            },
            input: SetSpec::Box {
                lower: vec![-10.0],
                upper: vec![10.0],
            },
            terminal: TerminalSpec::Origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonBlock {
    /// MPC horizon `N`.
    pub n: usize,
    /// Closed-loop length `N̄`.
    pub n_bar: usize,
    /// Allowed joint violation probability `ϑ`.
    pub theta: f64,
    /// Coverage level, `1 − ϑ` when omitted.
    pub p: Option<f64>,
    /// Scenario count `S` for the sampled cost.
    pub scenarios: usize,
    pub x0: Vec<f64>,
    pub mode: Mode,
}

impl Default for HorizonBlock {
    fn default() -> Self {
        Self {
            n: 20,
            n_bar: 100,
            theta: 0.1,
            p: None,
            scenarios: 20,
            x0: vec![0.75, -0.70],
            mode: Mode::State,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    Gaussian { cov: Vec<Vec<f64>> },
    Uniform { half_widths: Vec<f64> },
}

impl NoiseConfig {
    fn model(&self) -> Result<NoiseModel> {
        Ok(match self {
            Self::Gaussian { cov } => NoiseModel::Gaussian { cov: from_rows(cov)? },
            Self::Uniform { half_widths } => NoiseModel::Uniform {
                half_widths: Vector::from_vec(half_widths.clone()),
            },
        })
    }

    fn generate(&self, role: Role, length: usize, count: usize, seed: u64) -> Result<TrajectoryDataset> {
        match self.model()? {
            NoiseModel::Gaussian { cov } => {
                let mean = Vector::zeros(cov.nrows());
                generate_gaussian(role, length, count, &cov, &mean, seed)
            }
            NoiseModel::Uniform { half_widths } => generate_uniform(role, length, count, &half_widths, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    pub w: NoiseConfig,
    pub eta: NoiseConfig,
    /// Calibration trajectories `M = n_fit + n_cal` when generated.
    pub m: usize,
    pub n_fit: usize,
    pub n_cal: usize,
    pub seed: u64,
    /// Disturbance trajectories to load instead of generating.
    pub disturbance_path: Option<PathBuf>,
    /// Measurement noise trajectories aligned with `disturbance_path`.
    pub noise_path: Option<PathBuf>,
}

impl Default for DataBlock {
    fn default() -> Self {
        Self {
            w: NoiseConfig::Gaussian {
                cov: vec![vec![4e-4, 0.0], vec![0.0, 4e-4]],
            },
            eta: NoiseConfig::Gaussian { cov: vec![vec![1e-4]] },
            m: 750,
            n_fit: 250,
            n_cal: 500,
            seed: 1,
            disturbance_path: None,
            noise_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationBlock {
    pub score: ScoreKind,
    pub zero_mean: bool,
    pub pac_epsilon: Option<f64>,
    pub weights: Option<Vec<f64>>,
}

impl Default for CalibrationBlock {
    fn default() -> Self {
        Self {
            score: ScoreKind::Mahalanobis,
            zero_mean: true,
            pac_epsilon: None,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationBlock {
    pub n_test: usize,
    pub seed: u64,
    pub baselines: bool,
    /// Also write every closed-loop trajectory as CSV.
    pub write_records: bool,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        Self {
            n_test: 1000,
            seed: 2024,
            baselines: true,
            write_records: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemBlock,
    pub cost: CostBlock,
    pub constraints: ConstraintBlock,
    pub horizon: HorizonBlock,
    pub data: DataBlock,
    pub calibration: CalibrationBlock,
    pub evaluation: EvaluationBlock,
    pub output_dir: PathBuf,
    /// Directory relative dataset paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn field<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Config(format!("{name}: {e}")))
}

fn check(name: &str, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name}: {msg}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.output_dir.as_os_str().is_empty() {
            cfg.output_dir = PathBuf::from("out");
        }
        Ok(cfg)
    }

    /// Reads and validates a config file; relative paths inside it are
    /// taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the whole configuration before any computation.
    pub fn validate(&self) -> Result<()> {
        let sys = self.system()?;
        let (nx, nu, ny) = (sys.nx(), sys.nu(), sys.ny());
        self.cost()?;
        let x = field("constraints.state", self.constraints.state.build())?;
        let u = field("constraints.input", self.constraints.input.build())?;
        check("constraints.state", x.dim() == nx, "dimension differs from A")?;
        check("constraints.input", u.dim() == nu, "dimension differs from B")?;
        self.terminal()?;
        let h = &self.horizon;
        check("horizon.n", h.n >= 1, "must be at least 1")?;
        check("horizon.n_bar", h.n_bar >= h.n, "must be at least horizon.n")?;
        check("horizon.theta", h.theta > 0.0 && h.theta < 1.0, "must lie in (0, 1)")?;
        if let Some(p) = h.p {
            check("horizon.p", p > 0.0 && p < 1.0, "must lie in (0, 1)")?;
        }
        check("horizon.scenarios", h.scenarios >= 1, "must be at least 1")?;
        check("horizon.x0", h.x0.len() == nx, "length differs from the state dimension")?;
        let d = &self.data;
        let w = field("data.w", d.w.model())?;
        check("data.w", w.dim() == nx, "dimension differs from the state dimension")?;
        let eta = field("data.eta", d.eta.model())?;
        check("data.eta", eta.dim() == ny, "dimension differs from the output dimension")?;
        check("data.n_cal", d.n_cal >= 1, "must be at least 1")?;
        if d.disturbance_path.is_none() {
            check("data.m", d.n_fit + d.n_cal <= d.m, "must be at least n_fit + n_cal")?;
        }
        if self.calibration.score == ScoreKind::Mahalanobis {
            check("data.n_fit", d.n_fit >= 1, "Mahalanobis score needs fit trajectories")?;
        }
        if let Some(eps) = self.calibration.pac_epsilon {
            check("calibration.pac_epsilon", eps > 0.0 && eps < 1.0, "must lie in (0, 1)")?;
        }
        if let Some(wts) = &self.calibration.weights {
            check(
                "calibration.weights",
                wts.len() == nx && wts.iter().all(|&v| v > 0.0),
                "needs one positive weight per state",
            )?;
        }
        check("evaluation.n_test", self.evaluation.n_test >= 1, "must be at least 1")?;
        Ok(())
    }

    pub fn system(&self) -> Result<LtiSystem> {
        let s = &self.system;
        let m = |name: &str, rows: &Vec<Vec<f64>>| field(&format!("system.{name}"), from_rows(rows));
        field(
            "system",
            LtiSystem::new(m("a", &s.a)?, m("b", &s.b)?, m("c", &s.c)?, m("d", &s.d)?, m("k", &s.k)?, m("l", &s.l)?),
        )
    }

    pub fn cost(&self) -> Result<CostSpec> {
        let q = field("cost.q", from_rows(&self.cost.q))?;
        let r = field("cost.r", from_rows(&self.cost.r))?;
        let p_f = match &self.cost.p_f {
            Some(rows) => field("cost.p_f", from_rows(rows))?,
            None => Mat::zeros(q.nrows(), q.ncols()),
        };
        field("cost", CostSpec::new(q, r, p_f))
    }

    pub fn terminal(&self) -> Result<TerminalSet> {
        Ok(match &self.constraints.terminal {
            TerminalSpec::Origin => TerminalSet::Origin,
            TerminalSpec::Polytope { normals, offsets, gain } => {
                let set = field(
                    "constraints.terminal",
                    from_rows(normals).and_then(|n| HalfspacePolytope::new(n, Vector::from_vec(offsets.clone()))),
                )?;
                let gain = field("constraints.terminal.gain", from_rows(gain))?;
                TerminalSet::Polytope { set, gain }
            }
        })
    }

    pub fn x0(&self) -> Vector {
        Vector::from_vec(self.horizon.x0.clone())
    }

    /// Target coverage `p`.
    pub fn level(&self) -> f64 {
        self.horizon.p.unwrap_or(1.0 - self.horizon.theta)
    }

    /// Length `N̄ + N` of calibration and scenario trajectories.
    pub fn calibration_horizon(&self) -> usize {
        self.horizon.n_bar + self.horizon.n
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        let c = &self.calibration;
        CalibrationOptions {
            kind: c.score,
            level: self.level(),
            split: Some(SplitSpec {
                n_fit: self.data.n_fit,
                n_cal: self.data.n_cal,
                shuffle_seed: self.data.seed.wrapping_add(3),
            }),
            pac_epsilon: c.pac_epsilon,
            zero_mean: c.zero_mean,
            weights: c.weights.clone(),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Calibration disturbances (and noise in output mode), loaded or generated.
    pub fn calibration_data(&self, mode: Mode) -> Result<(TrajectoryDataset, Option<TrajectoryDataset>)> {
        let d = &self.data;
        let (nx, ny) = (self.system.a.len(), self.system.c.len());
        let t = self.calibration_horizon();
        let count = d.n_fit + d.n_cal;
        let w = match &d.disturbance_path {
            Some(p) => load_dataset(&self.resolve(p), Some(nx), Some(t))?,
            None => d.w.generate(Role::Disturbance, t, d.m, d.seed)?,
        };
        if w.count() < count {
            return Err(crate::error::DataError::SplitTooLarge {
                needed: count,
                available: w.count(),
            }
            .into());
        }
        let eta = match mode {
            Mode::State => None,
            Mode::Output => Some(match (&d.noise_path, &d.disturbance_path) {
                (Some(p), _) => load_dataset(&self.resolve(p), Some(ny), Some(w.len()))?,
                (None, Some(_)) => {
                    return Err(crate::error::DataError::Missing(
                        "data.noise_path (required with data.disturbance_path in output mode)".into(),
                    )
                    .into())
                }
                (None, None) => d.eta.generate(Role::Noise, w.len(), w.count(), d.seed.wrapping_add(1))?,
            }),
        };
        Ok((w, eta))
    }

    /// Propagates the calibration data through the error dynamics of `mode`
    /// and calibrates the confidence region.
    pub fn calibrate(&self, mode: Mode) -> Result<ConfidenceRegion> {
        let sys = self.system()?;
        let (w, eta) = self.calibration_data(mode)?;
        let errors = match &eta {
            Some(eta) => propagate_output_errors(&sys, &w, eta)?,
            None => propagate_state_errors(&sys, &w)?,
        };
        calibrate_dataset(&errors.state_errors, &self.calibration_options())
    }

    /// Fresh disturbance (and noise) samples for the sampled cost.
    pub fn scenarios(&self, mode: Mode) -> Result<ScenarioSet> {
        let t = self.calibration_horizon();
        let s = self.horizon.scenarios;
        let seed = self.data.seed.wrapping_add(2);
        let w = self.data.w.generate(Role::Disturbance, t, s, seed)?;
        let eta = match mode {
            Mode::State => None,
            Mode::Output => Some(self.data.eta.generate(Role::Noise, t, s, seed.wrapping_add(1))?),
        };
        Ok(ScenarioSet { w, eta })
    }

    pub fn controller(&self, mode: Mode, region: &ConfidenceRegion) -> Result<SmpcConfig> {
        let setup = SmpcSetup {
            sys: self.system()?,
            cost: self.cost()?,
            mode: mode.error_mode(),
            horizon: self.horizon.n,
            total_horizon: self.horizon.n_bar,
            state_constraints: self.constraints.state.build()?,
            input_constraints: self.constraints.input.build()?,
            terminal: self.terminal()?,
            scenarios: self.scenarios(mode)?,
            qp_settings: QpSettings::default(),
        };
        SmpcConfig::new(setup, region)
    }

    /// Rollout noise; `zero` replaces both channels with zeros.
    pub fn noise(&self, mode: Mode, zero: bool) -> Result<NoiseSpec> {
        let (nx, ny) = (self.system.a.len(), self.system.c.len());
        let output = mode == Mode::Output;
        if zero {
            return Ok(NoiseSpec {
                w: NoiseModel::zero(nx),
                eta: output.then(|| NoiseModel::zero(ny)),
            });
        }
        Ok(NoiseSpec {
            w: self.data.w.model()?,
            eta: if output { Some(self.data.eta.model()?) } else { None },
        })
    }

    /// `Σ_w` when the disturbance is Gaussian.
    pub fn gaussian_w(&self) -> Option<Mat> {
        match self.data.w.model().ok()? {
            NoiseModel::Gaussian { cov } => Some(cov),
            NoiseModel::Uniform { .. } => None,
        }
    }

    /// `Σ_η` when the measurement noise is Gaussian.
    pub fn gaussian_eta(&self) -> Option<Mat> {
        match self.data.eta.model().ok()? {
            NoiseModel::Gaussian { cov } => Some(cov),
            NoiseModel::Uniform { .. } => None,
        }
    }
}
