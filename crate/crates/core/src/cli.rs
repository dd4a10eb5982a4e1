//! `csmpc` subcommands. Each command validates the whole config, computes
//! everything in memory and only then writes into the output directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Mode, RunConfig};
use crate::conformal::{ConfidenceRegion, ScoreKind};
use crate::controller::diagnostics_csv;
use crate::error::{Error, Result};
use crate::evaluation::{
    chebyshev_level, chebyshev_region, chi2_quantile, compare_policies, compare_regions, draw_realization,
    gaussian_truth_region, gaussian_truth_region_output, run_monte_carlo, run_rollout,
    write_plot_data, BaselineRegion, BaselineSection, PolicyComparison,
};
use crate::io::{to_json_string, write_atomic};

#[derive(Debug, Parser)]
#[command(name = "csmpc", version, about = "Conformal stochastic MPC experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate the confidence region and write it to the output directory.
    Calibrate(CommonArgs),
    /// Simulate one closed loop.
    Run(RunArgs),
    /// Monte Carlo evaluation with baseline regions.
    Evaluate(EvalArgs),
    /// Region comparison and paired receding-horizon vs open-loop costs.
    Compare(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `horizon.mode`.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Overrides `evaluation.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Drive the plant with w ≡ 0 and η ≡ 0.
    #[arg(long)]
    pub zero_noise: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Skip the Chebyshev and Gaussian baseline regions.
    #[arg(long)]
    pub no_baselines: bool,
}

/// Exit code per error category.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Calibration(_) => 4,
        Error::InitialInfeasible { .. } => 5,
        _ => 1,
    }
}

struct Context {
    cfg: RunConfig,
    mode: Mode,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn new(args: &CommonArgs) -> Result<Self> {
        let cfg = RunConfig::load(&args.config)?;
        let mode = args.mode.unwrap_or(cfg.horizon.mode);
        let seed = args.seed.unwrap_or(cfg.evaluation.seed);
        let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Self { cfg, mode, seed, out })
    }

    fn region_path(&self, mode: Mode) -> PathBuf {
        self.out.join(format!("region_{}.json", mode.name()))
    }

    /// The stored region of `mode` if one exists, else a fresh calibration.
    fn region(&self, mode: Mode) -> Result<ConfidenceRegion> {
        let path = self.region_path(mode);
        let region = if path.exists() {
            log::info!("using stored region {}", path.display());
            ConfidenceRegion::load(&path)?
        } else {
            self.cfg.calibrate(mode)?
        };
        if region.horizon() < self.cfg.calibration_horizon() || region.dim != self.cfg.x0().len() {
            return Err(Error::Config(format!(
                "stored region {} does not match the config (horizon {}, dimension {})",
                path.display(),
                region.horizon(),
                region.dim
            )));
        }
        Ok(region)
    }
}

#[derive(Debug, Serialize)]
pub struct CalibrationSummary {
    pub mode: String,
    pub score: ScoreKind,
    pub level: f64,
    pub qhat: f64,
    /// Quantile index `k` (1-based order statistic).
    pub rank: usize,
    pub n_fit: usize,
    pub n_cal: usize,
    pub horizon: usize,
    pub pac_epsilon: Option<f64>,
    /// `ϑ̃` after PAC tightening.
    pub pac_violation: Option<f64>,
}

impl CalibrationSummary {
    pub fn new(mode: Mode, region: &ConfidenceRegion) -> Self {
        Self {
            mode: mode.name().into(),
            score: region.kind(),
            level: region.level,
            qhat: region.qhat,
            rank: region.rank,
            n_fit: region.fit_indices.len(),
            n_cal: region.m_cal,
            horizon: region.horizon(),
            pac_epsilon: region.pac.map(|p| p.epsilon),
            pac_violation: region.pac.map(|p| p.tightened_violation),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode        {}", self.mode);
        let _ = writeln!(s, "score       {:?}", self.score);
        let _ = writeln!(s, "level p     {}", self.level);
        let _ = writeln!(s, "split       {} fit / {} calibration", self.n_fit, self.n_cal);
        let _ = writeln!(s, "horizon     {}", self.horizon);
        let _ = writeln!(s, "k           {}", self.rank);
        let _ = writeln!(s, "q̂           {:.6}", self.qhat);
        if let (Some(e), Some(v)) = (self.pac_epsilon, self.pac_violation) {
            let _ = writeln!(s, "PAC ε       {e}");
            let _ = writeln!(s, "ϑ̃           {v:.6}");
        }
        s
    }
}

pub fn cmd_calibrate(args: &CommonArgs) -> Result<String> {
    let ctx = Context::new(args)?;
    let region = ctx.cfg.calibrate(ctx.mode)?;
    let summary = CalibrationSummary::new(ctx.mode, &region);
    region.save(&ctx.region_path(ctx.mode))?;
    write_atomic(
        &ctx.out.join(format!("calibration_{}.json", ctx.mode.name())),
        to_json_string(&summary)?.as_bytes(),
    )?;
    Ok(summary.to_text())
}

pub fn cmd_run(args: &RunArgs) -> Result<String> {
    let ctx = Context::new(&args.common)?;
    let region = ctx.region(ctx.mode)?;
    let smpc = ctx.cfg.controller(ctx.mode, &region)?;
    let noise = ctx.cfg.noise(ctx.mode, args.zero_noise)?;
    let (w, eta) = draw_realization(&noise, ctx.cfg.horizon.n_bar, ctx.seed, 0)?;
    let (record, diags) = run_rollout(&smpc, &region, &ctx.cfg.x0(), &w, eta.as_ref())?;
    let dir = ctx.out.join(format!("run_{}", ctx.mode.name()));
    let records = std::slice::from_ref(&record);
    write_atomic(&dir.join("diagnostics.csv"), diagnostics_csv(&diags).as_bytes())?;
    write_atomic(&dir.join("record.json"), to_json_string(&record)?.as_bytes())?;
    let conformal = BaselineRegion::from_conformal("conformal", &region)?;
    write_plot_data(&dir, &[conformal], region.qhat, records, true)?;
    Ok(format!(
        "wrote {}\ncost {:.6}, region {}, state constraints {}, input constraints {}\n",
        dir.display(),
        record.cost,
        if record.within_region { "kept" } else { "left" },
        if record.state_feasible { "met" } else { "violated" },
        if record.input_feasible { "met" } else { "violated" },
    ))
}

/// Conformal, Chebyshev and (when the truth is known) Gaussian regions over
/// `N̄ + N` steps.
pub fn baseline_section(cfg: &RunConfig, mode: Mode, region: &ConfidenceRegion) -> Result<BaselineSection> {
    let horizon = cfg.calibration_horizon();
    let mut conformal = BaselineRegion::from_conformal("conformal", region)?;
    conformal.per_step.truncate(horizon);
    let mut others = vec![chebyshev_region(region, cfg.horizon.theta, horizon)?];
    let sys = cfg.system()?;
    let level = cfg.level();
    let truth = match (mode, cfg.gaussian_w(), cfg.gaussian_eta()) {
        (Mode::State, Some(sw), _) => Some(gaussian_truth_region(&sw, &sys, level, horizon)?),
        (Mode::Output, Some(sw), Some(se)) => Some(gaussian_truth_region_output(&sw, &se, &sys, level, horizon)?),
        _ => None,
    };
    let gaussian_level = match truth {
        Some(t) => {
            others.push(t);
            Some(chi2_quantile(sys.nx(), level)?)
        }
        None => None,
    };
    Ok(BaselineSection {
        chebyshev_level: chebyshev_level(sys.nx(), horizon, cfg.horizon.theta)?,
        gaussian_level,
        comparison: compare_regions(&conformal, &others)?,
    })
}

fn all_regions(region: &ConfidenceRegion, section: Option<&BaselineSection>, cfg: &RunConfig) -> Result<Vec<BaselineRegion>> {
    let mut regions = vec![BaselineRegion::from_conformal("conformal", region)?];
    if section.is_some() {
        let horizon = cfg.calibration_horizon();
        regions[0].per_step.truncate(horizon);
        regions.push(chebyshev_region(region, cfg.horizon.theta, horizon)?);
    }
    Ok(regions)
}

pub fn cmd_evaluate(args: &EvalArgs) -> Result<String> {
    let ctx = Context::new(&args.common)?;
    let cfg = &ctx.cfg;
    let region = ctx.region(ctx.mode)?;
    let smpc = cfg.controller(ctx.mode, &region)?;
    let noise = cfg.noise(ctx.mode, false)?;
    let (mut report, records) = run_monte_carlo(&smpc, &region, &cfg.x0(), &noise, cfg.evaluation.n_test, ctx.seed)?;
    if cfg.evaluation.baselines && !args.no_baselines {
        report.baselines = Some(baseline_section(cfg, ctx.mode, &region)?);
    }
    let dir = ctx.out.join(format!("evaluate_{}", ctx.mode.name()));
    let text = report.to_text();
    write_atomic(&dir.join("report.json"), to_json_string(&report)?.as_bytes())?;
    write_atomic(&dir.join("report.txt"), text.as_bytes())?;
    let regions = all_regions(&region, report.baselines.as_ref(), cfg)?;
    write_plot_data(&dir, &regions, region.qhat, &records, cfg.evaluation.write_records)?;
    Ok(text)
}

#[derive(Debug, Serialize)]
pub struct CompareReport {
    pub regions: BaselineSection,
    pub policies: PolicyComparison,
}

pub fn cmd_compare(args: &CommonArgs) -> Result<String> {
    let ctx = Context::new(args)?;
    let cfg = &ctx.cfg;
    let region_mode = ctx.region(ctx.mode)?;
    let regions = baseline_section(cfg, ctx.mode, &region_mode)?;
    // Policies are compared under state feedback.
    let region = if ctx.mode == Mode::State {
        region_mode
    } else {
        ctx.region(Mode::State)?
    };
    let smpc = cfg.controller(Mode::State, &region)?;
    let noise = cfg.noise(Mode::State, false)?;
    let policies = compare_policies(&smpc, &region, &cfg.x0(), &noise, cfg.evaluation.n_test, ctx.seed)?;
    let report = CompareReport { regions, policies };
    let text = format!("{}\n{}", report.regions.to_text(), report.policies.to_text());
    let dir = ctx.out.join(format!("compare_{}", ctx.mode.name()));
    write_atomic(&dir.join("compare.json"), to_json_string(&report)?.as_bytes())?;
    write_atomic(&dir.join("compare.txt"), text.as_bytes())?;
    write_atomic(
        &dir.join("policy_costs.csv"),
        policy_costs_csv(&report.policies).as_bytes(),
    )?;
    Ok(text)
}

fn policy_costs_csv(p: &PolicyComparison) -> String {
    let mut s = String::from("rollout,receding,open_loop\n");
    for (i, (r, o)) in p.receding_costs.iter().zip(&p.open_loop_costs).enumerate() {
        let _ = writeln!(s, "{i},{r:.16e},{o:.16e}");
    }
    s
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Run(a) => cmd_run(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Whether `dir` holds any file (used to check failure atomicity).
pub fn has_outputs(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{CalibrationError, DataError};

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&DataError::Empty.into()), 3);
        assert_eq!(exit_code(&CalibrationError::Other("x".into()).into()), 4);
        assert_eq!(exit_code(&Error::InitialInfeasible { violated: vec![] }), 5);
        assert_eq!(exit_code(&Error::Qp("x".into())), 1);
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from([
            "csmpc", "run", "--config", "c.toml", "--mode", "output", "--seed", "7", "--out", "o", "--zero-noise",
        ])
        .unwrap();
        match cli.command {
            Command::Run(a) => {
                assert_eq!(a.common.mode, Some(Mode::Output));
                assert_eq!(a.common.seed, Some(7));
                assert!(a.zero_noise);
            }
            other => panic!("parsed {other:?}"),
        }
        assert!(Cli::try_parse_from(["csmpc", "evaluate", "--config", "c", "--no-baselines"]).is_ok());
        assert!(Cli::try_parse_from(["csmpc", "run"]).is_err());
    }
}
