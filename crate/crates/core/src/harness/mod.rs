//! End-to-end experiments: data generation, constants, tightening and the
//! n-step closed loop, plus the multi-seed reproduction study.

mod export;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constants::{compute_cpe, compute_xi_max, estimate_constants, ProvenanceTags, SystemConstants};
use crate::error::{Error, Result};
use crate::hankel::{DataRecord, View};
use crate::lti::{equilibrium_check, gamma_oracle, rho_oracle, simulate, NoiseSpec, PlantSpec, StateSpaceModel, DEFAULT_EQUILIBRIUM_TOL};
use crate::mpc::{prediction_error_diagnostic, ActiveRow, ControllerSetup, ControllerState, InputBox, MpcConfig, SolutionNorms, StageCost};
use crate::solver::Backend;
use crate::tightening::{compute_coefficients, feasibility_precheck, TighteningCoefficients};

pub use export::{
    closed_loop_svg_input, closed_loop_svg_output, write_closed_loop_csv, write_constants_csv, write_solves_json,
};

/// Attempts made by [`generate_data`] before giving up.
pub const DATA_ATTEMPTS: u64 = 5;

/// Distance to an input bound that counts as saturated.
pub const SATURATION_TOL: f64 = 1e-6;

/// Offset separating the measurement-noise stream of a data record from
/// its input stream.
const DATA_NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantsSource {
    /// Γ and ρ certified from the clean data by linear programming.
    Data,
    /// Γ and ρ from the plant model.
    Oracle,
    /// Loaded from `constants_file`.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasiblePolicy {
    /// Stop the run at the first failed solve.
    Halt,
    /// Keep applying the last input, flagging every affected step.
    HoldLastInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSpec,
    #[serde(rename = "N")]
    pub samples: usize,
    /// Order bound used for the past window.
    pub n: usize,
    pub eps_bar: f64,
    pub data_seed: u64,
    /// One closed loop per seed in multi-seed studies; single runs use the
    /// first.
    pub online_seeds: Vec<u64>,
    pub input_box: InputBox,
    #[serde(rename = "L")]
    pub horizon: usize,
    /// `λ_α ε̄`; `λ_α` itself follows from `eps_bar`.
    pub lambda_alpha_eps_bar: f64,
    pub lambda_sigma: f64,
    pub stage_cost: StageCost,
    /// `null` for no output constraint.
    pub y_max: Option<f64>,
    pub u_s: Vec<f64>,
    pub y_s: Vec<f64>,
    #[serde(rename = "T")]
    pub steps: usize,
    pub constants_source: ConstantsSource,
    pub constants_file: Option<PathBuf>,
    pub on_infeasible: InfeasiblePolicy,
    /// Roll every solution out on the true plant and compare.
    pub prediction_diagnostic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: PlantSpec::example_plant(),
            samples: 1000,
            n: 3,
            eps_bar: 1e-4,
            data_seed: 0,
            online_seeds: (0..10).collect(),
            input_box: InputBox::symmetric(10.0, 1),
            horizon: 10,
            lambda_alpha_eps_bar: 1.0,
            lambda_sigma: 100.0,
            stage_cost: StageCost::Linear { u: vec![0.0], y: vec![-1.0] },
            y_max: Some(10.0),
            u_s: vec![5.0],
            y_s: vec![5.0],
            steps: 120,
            constants_source: ConstantsSource::Data,
            constants_file: None,
            on_infeasible: InfeasiblePolicy::Halt,
            prediction_diagnostic: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(s).map_err(|e| Error::Parse(format!("experiment config: {e}")))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn mpc_config(&self) -> MpcConfig {
        MpcConfig {
            horizon: self.horizon,
            n: self.n,
            eps_bar: self.eps_bar,
            lambda_alpha: if self.eps_bar > 0.0 { self.lambda_alpha_eps_bar / self.eps_bar } else { 0.0 },
            lambda_sigma: self.lambda_sigma,
            stage_cost: self.stage_cost.clone(),
            input_box: self.input_box.clone(),
            y_max: self.y_max,
            u_s: self.u_s.clone(),
            y_s: self.y_s.clone(),
        }
    }

    /// Order of persistence of excitation the controller needs.
    pub fn pe_order(&self) -> usize {
        self.horizon + 2 * self.n
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<StateSpaceModel> {
        let plant = self.plant.to_model()?;
        let (m, p) = (plant.inputs(), plant.outputs());
        if self.n < plant.order() {
            return Err(Error::invalid(format!("n = {} is below the plant order {}", self.n, plant.order())));
        }
        self.mpc_config().validate(m, p)?;
        if self.steps == 0 || self.steps % self.n != 0 {
            return Err(Error::invalid(format!("T = {} must be a positive multiple of n = {}", self.steps, self.n)));
        }
        let needed = (m + 1) * self.pe_order() - 1;
        if self.samples < needed {
            return Err(Error::invalid(format!(
                "N = {} is too short for persistence of excitation of order {} (need at least {needed})",
                self.samples,
                self.pe_order()
            )));
        }
        if self.online_seeds.is_empty() {
            return Err(Error::invalid("online_seeds must not be empty"));
        }
        if self.constants_source == ConstantsSource::File && self.constants_file.is_none() {
            return Err(Error::invalid("constants source 'file' needs constants_file"));
        }
        if !(self.lambda_alpha_eps_bar >= 0.0 && self.lambda_alpha_eps_bar.is_finite()) {
            return Err(Error::invalid("lambda_alpha_eps_bar must be finite and nonnegative"));
        }
        Ok(plant)
    }

    /// Extended-state bound for the tightening. Without an output
    /// constraint the largest measured output in the data stands in for
    /// `y_max`.
    pub fn xi_max(&self, data: &DataRecord) -> Result<f64> {
        let y_bound = match self.y_max {
            Some(v) => v,
            None => data.y_record(View::Noisy).amax(),
        };
        compute_xi_max(&self.input_box.lower, &self.input_box.upper, y_bound, data.outputs(), self.n)
    }
}

/// Uniform input on `input_box`, outputs simulated from rest, `N + n`
/// samples. Retries with the next seed when the input is not persistently
/// exciting of order `pe_order`.
pub fn generate_data(
    plant: &StateSpaceModel,
    samples: usize,
    prefix: usize,
    input_box: &InputBox,
    seed: u64,
    eps_bar: f64,
    pe_order: usize,
) -> Result<DataRecord> {
    if input_box.dim() != plant.inputs() {
        return Err(Error::dim("input box does not match the plant"));
    }
    if prefix < plant.order() {
        return Err(Error::invalid(format!("prefix {prefix} is below the plant order {}", plant.order())));
    }
    let mut last = None;
    for attempt in 0..DATA_ATTEMPTS {
        let s = seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let u = DMatrix::from_fn(plant.inputs(), samples + prefix, |i, _| {
            rng.random_range(input_box.lower[i]..=input_box.upper[i])
        });
        let noise = NoiseSpec::uniform(eps_bar, s.wrapping_add(DATA_NOISE_STREAM))?;
        let sim = simulate(plant, &DVector::zeros(plant.order()), &u, Some(&noise))?;
        let y = sim.trajectory.y().clone();
        let noisy = sim.noisy_y.expect("noise requested");
        let record = DataRecord::new(u, y, noisy, eps_bar, s, prefix)?;
        let pe = record.persistence_of_excitation(pe_order);
        if pe.persistently_exciting {
            return Ok(record);
        }
        last = Some(pe);
    }
    let pe = last.expect("at least one attempt");
    Err(Error::InsufficientExcitation(format!(
        "no persistently exciting input of order {pe_order} in {DATA_ATTEMPTS} attempts from seed {seed} (last rank {} of {})",
        pe.rank, pe.required
    )))
}

/// Γ and ρ from the plant model, `c_pe` from the noisy data.
pub fn oracle_constants(
    plant: &StateSpaceModel,
    data: &DataRecord,
    horizon: usize,
    xi_max: f64,
    backend: &dyn Backend,
) -> Result<SystemConstants> {
    let n = data.prefix();
    if n != plant.order() {
        return Err(Error::invalid(format!(
            "model-based constants need n equal to the plant order ({} != {})",
            n,
            plant.order()
        )));
    }
    let gamma = gamma_oracle(plant, backend)?;
    let rho = (n..horizon + n).map(|k| rho_oracle(plant, k)).collect();
    let c_pe = compute_cpe(data, View::Noisy, horizon)?;
    SystemConstants::new(n, horizon, gamma, rho, c_pe, xi_max, ProvenanceTags::MODEL_ORACLE)
}

/// Constants for `config.constants_source`.
pub fn resolve_constants(
    config: &ExperimentConfig,
    plant: &StateSpaceModel,
    data: &DataRecord,
    backend: &dyn Backend,
) -> Result<SystemConstants> {
    let xi_max = config.xi_max(data)?;
    let constants = match config.constants_source {
        ConstantsSource::Data => estimate_constants(data, config.horizon, View::Noisy, xi_max, backend)?,
        ConstantsSource::Oracle => oracle_constants(plant, data, config.horizon, xi_max, backend)?,
        ConstantsSource::File => {
            let path = config.constants_file.as_ref().ok_or_else(|| Error::invalid("constants_file not set"))?;
            SystemConstants::from_json_str(&std::fs::read_to_string(path)?)?
        }
    };
    if constants.n != config.n || constants.horizon != config.horizon {
        return Err(Error::invalid(format!(
            "constants are for n = {}, L = {}; config has n = {}, L = {}",
            constants.n, constants.horizon, config.n, config.horizon
        )));
    }
    Ok(constants)
}

/// Everything fixed before the closed loop starts.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub plant: StateSpaceModel,
    pub setup: Arc<ControllerSetup>,
    pub warnings: Vec<String>,
}

impl Pipeline {
    pub fn data(&self) -> &DataRecord {
        &self.setup.data
    }
    pub fn constants(&self) -> &SystemConstants {
        &self.setup.constants
    }
    pub fn coeffs(&self) -> &TighteningCoefficients {
        &self.setup.coeffs
    }
}

/// Data, constants, tightening and the controller, each failure tagged
/// with its stage.
pub fn prepare(config: &ExperimentConfig, backend: &dyn Backend) -> Result<Pipeline> {
    let plant = config.validate().map_err(|e| e.in_stage("config"))?;
    let data = generate_data(&plant, config.samples, config.n, &config.input_box, config.data_seed, config.eps_bar, config.pe_order())
        .map_err(|e| e.in_stage("generate-data"))?;
    prepare_with_data(config, plant, data, backend)
}

/// As [`prepare`], with a given data record.
pub fn prepare_with_data(
    config: &ExperimentConfig,
    plant: StateSpaceModel,
    data: DataRecord,
    backend: &dyn Backend,
) -> Result<Pipeline> {
    if data.prefix() != config.n || data.inputs() != plant.inputs() || data.outputs() != plant.outputs() {
        return Err(Error::invalid("data record does not match the configured plant and n").in_stage("config"));
    }
    let constants = resolve_constants(config, &plant, &data, backend).map_err(|e| e.in_stage("estimate-constants"))?;
    let coeffs =
        compute_coefficients(&constants, config.eps_bar, config.horizon, config.n).map_err(|e| e.in_stage("compute-tightening"))?;
    let warnings = equilibrium_warning(config, &plant)?.into_iter().collect();
    let setup = ControllerSetup::new(config.mpc_config(), data, constants, coeffs).map_err(|e| e.in_stage("assemble"))?;
    Ok(Pipeline { plant, setup, warnings })
}

fn equilibrium_warning(config: &ExperimentConfig, plant: &StateSpaceModel) -> Result<Option<String>> {
    let us = DVector::from_column_slice(&config.u_s);
    let ys = DVector::from_column_slice(&config.y_s);
    let report = equilibrium_check(plant, &us, &ys, DEFAULT_EQUILIBRIUM_TOL)?;
    Ok((!report.is_equilibrium).then(|| {
        format!(
            "setpoint (u_s, y_s) = ({:?}, {:?}) is not an equilibrium of the plant (residual {:.3e}); \
             the terminal constraint pins a transient window, not a steady state",
            config.u_s, config.y_s, report.residual
        )
    }))
}

/// One time step of the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub u: Vec<f64>,
    /// True plant output.
    pub y: Vec<f64>,
    /// Measured output.
    pub ytilde: Vec<f64>,
    /// Whether the input came from an optimal solve.
    pub feasible: bool,
}

/// One receding-horizon solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub t: usize,
    pub feasible: bool,
    pub status: String,
    #[serde(rename = "J")]
    pub objective: Option<f64>,
    pub norms: Option<SolutionNorms>,
    pub sigma_bound_ok: Option<bool>,
    pub active_tightened_rows: Vec<ActiveRow>,
    pub min_tightened_margin: Option<f64>,
    /// Largest measured-error-to-bound ratio of the open-loop rollout.
    pub prediction_max_ratio: Option<f64>,
    pub prediction_violations: usize,
    /// Predicted outputs `ȳ*_k`, `k = 0 … L−1`, one row per step.
    pub predicted_y: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Largest constraint violation of the returned point.
    pub primal_residual: Option<f64>,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityEvent {
    pub t: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopSummary {
    pub online_seed: u64,
    /// `max_t ‖y_t‖_∞` over true outputs.
    pub max_abs_y: f64,
    /// Steps where some true output left `[−y_max, y_max]`.
    pub output_violations: usize,
    /// Steps with some input within [`SATURATION_TOL`] of a bound.
    pub saturated_steps: usize,
    /// Mean true output over the second half of the run, per component.
    pub final_half_mean_y: Vec<f64>,
    pub infeasibility_events: Vec<InfeasibilityEvent>,
    pub sigma_bound_violations: usize,
    pub prediction_violations: usize,
    pub prediction_max_ratio: Option<f64>,
    /// Whether every solve after the first feasible one was feasible.
    pub recursively_feasible: bool,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub steps: Vec<StepRecord>,
    pub solves: Vec<SolveRecord>,
    pub summary: ClosedLoopSummary,
}

impl ClosedLoopLog {
    pub fn had_infeasibility(&self) -> bool {
        !self.summary.infeasibility_events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClosedLoopOptions {
    pub steps: usize,
    pub online_seed: u64,
    pub on_infeasible: InfeasiblePolicy,
    pub prediction_diagnostic: bool,
}

impl ClosedLoopOptions {
    pub fn from_config(config: &ExperimentConfig, online_seed: u64) -> Self {
        Self {
            steps: config.steps,
            online_seed,
            on_infeasible: config.on_infeasible,
            prediction_diagnostic: config.prediction_diagnostic,
        }
    }
}

/// Runs the n-step scheme on the true plant from rest. Past inputs start
/// at zero and past measurements are pure noise. Infeasible solves are
/// recorded as events and never skipped silently.
pub fn run_closed_loop(
    setup: &Arc<ControllerSetup>,
    plant: &StateSpaceModel,
    options: ClosedLoopOptions,
    backend: &dyn Backend,
) -> Result<ClosedLoopLog> {
    let cfg = &setup.config;
    let (m, p, n) = (plant.inputs(), plant.outputs(), cfg.n);
    if options.steps == 0 || options.steps % n != 0 {
        return Err(Error::invalid(format!("T = {} must be a positive multiple of n = {n}", options.steps)));
    }
    if setup.data.inputs() != m || setup.data.outputs() != p {
        return Err(Error::dim("plant does not match the controller data"));
    }
    let mut noise = NoiseSpec::uniform(cfg.eps_bar, options.online_seed)?.sampler();
    let y_init = DMatrix::from_columns(&(0..n).map(|_| noise.sample(p)).collect::<Vec<_>>());
    let mut state = ControllerState::new(setup.clone(), DMatrix::zeros(m, n), y_init)?;
    let mut x = DVector::zeros(plant.order());
    let mut held = DMatrix::zeros(m, n);
    let mut steps = Vec::with_capacity(options.steps);
    let mut solves = Vec::with_capacity(options.steps / n);
    let mut events = Vec::new();
    let mut completed = true;

    while state.t() < options.steps {
        let t = state.t();
        let started = Instant::now();
        let (u_block, feasible) = match state.solve_step(backend) {
            Ok(sol) => {
                let (prediction_max_ratio, prediction_violations) = if options.prediction_diagnostic {
                    let diag = prediction_error_diagnostic(&sol, plant, &x, &setup.constants, cfg.eps_bar)?;
                    let ratio = diag.iter().map(|d| d.ratio()).fold(0.0, f64::max);
                    (Some(ratio), diag.iter().filter(|d| !d.holds()).count())
                } else {
                    (None, 0)
                };
                let future = sol.future_outputs();
                solves.push(SolveRecord {
                    t,
                    feasible: true,
                    status: format!("{:?}", sol.report.status),
                    objective: Some(sol.objective),
                    norms: Some(sol.norms),
                    sigma_bound_ok: Some(sol.sigma_bound_ok),
                    active_tightened_rows: sol.active_tightened_rows.clone(),
                    min_tightened_margin: sol.min_tightened_margin.is_finite().then_some(sol.min_tightened_margin),
                    prediction_max_ratio,
                    prediction_violations,
                    predicted_y: future.column_iter().map(|c| c.iter().copied().collect()).collect(),
                    iterations: sol.report.iterations as usize,
                    primal_residual: Some(sol.report.primal_residual),
                    solve_seconds: started.elapsed().as_secs_f64(),
                });
                (state.n_step_apply(&sol)?, true)
            }
            Err(err @ (Error::Infeasible(_) | Error::Solver(_))) => {
                let mut message = err.to_string();
                if t == 0 {
                    if let Some(y_max) = cfg.y_max {
                        message.push('\n');
                        message.push_str(&feasibility_precheck(&setup.coeffs, y_max)?.table(&setup.coeffs));
                    }
                }
                solves.push(SolveRecord {
                    t,
                    feasible: false,
                    status: match err {
                        Error::Infeasible(_) => "Infeasible".into(),
                        _ => "SolverFailure".into(),
                    },
                    objective: None,
                    norms: None,
                    sigma_bound_ok: None,
                    active_tightened_rows: Vec::new(),
                    min_tightened_margin: None,
                    prediction_max_ratio: None,
                    prediction_violations: 0,
                    predicted_y: Vec::new(),
                    iterations: 0,
                    primal_residual: None,
                    solve_seconds: started.elapsed().as_secs_f64(),
                });
                events.push(InfeasibilityEvent { t, message });
                match options.on_infeasible {
                    InfeasiblePolicy::Halt => {
                        completed = false;
                        break;
                    }
                    InfeasiblePolicy::HoldLastInput => {
                        state.skip_block();
                        let last = held.column(n - 1).into_owned();
                        (DMatrix::from_columns(&vec![last; n]), false)
                    }
                }
            }
            Err(other) => return Err(other),
        };
        let mut y_meas = DMatrix::zeros(p, n);
        for j in 0..n {
            let uj = u_block.column(j).into_owned();
            let (next, yj) = plant.step(&x, &uj);
            let yt = &yj + noise.sample(p);
            y_meas.set_column(j, &yt);
            steps.push(StepRecord {
                t: t + j,
                u: uj.iter().copied().collect(),
                y: yj.iter().copied().collect(),
                ytilde: yt.iter().copied().collect(),
                feasible,
            });
            x = next;
        }
        state.observe(&u_block, &y_meas)?;
        held = u_block;
    }

    let summary = summarize(&steps, &solves, events, cfg, options.online_seed, completed);
    Ok(ClosedLoopLog { steps, solves, summary })
}

fn summarize(
    steps: &[StepRecord],
    solves: &[SolveRecord],
    infeasibility_events: Vec<InfeasibilityEvent>,
    cfg: &MpcConfig,
    online_seed: u64,
    completed: bool,
) -> ClosedLoopSummary {
    let y_max = cfg.y_max_or_inf();
    let abs_max = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let max_abs_y = steps.iter().map(|s| abs_max(&s.y)).fold(0.0, f64::max);
    let output_violations = steps.iter().filter(|s| abs_max(&s.y) > y_max).count();
    let saturated = |s: &StepRecord| {
        s.u.iter()
            .zip(cfg.input_box.lower.iter().zip(&cfg.input_box.upper))
            .any(|(u, (lo, hi))| *u >= hi - SATURATION_TOL || *u <= lo + SATURATION_TOL)
    };
    let saturated_steps = steps.iter().filter(|s| saturated(s)).count();
    let p = cfg.y_s.len();
    let tail = &steps[steps.len() / 2..];
    let final_half_mean_y = (0..p)
        .map(|i| if tail.is_empty() { f64::NAN } else { tail.iter().map(|s| s.y[i]).sum::<f64>() / tail.len() as f64 })
        .collect();
    let first_feasible = solves.iter().position(|s| s.feasible);
    let recursively_feasible = first_feasible.is_some_and(|i| solves[i..].iter().all(|s| s.feasible));
    let ratios: Vec<f64> = solves.iter().filter_map(|s| s.prediction_max_ratio).collect();
    ClosedLoopSummary {
        online_seed,
        max_abs_y,
        output_violations,
        saturated_steps,
        final_half_mean_y,
        infeasibility_events,
        sigma_bound_violations: solves.iter().filter(|s| s.sigma_bound_ok == Some(false)).count(),
        prediction_violations: solves.iter().map(|s| s.prediction_violations).sum(),
        prediction_max_ratio: (!ratios.is_empty()).then(|| ratios.iter().copied().fold(0.0, f64::max)),
        recursively_feasible,
        completed,
    }
}

/// Runs one closed loop per seed on scoped threads sharing the setup.
pub fn run_seeds<B: Backend + Sync>(
    pipeline: &Pipeline,
    config: &ExperimentConfig,
    seeds: &[u64],
    backend: &B,
) -> Result<Vec<ClosedLoopLog>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let options = ClosedLoopOptions::from_config(config, seed);
                scope.spawn(move || run_closed_loop(&pipeline.setup, &pipeline.plant, options, backend))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("closed-loop thread panicked")).collect()
    })
}

/// Pass/fail check of the reproduction study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproductionReport {
    pub config: ExperimentConfig,
    /// Constants used by the controller.
    pub constants: SystemConstants,
    /// Γ and ρ certified from the clean data.
    pub data_constants: SystemConstants,
    pub oracle_constants: SystemConstants,
    pub max_constant_deviation: f64,
    pub summaries: Vec<ClosedLoopSummary>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub runtime_seconds: f64,
}

impl ReproductionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        out
    }
}

/// Tolerance for data-driven vs model-based Γ and ρ.
pub const CONSTANT_MATCH_TOL: f64 = 1e-6;
/// Band for the mean output over the second half of the run.
pub const FINAL_MEAN_BAND: (f64, f64) = (6.0, 8.0);
pub const REPRODUCTION_BUDGET: Duration = Duration::from_secs(600);

/// The full study: data, both constant sets, tightening, one closed loop
/// per online seed, and artifacts in `out_dir`.
pub fn reproduce_example<B: Backend + Sync>(
    config: &ExperimentConfig,
    out_dir: &Path,
    backend: &B,
) -> Result<ReproductionReport> {
    let started = Instant::now();
    let plant = config.validate().map_err(|e| e.in_stage("config"))?;
    let data = generate_data(&plant, config.samples, config.n, &config.input_box, config.data_seed, config.eps_bar, config.pe_order())
        .map_err(|e| e.in_stage("generate-data"))?;
    let xi_max = config.xi_max(&data)?;
    // Γ and ρ from the clean data, for comparison with the model.
    let data_constants =
        estimate_constants(&data, config.horizon, View::Noisy, xi_max, backend).map_err(|e| e.in_stage("estimate-constants"))?;
    let oracle = oracle_constants(&plant, &data, config.horizon, xi_max, backend).map_err(|e| e.in_stage("oracle-constants"))?;
    let max_constant_deviation = data_constants
        .rho
        .iter()
        .zip(&oracle.rho)
        .map(|(a, b)| (a - b).abs())
        .fold((data_constants.gamma - oracle.gamma).abs(), f64::max);

    let pipeline = match config.constants_source {
        ConstantsSource::Data => {
            let coeffs = compute_coefficients(&data_constants, config.eps_bar, config.horizon, config.n)
                .map_err(|e| e.in_stage("compute-tightening"))?;
            let warnings = equilibrium_warning(config, &plant)?.into_iter().collect();
            let setup = ControllerSetup::new(config.mpc_config(), data.clone(), data_constants.clone(), coeffs)
                .map_err(|e| e.in_stage("assemble"))?;
            Pipeline { plant: plant.clone(), setup, warnings }
        }
        _ => prepare_with_data(config, plant.clone(), data.clone(), backend)?,
    };
    let logs = run_seeds(&pipeline, config, &config.online_seeds, backend).map_err(|e| e.in_stage("closed-loop"))?;

    std::fs::create_dir_all(out_dir)?;
    export::write_artifacts(out_dir, &pipeline, &oracle, &logs).map_err(|e| e.in_stage("export"))?;

    let summaries: Vec<ClosedLoopSummary> = logs.iter().map(|l| l.summary.clone()).collect();
    let runtime = started.elapsed();
    let checks = reproduction_checks(config, max_constant_deviation, &summaries, runtime);
    let report = ReproductionReport {
        config: config.clone(),
        constants: pipeline.constants().clone(),
        data_constants,
        oracle_constants: oracle,
        max_constant_deviation,
        summaries,
        checks,
        warnings: pipeline.warnings.clone(),
        runtime_seconds: runtime.as_secs_f64(),
    };
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out_dir.join("summary.txt"), report.summary_text())?;
    Ok(report)
}

fn reproduction_checks(
    config: &ExperimentConfig,
    max_constant_deviation: f64,
    summaries: &[ClosedLoopSummary],
    runtime: Duration,
) -> Vec<Check> {
    let y_max = config.y_max.unwrap_or(f64::INFINITY);
    let worst_y = summaries.iter().map(|s| s.max_abs_y).fold(0.0, f64::max);
    let min_sat = summaries.iter().map(|s| s.saturated_steps).min().unwrap_or(0);
    let means: Vec<f64> = summaries.iter().map(|s| s.final_half_mean_y.first().copied().unwrap_or(f64::NAN)).collect();
    let infeasible: Vec<u64> = summaries.iter().filter(|s| !s.recursively_feasible || !s.completed).map(|s| s.online_seed).collect();
    let prediction_violations: usize = summaries.iter().map(|s| s.prediction_violations).sum();
    let worst_ratio = summaries.iter().filter_map(|s| s.prediction_max_ratio).fold(0.0, f64::max);
    let check = |name: &str, pass: bool, detail: String| Check { name: name.into(), pass, detail };
    vec![
        check(
            "constants match model",
            max_constant_deviation <= CONSTANT_MATCH_TOL,
            format!("max |data − model| over Γ and ρ = {max_constant_deviation:.3e} (tol {CONSTANT_MATCH_TOL:e})"),
        ),
        check(
            "output constraint",
            worst_y <= y_max,
            format!("max |y_t| over {} seeds = {worst_y:.6} (y_max {y_max})", summaries.len()),
        ),
        check("input saturation", min_sat >= 1, format!("fewest saturated steps in a run = {min_sat}")),
        check(
            "final-half mean",
            means.iter().all(|m| (FINAL_MEAN_BAND.0..=FINAL_MEAN_BAND.1).contains(m)),
            format!("means {:?} (band [{}, {}])", means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(), FINAL_MEAN_BAND.0, FINAL_MEAN_BAND.1),
        ),
        check(
            "recursive feasibility",
            infeasible.is_empty(),
            if infeasible.is_empty() { "every solve feasible".into() } else { format!("infeasible solves for seeds {infeasible:?}") },
        ),
        check(
            "prediction error bound",
            prediction_violations == 0,
            format!("{prediction_violations} violations, worst error/bound ratio {worst_ratio:.4}"),
        ),
        check(
            "runtime",
            runtime <= REPRODUCTION_BUDGET,
            format!("{:.1} s (budget {} s)", runtime.as_secs_f64(), REPRODUCTION_BUDGET.as_secs()),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::ClarabelBackend;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig { samples: 300, steps: 30, online_seeds: vec![3], ..ExperimentConfig::default() }
    }

    #[test]
    fn default_config_roundtrips_and_validates() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        let json = cfg.to_json_string().unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&json).unwrap(), cfg);
        let partial = ExperimentConfig::from_json_str(r#"{"T": 60, "eps_bar": 0.0}"#).unwrap();
        assert_eq!(partial.steps, 60);
        assert_eq!(partial.samples, 1000);
        assert!(ExperimentConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn config_rejections() {
        let bad = ExperimentConfig { steps: 121, ..ExperimentConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { samples: 25, ..ExperimentConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { n: 2, ..ExperimentConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { constants_source: ConstantsSource::File, ..ExperimentConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generated_data_is_deterministic_and_exciting() {
        let plant = PlantSpec::example_plant().to_model().unwrap();
        let ib = InputBox::symmetric(10.0, 1);
        let a = generate_data(&plant, 1000, 3, &ib, 7, 1e-4, 16).unwrap();
        let b = generate_data(&plant, 1000, 3, &ib, 7, 1e-4, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.persistence_of_excitation(16).persistently_exciting);
        assert!(a.u_record().iter().all(|v| v.abs() <= 10.0));
        assert!((a.y_record(View::Noisy) - a.y_record(View::Clean)).amax() <= 1e-4);
        let clean = generate_data(&plant, 200, 3, &ib, 7, 0.0, 16).unwrap();
        assert_eq!(clean.y_record(View::Noisy), clean.y_record(View::Clean));
    }

    #[test]
    fn too_short_data_gives_up_after_retries() {
        let plant = PlantSpec::example_plant().to_model().unwrap();
        let err = generate_data(&plant, 20, 3, &InputBox::symmetric(1.0, 1), 0, 0.0, 16).unwrap_err();
        assert!(matches!(err, Error::InsufficientExcitation(_)), "{err}");
    }

    #[test]
    fn origin_run_stays_at_rest() {
        let cfg = ExperimentConfig {
            eps_bar: 0.0,
            stage_cost: StageCost::Quadratic { q: vec![vec![1.0]], r: vec![vec![1.0]] },
            u_s: vec![0.0],
            y_s: vec![0.0],
            constants_source: ConstantsSource::Oracle,
            ..small_config()
        };
        let backend = ClarabelBackend::default();
        let pipe = prepare(&cfg, &backend).unwrap();
        assert!(pipe.warnings.is_empty());
        let log = run_closed_loop(&pipe.setup, &pipe.plant, ClosedLoopOptions::from_config(&cfg, 3), &backend).unwrap();
        assert_eq!(log.steps.len(), 30);
        assert_eq!(log.solves.len(), 10);
        assert!(log.steps.iter().all(|s| s.u[0].abs() < 1e-7 && s.y[0].abs() < 1e-7));
        assert!(log.solves.iter().all(|s| s.objective.unwrap().abs() <= 1e-10));
    }

    #[test]
    fn short_reference_run_behaves() {
        let cfg = ExperimentConfig { constants_source: ConstantsSource::Oracle, ..small_config() };
        let backend = ClarabelBackend::default();
        let pipe = prepare(&cfg, &backend).unwrap();
        // (5, 5) is not an equilibrium of the example plant.
        assert_eq!(pipe.warnings.len(), 1);
        let options = ClosedLoopOptions::from_config(&cfg, 3);
        let log = run_closed_loop(&pipe.setup, &pipe.plant, options, &backend).unwrap();
        assert!(log.summary.completed && log.summary.recursively_feasible);
        assert!(log.summary.max_abs_y <= 10.0);
        assert_eq!(log.summary.prediction_violations, 0);
        let again = run_closed_loop(&pipe.setup, &pipe.plant, options, &backend).unwrap();
        assert_eq!(log.steps, again.steps);
        assert_eq!(log.summary, again.summary);
        let objectives = |l: &ClosedLoopLog| l.solves.iter().map(|s| s.objective).collect::<Vec<_>>();
        assert_eq!(objectives(&log), objectives(&again));
    }

    #[test]
    fn large_noise_is_reported_not_crashed() {
        let cfg = ExperimentConfig { eps_bar: 0.01, constants_source: ConstantsSource::Oracle, ..small_config() };
        let backend = ClarabelBackend::default();
        match prepare(&cfg, &backend) {
            Err(e) => {
                assert!(matches!(e, Error::Infeasible(_)), "{e}");
                assert!(e.to_string().contains("[assemble]"));
            }
            Ok(pipe) => {
                let log = run_closed_loop(&pipe.setup, &pipe.plant, ClosedLoopOptions::from_config(&cfg, 3), &backend).unwrap();
                assert!(log.had_infeasibility() || log.summary.completed);
            }
        }
    }

    #[test]
    fn hold_policy_flags_steps_and_finishes() {
        let cfg = ExperimentConfig {
            on_infeasible: InfeasiblePolicy::HoldLastInput,
            constants_source: ConstantsSource::Oracle,
            ..small_config()
        };
        let backend = ClarabelBackend::default();
        let pipe = prepare(&cfg, &backend).unwrap();
        // Data recorded with |u| ≤ 10, controller limited to |u| ≤ 0.01: the
        // terminal output 9.9 is out of reach, and the slack needed for the
        // terminal window breaks the tightened rows.
        let mut mpc = cfg.mpc_config();
        mpc.input_box = InputBox::symmetric(0.01, 1);
        mpc.u_s = vec![0.0];
        mpc.y_s = vec![9.9];
        let setup = ControllerSetup::new(mpc, pipe.data().clone(), pipe.constants().clone(), pipe.coeffs().clone()).unwrap();
        let log = run_closed_loop(&setup, &pipe.plant, ClosedLoopOptions::from_config(&cfg, 3), &backend).unwrap();
        assert_eq!(log.steps.len(), 30);
        assert_eq!(log.summary.infeasibility_events.len(), 10);
        assert!(log.summary.infeasibility_events[0].message.contains("a4[k]"), "{}", log.summary.infeasibility_events[0].message);
        assert!(log.steps.iter().all(|s| !s.feasible && s.u[0] == 0.0));
        assert!(!log.summary.recursively_feasible);

        let halt = ExperimentConfig { on_infeasible: InfeasiblePolicy::Halt, ..cfg };
        let log = run_closed_loop(&setup, &pipe.plant, ClosedLoopOptions::from_config(&halt, 3), &backend).unwrap();
        assert!(!log.summary.completed);
        assert!(log.steps.is_empty());
        assert_eq!(log.solves.len(), 1);
    }
}
