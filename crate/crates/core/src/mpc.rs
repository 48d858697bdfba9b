//! Robust data-driven MPC: the tightened receding-horizon problem as a
//! convex QP, and the n-step controller around it.
//!
//! Decision vector, in order:
//!
//! | block  | length        | meaning                                   |
//! |--------|---------------|-------------------------------------------|
//! | α      | c = N−L−n+1   | Hankel column weights                     |
//! | σ      | p(L+n)        | output slack                              |
//! | ū      | m(L+n)        | predicted inputs, k = −n … L−1            |
//! | ȳ      | p(L+n)        | predicted outputs, k = −n … L−1           |
//! | α⁺, α⁻ | c each        | split of α for the ℓ1 epigraph            |
//! | s      | mL            | |ū_k| per component, k = 0 … L−1          |
//! | t_u    | 1             | ≥ ‖ū_{[0,L−1]}‖₁                          |
//! | t_α    | 1             | = ‖α‖₁ (through the split)                |
//! | t_σ    | 1             | ≥ ‖σ‖_∞                                   |
//!
//! The non-convex bound ‖σ‖_∞ ≤ ε̄(1 + ‖α‖₁) is left out of the QP and
//! checked on the solution instead.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constants::SystemConstants;
use crate::error::{Error, Result};
use crate::hankel::{DataRecord, View};
use crate::lti::{matrix_from_rows, simulate, StateSpaceModel};
use crate::solver::{Backend, Bound, Constraints, QuadraticProgram, SolveReport, SolveStatus, SparseMatrix, Tolerances};
use crate::tightening::{feasibility_precheck, TighteningCoefficients};

/// Ridge on α when `λ_α ε̄ = 0`, so the minimiser stays unique.
pub const ALPHA_RIDGE: f64 = 1e-10;

/// Slack below which a tightened output row counts as active.
const ACTIVE_ROW_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn symmetric(bound: f64, m: usize) -> Self {
        Self { lower: vec![-bound; m], upper: vec![bound; m] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains_strictly(&self, u: &[f64]) -> bool {
        u.len() == self.dim() && u.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| lo < v && v < hi)
    }

    /// Largest `|u_i|` bound, used for saturation counts.
    pub fn max_abs(&self) -> f64 {
        self.lower.iter().chain(&self.upper).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `ℓ(u, y)` summed over `k = 0 … L−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageCost {
    /// `‖u − u_s‖²_R + ‖y − y_s‖²_Q`.
    Quadratic { q: Vec<Vec<f64>>, r: Vec<Vec<f64>> },
    /// `c_uᵀ u + c_yᵀ y`.
    Linear { u: Vec<f64>, y: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    #[serde(rename = "L")]
    pub horizon: usize,
    pub n: usize,
    pub eps_bar: f64,
    /// Enters the cost as `λ_α ε̄ ‖α‖²`.
    pub lambda_alpha: f64,
    pub lambda_sigma: f64,
    pub stage_cost: StageCost,
    pub input_box: InputBox,
    /// `None` means no output constraint.
    pub y_max: Option<f64>,
    pub u_s: Vec<f64>,
    pub y_s: Vec<f64>,
}

impl MpcConfig {
    pub fn y_max_or_inf(&self) -> f64 {
        self.y_max.unwrap_or(f64::INFINITY)
    }

    /// Effective weight on `‖α‖²`.
    pub fn alpha_weight(&self) -> f64 {
        let w = self.lambda_alpha * self.eps_bar;
        if w > 0.0 {
            w
        } else {
            ALPHA_RIDGE
        }
    }

    pub fn validate(&self, m: usize, p: usize) -> Result<()> {
        if self.n == 0 || self.horizon < 2 * self.n {
            return Err(Error::invalid(format!("need L >= 2n, got L = {}, n = {}", self.horizon, self.n)));
        }
        if !(self.eps_bar >= 0.0 && self.eps_bar.is_finite()) {
            return Err(Error::invalid("eps_bar must be finite and nonnegative"));
        }
        if !(self.lambda_alpha >= 0.0 && self.lambda_alpha.is_finite()) {
            return Err(Error::invalid("lambda_alpha must be finite and nonnegative"));
        }
        if !(self.lambda_sigma > 0.0 && self.lambda_sigma.is_finite()) {
            return Err(Error::invalid("lambda_sigma must be finite and positive"));
        }
        if self.input_box.dim() != m || self.input_box.upper.len() != m {
            return Err(Error::dim(format!("input box has dimension {}, plant has {m} inputs", self.input_box.dim())));
        }
        if self.input_box.lower.iter().zip(&self.input_box.upper).any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::invalid("input box must have finite bounds with lower < upper"));
        }
        let y_max = self.y_max_or_inf();
        if !(y_max > 0.0) {
            return Err(Error::invalid(format!("y_max must be positive, got {y_max}")));
        }
        if self.u_s.len() != m || self.y_s.len() != p {
            return Err(Error::dim("setpoint dimensions do not match the plant"));
        }
        if !self.input_box.contains_strictly(&self.u_s) || self.y_s.iter().any(|y| !(y.abs() < y_max)) {
            return Err(Error::invalid("setpoint must lie strictly inside U x Y"));
        }
        match &self.stage_cost {
            StageCost::Quadratic { q, r } => {
                let q = matrix_from_rows(q, "Q")?;
                let r = matrix_from_rows(r, "R")?;
                if q.shape() != (p, p) || r.shape() != (m, m) {
                    return Err(Error::dim("stage cost weights have the wrong size"));
                }
                for (name, w) in [("Q", q), ("R", r)] {
                    if (&w - w.transpose()).amax() > 1e-12 || w.cholesky().is_none() {
                        return Err(Error::invalid(format!("{name} must be symmetric positive definite")));
                    }
                }
            }
            StageCost::Linear { u, y } => {
                if u.len() != m || y.len() != p {
                    return Err(Error::dim("linear stage cost has the wrong size"));
                }
            }
        }
        Ok(())
    }
}

/// Index map of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub m: usize,
    pub p: usize,
    pub n: usize,
    pub horizon: usize,
    pub cols: usize,
}

impl Layout {
    pub fn window(&self) -> usize {
        self.horizon + self.n
    }
    pub fn alpha(&self) -> usize {
        0
    }
    pub fn sigma(&self) -> usize {
        self.cols
    }
    pub fn u(&self) -> usize {
        self.sigma() + self.p * self.window()
    }
    pub fn y(&self) -> usize {
        self.u() + self.m * self.window()
    }
    pub fn alpha_plus(&self) -> usize {
        self.y() + self.p * self.window()
    }
    pub fn alpha_minus(&self) -> usize {
        self.alpha_plus() + self.cols
    }
    pub fn s(&self) -> usize {
        self.alpha_minus() + self.cols
    }
    pub fn t_u(&self) -> usize {
        self.s() + self.m * self.horizon
    }
    pub fn t_alpha(&self) -> usize {
        self.t_u() + 1
    }
    pub fn t_sigma(&self) -> usize {
        self.t_u() + 2
    }
    pub fn nvars(&self) -> usize {
        self.t_u() + 3
    }
    /// Offset of `ū_k`, `k ∈ [−n, L−1]`.
    pub fn u_at(&self, k: isize) -> usize {
        self.u() + self.m * (k + self.n as isize) as usize
    }
    pub fn y_at(&self, k: isize) -> usize {
        self.y() + self.p * (k + self.n as isize) as usize
    }
}

/// The assembled QP plus bookkeeping for reading solutions.
#[derive(Debug, Clone)]
pub struct AssembledQp {
    pub qp: QuadraticProgram,
    pub layout: Layout,
    /// Constant term dropped from the QP objective.
    pub constant: f64,
    /// Equality rows holding the initial window; their rhs changes per step.
    pub init_rows: std::ops::Range<usize>,
    /// First inequality row of the tightened output constraints, if any.
    pub tightened_rows: Option<usize>,
}

impl AssembledQp {
    /// Points the initial-window equalities at a new measured window.
    pub fn set_initial_window(&mut self, u_init: &DMatrix<f64>, y_init: &DMatrix<f64>) -> Result<()> {
        let l = self.layout;
        if u_init.shape() != (l.m, l.n) || y_init.shape() != (l.p, l.n) {
            return Err(Error::dim(format!(
                "initial window must be {}x{} and {}x{}",
                l.m, l.n, l.p, l.n
            )));
        }
        let start = self.init_rows.start;
        self.qp.eq.rhs.rows_mut(start, l.m * l.n).copy_from_slice(u_init.as_slice());
        self.qp.eq.rhs.rows_mut(start + l.m * l.n, l.p * l.n).copy_from_slice(y_init.as_slice());
        Ok(())
    }
}

/// Builds the tightened QP against the noisy data view.
pub fn assemble(
    config: &MpcConfig,
    data: &DataRecord,
    coeffs: &TighteningCoefficients,
    u_init: &DMatrix<f64>,
    y_init: &DMatrix<f64>,
) -> Result<AssembledQp> {
    let (m, p) = (data.inputs(), data.outputs());
    config.validate(m, p)?;
    let (n, horizon) = (config.n, config.horizon);
    if data.prefix() != n {
        return Err(Error::invalid(format!("data prefix {} differs from n = {n}", data.prefix())));
    }
    if coeffs.len() != horizon - n || coeffs.inputs.n != n {
        return Err(Error::invalid("tightening coefficients do not match L and n"));
    }
    let y_max = config.y_max_or_inf();
    if y_max.is_finite() {
        let pre = feasibility_precheck(coeffs, y_max)?;
        if !pre.feasible() {
            return Err(Error::Infeasible(format!(
                "tightened output constraints are empty by construction (a4[k] >= y_max at k = {:?})\n{}",
                pre.flagged,
                pre.table(coeffs)
            )));
        }
    }
    let window = horizon + n;
    let pe = data.persistence_of_excitation(horizon + 2 * n);
    if !pe.persistently_exciting {
        return Err(Error::InsufficientExcitation(format!(
            "data input not persistently exciting of order {} (rank {} of {})",
            horizon + 2 * n,
            pe.rank,
            pe.required
        )));
    }
    let hu = data.hankel_u(window)?.into_matrix();
    let hy = data.hankel_y(View::Noisy, window)?.into_matrix();
    let cols = hu.ncols();
    let l = Layout { m, p, n, horizon, cols };
    let nv = l.nvars();

    // Equalities.
    let mut eq: Vec<(usize, usize, f64)> = Vec::new();
    let mut eq_rhs: Vec<f64> = Vec::new();
    let mut row = 0;
    // H_u α − ū = 0
    for i in 0..m * window {
        for j in 0..cols {
            eq.push((row, l.alpha() + j, hu[(i, j)]));
        }
        eq.push((row, l.u() + i, -1.0));
        eq_rhs.push(0.0);
        row += 1;
    }
    // H_ỹ α − ȳ − σ = 0
    for i in 0..p * window {
        for j in 0..cols {
            eq.push((row, l.alpha() + j, hy[(i, j)]));
        }
        eq.push((row, l.y() + i, -1.0));
        eq.push((row, l.sigma() + i, -1.0));
        eq_rhs.push(0.0);
        row += 1;
    }
    // Initial window.
    let init_start = row;
    for i in 0..m * n {
        eq.push((row, l.u() + i, 1.0));
        eq_rhs.push(0.0);
        row += 1;
    }
    for i in 0..p * n {
        eq.push((row, l.y() + i, 1.0));
        eq_rhs.push(0.0);
        row += 1;
    }
    let init_rows = init_start..row;
    // Terminal window.
    for k in (horizon - n) as isize..horizon as isize {
        for i in 0..m {
            eq.push((row, l.u_at(k) + i, 1.0));
            eq_rhs.push(config.u_s[i]);
            row += 1;
        }
        for i in 0..p {
            eq.push((row, l.y_at(k) + i, 1.0));
            eq_rhs.push(config.y_s[i]);
            row += 1;
        }
    }
    // α = α⁺ − α⁻
    for j in 0..cols {
        eq.push((row, l.alpha() + j, 1.0));
        eq.push((row, l.alpha_plus() + j, -1.0));
        eq.push((row, l.alpha_minus() + j, 1.0));
        eq_rhs.push(0.0);
        row += 1;
    }
    // t_α = Σ(α⁺ + α⁻)
    eq.push((row, l.t_alpha(), 1.0));
    for j in 0..cols {
        eq.push((row, l.alpha_plus() + j, -1.0));
        eq.push((row, l.alpha_minus() + j, -1.0));
    }
    eq_rhs.push(0.0);
    row += 1;
    let n_eq = row;

    // Inequalities.
    let mut ineq: Vec<(usize, usize, f64)> = Vec::new();
    let mut ineq_rhs: Vec<f64> = Vec::new();
    let mut row = 0;
    for k in 0..horizon {
        for i in 0..m {
            let u_idx = l.u_at(k as isize) + i;
            let s_idx = l.s() + k * m + i;
            for sign in [1.0, -1.0] {
                ineq.push((row, u_idx, sign));
                ineq.push((row, s_idx, -1.0));
                ineq_rhs.push(0.0);
                row += 1;
            }
        }
    }
    for j in 0..m * horizon {
        ineq.push((row, l.s() + j, 1.0));
    }
    ineq.push((row, l.t_u(), -1.0));
    ineq_rhs.push(0.0);
    row += 1;
    for j in 0..p * window {
        for sign in [1.0, -1.0] {
            ineq.push((row, l.sigma() + j, sign));
            ineq.push((row, l.t_sigma(), -1.0));
            ineq_rhs.push(0.0);
            row += 1;
        }
    }
    let tightened_rows = if y_max.is_finite() {
        let first = row;
        for k in 0..horizon - n {
            for i in 0..p {
                for sign in [1.0, -1.0] {
                    ineq.push((row, l.y_at(k as isize) + i, sign));
                    ineq.push((row, l.t_u(), coeffs.a1[k]));
                    ineq.push((row, l.t_alpha(), coeffs.a2[k]));
                    ineq.push((row, l.t_sigma(), coeffs.a3[k]));
                    ineq_rhs.push(y_max - coeffs.a4[k]);
                    row += 1;
                }
            }
        }
        Some(first)
    } else {
        None
    };
    let n_ineq = row;

    // Bounds.
    let mut bounds = vec![Bound::FREE; nv];
    for k in 0..horizon {
        for i in 0..m {
            bounds[l.u_at(k as isize) + i] = Bound::new(config.input_box.lower[i], config.input_box.upper[i]);
        }
    }
    for j in l.alpha_plus()..l.t_u() + 3 {
        bounds[j] = Bound::NONNEGATIVE;
    }

    // Cost: ½ zᵀHz + fᵀz + constant.
    let mut hess: Vec<(usize, usize, f64)> = Vec::new();
    let mut lin = DVector::zeros(nv);
    let mut constant = 0.0;
    let aw = config.alpha_weight();
    for j in 0..cols {
        hess.push((l.alpha() + j, l.alpha() + j, 2.0 * aw));
    }
    for j in 0..p * window {
        hess.push((l.sigma() + j, l.sigma() + j, 2.0 * config.lambda_sigma));
    }
    match &config.stage_cost {
        StageCost::Quadratic { q, r } => {
            let q = matrix_from_rows(q, "Q")?;
            let r = matrix_from_rows(r, "R")?;
            let us = DVector::from_column_slice(&config.u_s);
            let ys = DVector::from_column_slice(&config.y_s);
            let ru = &r * &us;
            let qy = &q * &ys;
            let per_step = us.dot(&ru) + ys.dot(&qy);
            for k in 0..horizon as isize {
                for a in 0..m {
                    for b in 0..m {
                        hess.push((l.u_at(k) + a, l.u_at(k) + b, 2.0 * r[(a, b)]));
                    }
                    lin[l.u_at(k) + a] -= 2.0 * ru[a];
                }
                for a in 0..p {
                    for b in 0..p {
                        hess.push((l.y_at(k) + a, l.y_at(k) + b, 2.0 * q[(a, b)]));
                    }
                    lin[l.y_at(k) + a] -= 2.0 * qy[a];
                }
                constant += per_step;
            }
        }
        StageCost::Linear { u, y } => {
            for k in 0..horizon as isize {
                for a in 0..m {
                    lin[l.u_at(k) + a] += u[a];
                }
                for a in 0..p {
                    lin[l.y_at(k) + a] += y[a];
                }
            }
        }
    }

    let qp = QuadraticProgram {
        hessian: SparseMatrix::from_triplets(nv, nv, hess),
        linear: lin,
        eq: Constraints::new(SparseMatrix::from_triplets(n_eq, nv, eq), DVector::from_vec(eq_rhs)),
        ineq: Constraints::new(SparseMatrix::from_triplets(n_ineq, nv, ineq), DVector::from_vec(ineq_rhs)),
        bounds: Some(bounds),
    };
    let mut assembled = AssembledQp { qp, layout: l, constant, init_rows, tightened_rows };
    assembled.set_initial_window(u_init, y_init)?;
    Ok(assembled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolutionNorms {
    /// `‖ū_{[0,L−1]}‖₁`.
    pub u1: f64,
    pub alpha1: f64,
    pub sigma_inf: f64,
}

/// One tightened output row at its bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveRow {
    pub k: usize,
    pub output: usize,
    /// `+1` for the upper bound, `−1` for the lower bound.
    pub sign: i8,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Time index the problem was solved at.
    pub t: usize,
    /// `n`: number of past columns in `u`, `y` and `sigma`.
    pub prefix: usize,
    /// `ū_k` for `k = −n … L−1`, one column per step.
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub alpha: DVector<f64>,
    /// `σ_k` for `k = −n … L−1`.
    pub sigma: DMatrix<f64>,
    pub t_u: f64,
    pub t_alpha: f64,
    pub t_sigma: f64,
    /// `J*_L`, constant term included.
    pub objective: f64,
    pub norms: SolutionNorms,
    /// Whether `‖σ*‖_∞ ≤ ε̄(1 + ‖α*‖₁)` holds.
    pub sigma_bound_ok: bool,
    pub active_tightened_rows: Vec<ActiveRow>,
    /// Smallest `y_max − (|ȳ_{k,i}| + a1‖ū‖₁ + a2‖α‖₁ + a3‖σ‖_∞ + a4)` with
    /// the true norms; `+∞` without output constraints.
    pub min_tightened_margin: f64,
    pub report: SolveReport,
}

impl MpcSolution {
    /// `ū_k`, `k ∈ [−n, L−1]`.
    pub fn u_at(&self, k: isize) -> DVector<f64> {
        self.u.column((k + self.prefix as isize) as usize).into_owned()
    }

    pub fn y_at(&self, k: isize) -> DVector<f64> {
        self.y.column((k + self.prefix as isize) as usize).into_owned()
    }

    /// Predicted inputs over `[0, L−1]`.
    pub fn future_inputs(&self) -> DMatrix<f64> {
        self.u.columns(self.prefix, self.u.ncols() - self.prefix).into_owned()
    }

    pub fn future_outputs(&self) -> DMatrix<f64> {
        self.y.columns(self.prefix, self.y.ncols() - self.prefix).into_owned()
    }
}

/// Everything the controller keeps fixed for the whole run.
#[derive(Debug)]
pub struct ControllerSetup {
    pub config: MpcConfig,
    pub data: DataRecord,
    pub constants: SystemConstants,
    pub coeffs: TighteningCoefficients,
    template: AssembledQp,
    tolerances: Tolerances,
}

impl ControllerSetup {
    pub fn new(config: MpcConfig, data: DataRecord, constants: SystemConstants, coeffs: TighteningCoefficients) -> Result<Arc<Self>> {
        let (m, p, n) = (data.inputs(), data.outputs(), config.n);
        let template = assemble(&config, &data, &coeffs, &DMatrix::zeros(m, n), &DMatrix::zeros(p, n))?;
        let tolerances = Tolerances::default();
        Ok(Arc::new(Self { config, data, constants, coeffs, template, tolerances }))
    }

    pub fn layout(&self) -> Layout {
        self.template.layout
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tolerances
    }

    /// The QP for a given initial window.
    pub fn qp_for(&self, u_init: &DMatrix<f64>, y_init: &DMatrix<f64>) -> Result<AssembledQp> {
        let mut qp = self.template.clone();
        qp.set_initial_window(u_init, y_init)?;
        Ok(qp)
    }
}

/// Rolling state of one closed loop.
#[derive(Debug, Clone)]
pub struct ControllerState {
    setup: Arc<ControllerSetup>,
    u_window: DMatrix<f64>,
    y_window: DMatrix<f64>,
    t: usize,
}

impl ControllerState {
    /// `u_window` and `y_window` hold the last `n` applied inputs and
    /// measured outputs, oldest first.
    pub fn new(setup: Arc<ControllerSetup>, u_window: DMatrix<f64>, y_window: DMatrix<f64>) -> Result<Self> {
        let l = setup.layout();
        if u_window.shape() != (l.m, l.n) || y_window.shape() != (l.p, l.n) {
            return Err(Error::dim(format!("window must be {}x{} and {}x{}", l.m, l.n, l.p, l.n)));
        }
        Ok(Self { setup, u_window, y_window, t: 0 })
    }

    pub fn setup(&self) -> &Arc<ControllerSetup> {
        &self.setup
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn u_window(&self) -> &DMatrix<f64> {
        &self.u_window
    }
    pub fn y_window(&self) -> &DMatrix<f64> {
        &self.y_window
    }

    /// Solves the problem for the current window.
    ///
    /// A non-optimal solve is an error: [`Error::Infeasible`] when the
    /// problem is infeasible, [`Error::Solver`] otherwise.
    pub fn solve_step(&self, backend: &dyn Backend) -> Result<MpcSolution> {
        let s = &self.setup;
        let qp = s.qp_for(&self.u_window, &self.y_window)?;
        let report = backend.solve_qp(&qp.qp, &s.tolerances);
        match report.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => {
                return Err(Error::Infeasible(format!(
                    "MPC problem infeasible at t = {} ({})",
                    self.t, report.backend_status
                )))
            }
            other => {
                return Err(Error::Solver(format!(
                    "MPC solve at t = {} ended with {other:?} ({}), primal residual {:.3e}, dual residual {:.3e}",
                    self.t, report.backend_status, report.primal_residual, report.dual_residual
                )))
            }
        }
        Ok(read_solution(&qp, &s.config, &s.coeffs, report, self.t))
    }

    /// Returns `ū*_{[0,n−1]}` and advances time by `n`.
    pub fn n_step_apply(&mut self, solution: &MpcSolution) -> Result<DMatrix<f64>> {
        if !solution.report.is_optimal() {
            return Err(Error::invalid("cannot apply a non-optimal solution"));
        }
        if solution.t != self.t {
            return Err(Error::invalid(format!("solution from t = {} applied at t = {}", solution.t, self.t)));
        }
        let n = self.setup.config.n;
        self.t += n;
        Ok(solution.u.columns(n, n).into_owned())
    }

    /// Advances time by `n` without a solution, for runs that hold the last
    /// input through an infeasible solve.
    pub fn skip_block(&mut self) {
        self.t += self.setup.config.n;
    }

    /// Replaces the window with the inputs just applied and the outputs
    /// measured over the same `n` steps.
    pub fn observe(&mut self, u_applied: &DMatrix<f64>, y_measured: &DMatrix<f64>) -> Result<()> {
        if u_applied.shape() != self.u_window.shape() || y_measured.shape() != self.y_window.shape() {
            return Err(Error::dim("observation does not match the window size"));
        }
        self.u_window.copy_from(u_applied);
        self.y_window.copy_from(y_measured);
        Ok(())
    }
}

fn read_solution(
    qp: &AssembledQp,
    config: &MpcConfig,
    coeffs: &TighteningCoefficients,
    report: SolveReport,
    t: usize,
) -> MpcSolution {
    let l = qp.layout;
    let z = &report.x;
    let w = l.window();
    let u = DMatrix::from_column_slice(l.m, w, &z.as_slice()[l.u()..l.u() + l.m * w]);
    let y = DMatrix::from_column_slice(l.p, w, &z.as_slice()[l.y()..l.y() + l.p * w]);
    let sigma = DMatrix::from_column_slice(l.p, w, &z.as_slice()[l.sigma()..l.sigma() + l.p * w]);
    let alpha = z.rows(l.alpha(), l.cols).into_owned();
    let norms = SolutionNorms {
        u1: u.columns(l.n, l.horizon).iter().map(|v| v.abs()).sum(),
        alpha1: alpha.iter().map(|v| v.abs()).sum(),
        sigma_inf: sigma.amax(),
    };
    let sigma_bound_ok = norms.sigma_inf <= config.eps_bar * (1.0 + norms.alpha1);

    let y_max = config.y_max_or_inf();
    let mut active = Vec::new();
    let mut min_margin = f64::INFINITY;
    if let Some(first) = qp.tightened_rows {
        let lhs = qp.qp.ineq.matrix.mul_vec(z);
        let mut row = first;
        for k in 0..l.horizon - l.n {
            let offset = coeffs.a1[k] * norms.u1 + coeffs.a2[k] * norms.alpha1 + coeffs.a3[k] * norms.sigma_inf + coeffs.a4[k];
            for i in 0..l.p {
                min_margin = min_margin.min(y_max - (y[(i, k + l.n)].abs() + offset));
                for sign in [1i8, -1] {
                    if qp.qp.ineq.rhs[row] - lhs[row] <= ACTIVE_ROW_TOL {
                        active.push(ActiveRow { k, output: i, sign });
                    }
                    row += 1;
                }
            }
        }
    }
    MpcSolution {
        t,
        prefix: l.n,
        t_u: z[l.t_u()],
        t_alpha: z[l.t_alpha()],
        t_sigma: z[l.t_sigma()],
        objective: report.objective + qp.constant,
        u,
        y,
        alpha,
        sigma,
        norms,
        sigma_bound_ok,
        active_tightened_rows: active,
        min_tightened_margin: min_margin,
        report,
    }
}

/// Open-loop prediction error at one step of the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionError {
    pub k: usize,
    /// `‖ŷ_{t+k} − ȳ*_k‖_∞`.
    pub error: f64,
    /// `ε̄ρ_{n+k} + ε̄(1+ρ_{n+k})‖α*‖₁ + (1+ρ_{n+k})‖σ*‖_∞`.
    pub bound: f64,
    /// Share of the bound attributable to the solver's equality residual,
    /// `(1+ρ_{n+k})·r_eq`; an error within `bound + allowance` is
    /// consistent with the bound.
    pub allowance: f64,
}

impl PredictionError {
    pub fn holds(&self) -> bool {
        self.error <= self.bound + self.allowance
    }

    pub fn ratio(&self) -> f64 {
        if self.bound > 0.0 {
            self.error / self.bound
        } else if self.error == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Applies `ū*_{[0,L−1]}` open loop to the true plant from `x_t` and
/// compares with the predicted outputs. Diagnostic only: the controller
/// itself never sees the plant.
pub fn prediction_error_diagnostic(
    solution: &MpcSolution,
    plant: &StateSpaceModel,
    x_t: &DVector<f64>,
    constants: &SystemConstants,
    eps_bar: f64,
) -> Result<Vec<PredictionError>> {
    let u = solution.future_inputs();
    let y_pred = solution.future_outputs();
    let sim = simulate(plant, x_t, &u, None)?;
    let n = constants.n;
    let residual = solution.report.primal_residual;
    Ok((0..u.ncols())
        .map(|k| {
            let rho = constants.rho(n + k);
            let error = (sim.trajectory.y().column(k) - y_pred.column(k)).amax();
            let bound = eps_bar * rho + eps_bar * (1.0 + rho) * solution.norms.alpha1 + (1.0 + rho) * solution.norms.sigma_inf;
            PredictionError { k, error, bound, allowance: (1.0 + rho) * residual }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{compute_cpe, compute_xi_max, ProvenanceTags};
    use crate::hankel::tests::record_for;
    use crate::lti::{rho_oracle, PlantSpec};
    use crate::solver::ClarabelBackend;
    use crate::tightening::compute_coefficients;

    fn plant() -> StateSpaceModel {
        PlantSpec::example_plant().to_model().unwrap()
    }

    fn quadratic_config(eps: f64, y_max: Option<f64>) -> MpcConfig {
        MpcConfig {
            horizon: 8,
            n: 3,
            eps_bar: eps,
            lambda_alpha: if eps > 0.0 { 1.0 / eps } else { 0.0 },
            lambda_sigma: 100.0,
            stage_cost: StageCost::Quadratic { q: vec![vec![1.0]], r: vec![vec![0.1]] },
            input_box: InputBox::symmetric(10.0, 1),
            y_max,
            u_s: vec![0.0],
            y_s: vec![0.0],
        }
    }

    /// Oracle constants for the example plant with the given data.
    fn setup(config: MpcConfig, samples: usize, seed: u64) -> Arc<ControllerSetup> {
        let m = plant();
        let data = record_for(&m, samples, 10.0, config.eps_bar, seed);
        let rho = (3..3 + config.horizon).map(|k| rho_oracle(&m, k)).collect();
        let gamma = crate::lti::gamma_oracle(&m, &ClarabelBackend::default()).unwrap();
        let c_pe = compute_cpe(&data, View::Noisy, config.horizon).unwrap();
        let xi = compute_xi_max(&[-10.0], &[10.0], config.y_max.unwrap_or(10.0), 1, 3).unwrap();
        let constants = SystemConstants::new(3, config.horizon, gamma, rho, c_pe, xi, ProvenanceTags::MODEL_ORACLE).unwrap();
        let coeffs = compute_coefficients(&constants, config.eps_bar, config.horizon, 3).unwrap();
        ControllerSetup::new(config, data, constants, coeffs).unwrap()
    }

    #[test]
    fn layout_sizes() {
        let l = Layout { m: 1, p: 1, n: 3, horizon: 10, cols: 988 };
        assert_eq!(l.nvars(), 3 * 988 + 13 * 3 + 10 + 3);
        assert_eq!(l.u_at(-3), l.u());
        assert_eq!(l.y_at(9), l.y() + 12);
    }

    #[test]
    fn origin_is_optimal_from_rest() {
        let s = setup(quadratic_config(0.0, Some(10.0)), 200, 1);
        let state = ControllerState::new(s, DMatrix::zeros(1, 3), DMatrix::zeros(1, 3)).unwrap();
        let sol = state.solve_step(&ClarabelBackend::default()).unwrap();
        assert!(sol.u.amax() < 1e-7 && sol.y.amax() < 1e-7, "{} {}", sol.u.amax(), sol.y.amax());
        assert!(sol.objective.abs() < 1e-10, "{}", sol.objective);
    }

    #[test]
    fn nominal_slack_vanishes_with_its_weight() {
        let m = plant();
        // Window from an actual trajectory of the plant.
        let u_hist = DMatrix::from_row_slice(1, 3, &[2.0, -1.0, 3.0]);
        let sim = simulate(&m, &DVector::zeros(3), &u_hist, None).unwrap();
        let backend = ClarabelBackend::default();
        let mut sigmas = Vec::new();
        for lambda in [1e2, 1e4, 1e6] {
            let mut cfg = quadratic_config(0.0, None);
            cfg.lambda_sigma = lambda;
            let s = setup(cfg, 200, 2);
            let state = ControllerState::new(s.clone(), u_hist.clone(), sim.trajectory.y().clone()).unwrap();
            let sol = state.solve_step(&backend).unwrap();
            assert!(sol.active_tightened_rows.is_empty());
            assert_eq!(sol.min_tightened_margin, f64::INFINITY);
            let diag = prediction_error_diagnostic(&sol, &m, &sim.final_state, &s.constants, 0.0).unwrap();
            for d in &diag {
                assert!(d.holds(), "lambda={lambda} k={}: {} > {} + {}", d.k, d.error, d.bound, d.allowance);
            }
            sigmas.push(sol.norms.sigma_inf);
        }
        // Stationarity in σ gives 2λ_σ σ* = multiplier of the data equality,
        // which settles as λ_σ grows: λ_σ σ* converges.
        assert!(sigmas.windows(2).all(|w| w[1] < w[0]), "{sigmas:?}");
        let scaled: Vec<f64> = sigmas.iter().zip([1e2, 1e4, 1e6]).map(|(s, l)| s * l).collect();
        assert!((scaled[2] - scaled[1]).abs() <= 0.25 * scaled[2], "{scaled:?}");
        assert!(sigmas[2] < 1e-4, "{sigmas:?}");
    }

    #[test]
    fn solution_satisfies_constraints() {
        let mut cfg = quadratic_config(1e-4, Some(10.0));
        cfg.u_s = vec![5.0];
        cfg.y_s = vec![4.6];
        let s = setup(cfg.clone(), 400, 3);
        let state = ControllerState::new(s.clone(), DMatrix::zeros(1, 3), DMatrix::from_element(1, 3, 1e-5)).unwrap();
        let sol = state.solve_step(&ClarabelBackend::default()).unwrap();
        let tol = sol.report.tolerances.feas;
        assert!((sol.u_at(-2)[0] - state.u_window()[(0, 1)]).abs() <= tol);
        for k in 5..8 {
            assert!((sol.u_at(k)[0] - 5.0).abs() <= tol);
            assert!((sol.y_at(k)[0] - 4.6).abs() <= tol);
        }
        assert!(sol.t_u >= sol.norms.u1 - 10.0 * tol);
        assert!(sol.t_alpha >= sol.norms.alpha1 - 10.0 * tol);
        assert!(sol.t_sigma >= sol.norms.sigma_inf - tol);
        assert!(sol.min_tightened_margin >= -10.0 * tol, "{}", sol.min_tightened_margin);
        assert!(sol.future_inputs().iter().all(|v| v.abs() <= 10.0 + tol));
        assert_eq!(sol.sigma_bound_ok, sol.norms.sigma_inf <= 1e-4 * (1.0 + sol.norms.alpha1));
    }

    #[test]
    fn repeated_solves_agree() {
        let s = setup(quadratic_config(1e-4, Some(10.0)), 300, 4);
        let state = ControllerState::new(s, DMatrix::from_element(1, 3, 1.0), DMatrix::from_element(1, 3, 0.5)).unwrap();
        let backend = ClarabelBackend::default();
        let a = state.solve_step(&backend).unwrap();
        let b = state.solve_step(&backend).unwrap();
        assert!((a.objective - b.objective).abs() <= 1e-9);
    }

    #[test]
    fn cost_scaling_scales_objective() {
        let base = quadratic_config(1e-4, None);
        let mut scaled = base.clone();
        let g = 3.0;
        scaled.stage_cost = StageCost::Quadratic { q: vec![vec![g]], r: vec![vec![0.1 * g]] };
        scaled.lambda_alpha *= g;
        scaled.lambda_sigma *= g;
        let window = (DMatrix::from_element(1, 3, 2.0), DMatrix::from_element(1, 3, 1.5));
        let backend = ClarabelBackend::default();
        let a = ControllerState::new(setup(base, 300, 5), window.0.clone(), window.1.clone())
            .unwrap()
            .solve_step(&backend)
            .unwrap();
        let b = ControllerState::new(setup(scaled, 300, 5), window.0, window.1).unwrap().solve_step(&backend).unwrap();
        assert!((b.objective - g * a.objective).abs() <= 1e-6 * b.objective.abs().max(1.0));
        let du = (&a.u - &b.u).amax();
        assert!(du <= 1e-5, "{du}");
    }

    #[test]
    fn n_step_apply_emits_n_inputs_and_advances_time() {
        let s = setup(quadratic_config(1e-4, Some(10.0)), 300, 6);
        let mut state = ControllerState::new(s, DMatrix::from_element(1, 3, 1.0), DMatrix::from_element(1, 3, 0.9)).unwrap();
        let backend = ClarabelBackend::default();
        for round in 1..=2 {
            let sol = state.solve_step(&backend).unwrap();
            let u = state.n_step_apply(&sol).unwrap();
            assert_eq!(u.shape(), (1, 3));
            assert!(u.iter().all(|v| v.abs() <= 10.0 + 1e-6));
            assert_eq!(state.t(), 3 * round);
            assert!(state.n_step_apply(&sol).is_err());
            state.observe(&u, &DMatrix::from_element(1, 3, 0.5)).unwrap();
        }
    }

    #[test]
    fn unattainable_tightening_rejected_at_assembly() {
        let m = plant();
        let cfg = quadratic_config(1.0, Some(10.0));
        let data = record_for(&m, 200, 10.0, 1.0, 7);
        let rho = (3..11).map(|k| rho_oracle(&m, k)).collect();
        let constants = SystemConstants::new(3, 8, 1.0, rho, 1.0, 60.0, ProvenanceTags::MODEL_ORACLE).unwrap();
        let coeffs = compute_coefficients(&constants, 1.0, 8, 3).unwrap();
        let err = assemble(&cfg, &data, &coeffs, &DMatrix::zeros(1, 3), &DMatrix::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
    }

    #[test]
    fn config_validation() {
        let ok = quadratic_config(1e-4, Some(10.0));
        assert!(ok.validate(1, 1).is_ok());
        let mut bad = ok.clone();
        bad.horizon = 5;
        assert!(bad.validate(1, 1).is_err());
        let mut bad = ok.clone();
        bad.y_s = vec![10.0];
        assert!(bad.validate(1, 1).is_err());
        let mut bad = ok.clone();
        bad.stage_cost = StageCost::Quadratic { q: vec![vec![-1.0]], r: vec![vec![1.0]] };
        assert!(bad.validate(1, 1).is_err());
        let mut bad = ok.clone();
        bad.lambda_sigma = 0.0;
        assert!(bad.validate(1, 1).is_err());
        let mut bad = ok;
        bad.y_max = Some(0.0);
        assert!(bad.validate(1, 1).is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let mut cfg = quadratic_config(1e-4, None);
        cfg.stage_cost = StageCost::Linear { u: vec![0.0], y: vec![-1.0] };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"kind\":\"linear\""));
        assert!(json.contains("\"y_max\":null"));
        assert_eq!(serde_json::from_str::<MpcConfig>(&json).unwrap(), cfg);
    }
}
