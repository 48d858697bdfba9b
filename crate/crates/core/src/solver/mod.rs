//! Linear and convex quadratic programming contracts.
//!
//! Problems are stated in a backend-neutral form
//!
//! ```text
//! minimise   ½ zᵀ H z + fᵀ z
//! subject to A_eq z = b_eq
//!            A_in z ≤ b_in
//!            lower ≤ z ≤ upper
//! ```
//!
//! and every [`SolveReport`] carries residuals recomputed from the problem
//! data, not copied from the backend, so callers can trust `Optimal`.

mod clarabel_backend;
pub mod linalg;
mod sparse;

use std::fmt::Write as _;
use std::time::Duration;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use clarabel_backend::ClarabelBackend;
pub use linalg::{induced_inf_norm, induced_one_norm, pseudoinverse};
pub use sparse::SparseMatrix;

use crate::error::{Error, Result};

/// Box bound on one variable. Infinite sides are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub const FREE: Bound = Bound { lower: f64::NEG_INFINITY, upper: f64::INFINITY };
    pub const NONNEGATIVE: Bound = Bound { lower: 0.0, upper: f64::INFINITY };

    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn fixed(value: f64) -> Self {
        Self { lower: value, upper: value }
    }
}

/// `matrix · z (= or ≤) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraints {
    pub matrix: SparseMatrix,
    pub rhs: DVector<f64>,
}

impl Constraints {
    pub fn new(matrix: SparseMatrix, rhs: DVector<f64>) -> Self {
        Self { matrix, rhs }
    }

    pub fn empty(nvars: usize) -> Self {
        Self { matrix: SparseMatrix::zeros(0, nvars), rhs: DVector::zeros(0) }
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub cost: DVector<f64>,
    pub eq: Constraints,
    pub ineq: Constraints,
    pub bounds: Option<Vec<Bound>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    /// Full symmetric PSD matrix (both triangles stored).
    pub hessian: SparseMatrix,
    pub linear: DVector<f64>,
    pub eq: Constraints,
    pub ineq: Constraints,
    pub bounds: Option<Vec<Bound>>,
}

/// Borrowed view shared by LPs and QPs.
#[derive(Clone, Copy)]
pub(crate) struct ProblemRef<'a> {
    pub hessian: Option<&'a SparseMatrix>,
    pub linear: &'a DVector<f64>,
    pub eq: &'a Constraints,
    pub ineq: &'a Constraints,
    pub bounds: Option<&'a [Bound]>,
}

impl LinearProgram {
    pub fn new(cost: DVector<f64>) -> Self {
        let n = cost.len();
        Self { cost, eq: Constraints::empty(n), ineq: Constraints::empty(n), bounds: None }
    }

    pub fn nvars(&self) -> usize {
        self.cost.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.as_ref().validate()
    }

    pub(crate) fn as_ref(&self) -> ProblemRef<'_> {
        ProblemRef {
            hessian: None,
            linear: &self.cost,
            eq: &self.eq,
            ineq: &self.ineq,
            bounds: self.bounds.as_deref(),
        }
    }

    pub fn debug_text(&self) -> String {
        self.as_ref().debug_text()
    }
}

impl QuadraticProgram {
    pub fn new(hessian: SparseMatrix, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self { hessian, linear, eq: Constraints::empty(n), ineq: Constraints::empty(n), bounds: None }
    }

    pub fn nvars(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.as_ref().validate()?;
        let asym = self.hessian.asymmetry();
        if asym > 1e-12 {
            return Err(Error::invalid(format!("hessian not symmetric (max |H - Hᵀ| = {asym:e})")));
        }
        Ok(())
    }

    pub(crate) fn as_ref(&self) -> ProblemRef<'_> {
        ProblemRef {
            hessian: Some(&self.hessian),
            linear: &self.linear,
            eq: &self.eq,
            ineq: &self.ineq,
            bounds: self.bounds.as_deref(),
        }
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        self.as_ref().objective(z)
    }

    pub fn debug_text(&self) -> String {
        self.as_ref().debug_text()
    }
}

impl ProblemRef<'_> {
    pub fn nvars(&self) -> usize {
        self.linear.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.nvars();
        if let Some(h) = self.hessian {
            if h.nrows() != n || h.ncols() != n {
                return Err(Error::dim(format!("hessian is {}x{}, expected {n}x{n}", h.nrows(), h.ncols())));
            }
        }
        for (name, c) in [("equality", self.eq), ("inequality", self.ineq)] {
            if c.matrix.ncols() != n || c.matrix.nrows() != c.rhs.len() {
                return Err(Error::dim(format!(
                    "{name} block is {}x{} with rhs {}, expected {} columns",
                    c.matrix.nrows(),
                    c.matrix.ncols(),
                    c.rhs.len(),
                    n
                )));
            }
        }
        if let Some(b) = self.bounds {
            if b.len() != n {
                return Err(Error::dim(format!("{} bounds for {n} variables", b.len())));
            }
            if let Some(i) = b.iter().position(|b| b.lower.is_nan() || b.upper.is_nan()) {
                return Err(Error::invalid(format!("bound {i} is NaN")));
            }
        }
        let finite = self.linear.iter().all(|v| v.is_finite())
            && self.eq.rhs.iter().all(|v| v.is_finite())
            && self.ineq.rhs.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite problem data"));
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let lin = self.linear.dot(z);
        match self.hessian {
            Some(h) => 0.5 * z.dot(&h.mul_vec(z)) + lin,
            None => lin,
        }
    }

    /// Max violation over equalities, inequalities and bounds.
    pub fn primal_residual(&self, z: &DVector<f64>) -> f64 {
        let eq = (self.eq.matrix.mul_vec(z) - &self.eq.rhs).amax();
        let ineq = (self.ineq.matrix.mul_vec(z) - &self.ineq.rhs)
            .iter()
            .fold(0.0_f64, |m, &v| m.max(v));
        let bounds = self.bounds.map_or(0.0, |b| {
            b.iter()
                .zip(z.iter())
                .fold(0.0_f64, |m, (b, &v)| m.max(b.lower - v).max(v - b.upper))
        });
        eq.max(ineq).max(bounds)
    }

    /// `‖H z + f + A_eqᵀ y + A_inᵀ λ − μ_lo + μ_up‖_∞`.
    pub fn stationarity_residual(&self, z: &DVector<f64>, duals: &Duals) -> f64 {
        let mut g = self.linear.clone();
        if let Some(h) = self.hessian {
            g += h.mul_vec(z);
        }
        g += self.eq.matrix.tr_mul_vec(&duals.eq);
        g += self.ineq.matrix.tr_mul_vec(&duals.ineq);
        g -= &duals.lower;
        g += &duals.upper;
        g.amax()
    }

    fn debug_text(&self) -> String {
        let mut s = String::new();
        let n = self.nvars();
        let _ = writeln!(s, "# variables {n}");
        let _ = writeln!(s, "# equalities {}", self.eq.len());
        let _ = writeln!(s, "# inequalities {}", self.ineq.len());
        if let Some(h) = self.hessian {
            let _ = writeln!(s, "hessian {}", h.nnz());
            for (r, c, v) in h.iter() {
                let _ = writeln!(s, "{r} {c} {v:e}");
            }
        }
        let _ = writeln!(s, "linear");
        for v in self.linear.iter() {
            let _ = writeln!(s, "{v:e}");
        }
        for (name, c) in [("eq", self.eq), ("ineq", self.ineq)] {
            let _ = writeln!(s, "{name} {} {}", c.len(), c.matrix.nnz());
            for (r, col, v) in c.matrix.iter() {
                let _ = writeln!(s, "{r} {col} {v:e}");
            }
            let _ = writeln!(s, "{name}_rhs");
            for v in c.rhs.iter() {
                let _ = writeln!(s, "{v:e}");
            }
        }
        if let Some(b) = self.bounds {
            let _ = writeln!(s, "bounds");
            for b in b {
                let _ = writeln!(s, "{:e} {:e}", b.lower, b.upper);
            }
        }
        s
    }
}

/// Lagrange multipliers, split by constraint block.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    /// Multipliers of the lower bounds (zero where the bound is infinite).
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Duals {
    pub fn zeros(nvars: usize, neq: usize, nineq: usize) -> Self {
        Self {
            eq: DVector::zeros(neq),
            ineq: DVector::zeros(nineq),
            lower: DVector::zeros(nvars),
            upper: DVector::zeros(nvars),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Primal feasibility, absolute, ∞-norm.
    pub feas: f64,
    /// Stationarity of the Lagrangian, absolute, ∞-norm.
    pub opt: f64,
    pub max_iter: u32,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { feas: 1e-8, opt: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    pub duals: Duals,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// `|primal objective − dual objective|` as reported by the backend.
    pub duality_gap: f64,
    pub iterations: u32,
    pub wall_time: Duration,
    pub tolerances: Tolerances,
    /// Raw backend status, for logs.
    pub backend_status: String,
    /// Set when infeasibility was established by the phase-1 fallback
    /// rather than a backend certificate.
    pub phase_one: bool,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// A convex optimisation backend.
pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    fn solve_qp(&self, problem: &QuadraticProgram, tol: &Tolerances) -> SolveReport;

    fn solve_lp(&self, problem: &LinearProgram, tol: &Tolerances) -> SolveReport;
}

/// Solves an LP with the default backend.
pub fn solve_lp(problem: &LinearProgram, tol: &Tolerances) -> SolveReport {
    ClarabelBackend::default().solve_lp(problem, tol)
}

/// Solves a convex QP with the default backend.
pub fn solve_qp(problem: &QuadraticProgram, tol: &Tolerances) -> SolveReport {
    ClarabelBackend::default().solve_qp(problem, tol)
}

/// Builds the phase-1 problem for `p`: minimise the total constraint
/// violation. Variables are `[z, e⁺, e⁻, w, l, u]` where `e±` relax the
/// equalities, `w` the inequalities and `l`/`u` the finite bounds.
pub(crate) fn phase_one(p: ProblemRef<'_>) -> LinearProgram {
    let n = p.nvars();
    let (me, mi) = (p.eq.len(), p.ineq.len());
    let bounds = p.bounds.unwrap_or(&[]);
    let lower: Vec<usize> = (0..bounds.len()).filter(|&i| bounds[i].lower.is_finite()).collect();
    let upper: Vec<usize> = (0..bounds.len()).filter(|&i| bounds[i].upper.is_finite()).collect();
    let nl = lower.len();
    let nu = upper.len();
    let total = n + 2 * me + mi + nl + nu;

    let mut cost = DVector::zeros(total);
    cost.rows_mut(n, total - n).fill(1.0);

    let mut eq_t: Vec<(usize, usize, f64)> = p.eq.matrix.iter().collect();
    for i in 0..me {
        eq_t.push((i, n + i, 1.0));
        eq_t.push((i, n + me + i, -1.0));
    }
    let mut in_t: Vec<(usize, usize, f64)> = p.ineq.matrix.iter().collect();
    for i in 0..mi {
        in_t.push((i, n + 2 * me + i, -1.0));
    }
    let mut in_rhs: Vec<f64> = p.ineq.rhs.iter().copied().collect();
    let base = n + 2 * me + mi;
    for (j, &i) in lower.iter().enumerate() {
        let row = in_rhs.len();
        in_t.push((row, i, -1.0));
        in_t.push((row, base + j, -1.0));
        in_rhs.push(-bounds[i].lower);
    }
    for (j, &i) in upper.iter().enumerate() {
        let row = in_rhs.len();
        in_t.push((row, i, 1.0));
        in_t.push((row, base + nl + j, -1.0));
        in_rhs.push(bounds[i].upper);
    }

    let mut var_bounds = vec![Bound::FREE; n];
    var_bounds.extend(std::iter::repeat_n(Bound::NONNEGATIVE, total - n));

    LinearProgram {
        cost,
        eq: Constraints::new(SparseMatrix::from_triplets(me, total, eq_t), p.eq.rhs.clone()),
        ineq: Constraints::new(
            SparseMatrix::from_triplets(in_rhs.len(), total, in_t),
            DVector::from_vec(in_rhs),
        ),
        bounds: Some(var_bounds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn dense(rows: usize, cols: usize, v: &[f64]) -> SparseMatrix {
        SparseMatrix::from_dense(&DMatrix::from_row_slice(rows, cols, v))
    }

    #[test]
    fn lp_with_upper_and_lower_bound() {
        // min -z  s.t. z <= 1, z >= 0
        let mut lp = LinearProgram::new(DVector::from_vec(vec![-1.0]));
        lp.ineq = Constraints::new(dense(2, 1, &[1.0, -1.0]), DVector::from_vec(vec![1.0, 0.0]));
        let r = solve_lp(&lp, &Tolerances::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x[0] - 1.0).abs() < 1e-8);
        assert!((r.objective + 1.0).abs() < 1e-8);
    }

    #[test]
    fn infeasible_pair() {
        // z <= 0 and z >= 1
        let mut lp = LinearProgram::new(DVector::from_vec(vec![0.0]));
        lp.ineq = Constraints::new(dense(2, 1, &[1.0, -1.0]), DVector::from_vec(vec![0.0, -1.0]));
        let r = solve_lp(&lp, &Tolerances::default());
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unbounded_lp() {
        let mut lp = LinearProgram::new(DVector::from_vec(vec![-1.0]));
        lp.bounds = Some(vec![Bound::NONNEGATIVE]);
        let r = solve_lp(&lp, &Tolerances::default());
        assert_eq!(r.status, SolveStatus::Unbounded);
    }

    #[test]
    fn unconstrained_qp() {
        // (z-3)^2 = z^2 - 6z + 9
        let qp = QuadraticProgram::new(dense(1, 1, &[2.0]), DVector::from_vec(vec![-6.0]));
        let r = solve_qp(&qp, &Tolerances::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn qp_with_active_bound() {
        // min z^2 s.t. z >= 1
        let mut qp = QuadraticProgram::new(dense(1, 1, &[2.0]), DVector::from_vec(vec![0.0]));
        qp.bounds = Some(vec![Bound::new(1.0, f64::INFINITY)]);
        let r = solve_qp(&qp, &Tolerances::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x[0] - 1.0).abs() < 1e-8);
        assert!((r.duals.lower[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn asymmetric_hessian_rejected() {
        let qp = QuadraticProgram::new(dense(2, 2, &[1.0, 1.0, 0.0, 1.0]), DVector::zeros(2));
        assert!(qp.validate().is_err());
        let r = solve_qp(&qp, &Tolerances::default());
        assert_eq!(r.status, SolveStatus::NumericalFailure);
    }

    #[test]
    fn dimension_mismatch_is_reported_not_panicking() {
        let mut lp = LinearProgram::new(DVector::from_vec(vec![1.0, 2.0]));
        lp.eq = Constraints::new(dense(1, 3, &[1.0, 1.0, 1.0]), DVector::from_vec(vec![1.0]));
        assert!(lp.validate().is_err());
        assert_eq!(solve_lp(&lp, &Tolerances::default()).status, SolveStatus::NumericalFailure);
    }

    #[test]
    fn phase_one_of_feasible_problem_has_zero_optimum() {
        let mut lp = LinearProgram::new(DVector::from_vec(vec![1.0, 1.0]));
        lp.eq = Constraints::new(dense(1, 2, &[1.0, 1.0]), DVector::from_vec(vec![2.0]));
        lp.bounds = Some(vec![Bound::new(0.0, 1.5); 2]);
        let p1 = phase_one(lp.as_ref());
        let r = solve_lp(&p1, &Tolerances::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.objective.abs() < 1e-8);
    }

    #[test]
    fn debug_text_lists_blocks() {
        let mut lp = LinearProgram::new(DVector::from_vec(vec![1.0]));
        lp.bounds = Some(vec![Bound::NONNEGATIVE]);
        let s = lp.debug_text();
        assert!(s.contains("# variables 1"));
        assert!(s.contains("bounds"));
    }
}
