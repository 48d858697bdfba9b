use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DVector;

use super::{
    phase_one, Backend, Duals, LinearProgram, ProblemRef, QuadraticProgram, SolveReport, SolveStatus,
    SparseMatrix, Tolerances,
};

/// Interior-point backend built on the Clarabel conic solver.
#[derive(Debug, Clone)]
pub struct ClarabelBackend {
    /// Internal gap/feasibility tolerance handed to the solver. The
    /// contract tolerances are then checked on recomputed residuals.
    pub inner_tol: f64,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self { inner_tol: 1e-11 }
    }
}

fn to_csc(m: &SparseMatrix) -> CscMatrix<f64> {
    let (colptr, rowval, nzval) = m.csc_parts();
    CscMatrix::new(m.nrows(), m.ncols(), colptr.to_vec(), rowval.to_vec(), nzval.to_vec())
}

struct Stacked {
    a: SparseMatrix,
    b: Vec<f64>,
    lower_rows: Vec<usize>,
    upper_rows: Vec<usize>,
}

/// `[A_eq; A_in; −I (finite lower); I (finite upper)]`.
fn stack(p: ProblemRef<'_>) -> Stacked {
    let n = p.nvars();
    let mut triplets: Vec<(usize, usize, f64)> = p.eq.matrix.iter().collect();
    let me = p.eq.len();
    triplets.extend(p.ineq.matrix.iter().map(|(r, c, v)| (r + me, c, v)));
    let mut b: Vec<f64> = p.eq.rhs.iter().chain(p.ineq.rhs.iter()).copied().collect();
    let mut lower_rows = Vec::new();
    let mut upper_rows = Vec::new();
    if let Some(bounds) = p.bounds {
        for (i, bd) in bounds.iter().enumerate() {
            if bd.lower.is_finite() {
                lower_rows.push(i);
                triplets.push((b.len(), i, -1.0));
                b.push(-bd.lower);
            }
        }
        for (i, bd) in bounds.iter().enumerate() {
            if bd.upper.is_finite() {
                upper_rows.push(i);
                triplets.push((b.len(), i, 1.0));
                b.push(bd.upper);
            }
        }
    }
    Stacked { a: SparseMatrix::from_triplets(b.len(), n, triplets), b, lower_rows, upper_rows }
}

impl ClarabelBackend {
    fn settings(&self, tol: &Tolerances) -> DefaultSettings<f64> {
        let inner = self.inner_tol.min(tol.feas * 1e-2).max(1e-13);
        DefaultSettingsBuilder::default()
            .verbose(std::env::var_os("DDMPC_SOLVER_VERBOSE").is_some())
            .max_iter(tol.max_iter)
            .tol_gap_abs(inner)
            .tol_gap_rel(inner)
            .tol_feas(inner)
            .tol_ktratio(1e-8)
            .reduced_tol_gap_abs(tol.opt * 1e-2)
            .reduced_tol_gap_rel(tol.opt * 1e-2)
            .reduced_tol_feas(tol.feas * 1e-2)
            .presolve_enable(false)
            .max_threads(1)
            .build()
            .expect("static solver settings are valid")
    }

    fn failure(p: ProblemRef<'_>, tol: &Tolerances, msg: String, start: Instant) -> SolveReport {
        SolveReport {
            status: SolveStatus::NumericalFailure,
            x: DVector::zeros(p.nvars()),
            objective: f64::NAN,
            duals: Duals::zeros(p.nvars(), p.eq.len(), p.ineq.len()),
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            duality_gap: f64::INFINITY,
            iterations: 0,
            wall_time: start.elapsed(),
            tolerances: *tol,
            backend_status: msg,
            phase_one: false,
        }
    }

    fn solve(&self, p: ProblemRef<'_>, tol: &Tolerances, allow_phase_one: bool) -> SolveReport {
        let start = Instant::now();
        if let Err(e) = p.validate() {
            return Self::failure(p, tol, e.to_string(), start);
        }
        let n = p.nvars();
        let stacked = stack(p);
        let me = p.eq.len();
        let mi = stacked.b.len() - me;

        let hess = match p.hessian {
            Some(h) => to_csc(&h.upper_triangle()),
            None => CscMatrix::zeros((n, n)),
        };
        let q: Vec<f64> = p.linear.iter().copied().collect();
        let a = to_csc(&stacked.a);
        let mut cones = Vec::new();
        if me > 0 {
            cones.push(SupportedConeT::ZeroConeT(me));
        }
        if mi > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(mi));
        }

        let mut solver = match DefaultSolver::new(&hess, &q, &a, &stacked.b, &cones, self.settings(tol)) {
            Ok(s) => s,
            Err(e) => return Self::failure(p, tol, format!("setup: {e}"), start),
        };
        solver.solve();
        let sol = &solver.solution;

        let x = DVector::from_column_slice(&sol.x);
        let z = &sol.z;
        let mut duals = Duals::zeros(n, me, p.ineq.len());
        duals.eq.copy_from_slice(&z[..me]);
        duals.ineq.copy_from_slice(&z[me..me + p.ineq.len()]);
        let mut row = me + p.ineq.len();
        for &i in &stacked.lower_rows {
            duals.lower[i] = z[row];
            row += 1;
        }
        for &i in &stacked.upper_rows {
            duals.upper[i] = z[row];
            row += 1;
        }

        let backend_status = format!("{:?}", sol.status);
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::NumericalFailure,
        };

        let mut report = SolveReport {
            status,
            objective: p.objective(&x),
            primal_residual: p.primal_residual(&x),
            dual_residual: p.stationarity_residual(&x, &duals),
            duality_gap: (sol.obj_val - sol.obj_val_dual).abs(),
            x,
            duals,
            iterations: sol.iterations,
            wall_time: start.elapsed(),
            tolerances: *tol,
            backend_status,
            phase_one: false,
        };

        if report.status == SolveStatus::Optimal
            && (report.primal_residual > tol.feas || report.dual_residual > tol.opt)
        {
            report.status = SolveStatus::NumericalFailure;
        }
        if report.status == SolveStatus::NumericalFailure && allow_phase_one {
            // No certificate: decide feasibility separately.
            let p1 = phase_one(p);
            let r1 = self.solve(p1.as_ref(), tol, false);
            if r1.status == SolveStatus::Optimal && r1.objective > 10.0 * tol.feas {
                report.status = SolveStatus::Infeasible;
                report.phase_one = true;
            }
        }
        report.wall_time = start.elapsed();
        report
    }
}

impl Backend for ClarabelBackend {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve_qp(&self, problem: &QuadraticProgram, tol: &Tolerances) -> SolveReport {
        let start = Instant::now();
        if let Err(e) = problem.validate() {
            return Self::failure(problem.as_ref(), tol, e.to_string(), start);
        }
        self.solve(problem.as_ref(), tol, true)
    }

    fn solve_lp(&self, problem: &LinearProgram, tol: &Tolerances) -> SolveReport {
        self.solve(problem.as_ref(), tol, true)
    }
}
