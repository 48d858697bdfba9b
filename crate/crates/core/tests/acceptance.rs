//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary (`harness = false`) so the lines
//! come out in order and uncaptured.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ddmpc::constants::{estimate_gamma, estimate_rho_table, ProvenanceTags, SystemConstants};
use ddmpc::hankel::{DataRecord, TrajectorySpace, View};
use ddmpc::harness::{generate_data, prepare, run_seeds, ExperimentConfig};
use ddmpc::lti::{gamma_oracle, rho_oracle, simulate, PlantSpec, StateSpaceModel, Trajectory};
use ddmpc::mpc::{InputBox, StageCost};
use ddmpc::nalgebra::{DMatrix, DVector};
use ddmpc::solver::{
    Backend, Bound, ClarabelBackend, Constraints, LinearProgram, QuadraticProgram, SparseMatrix, Tolerances,
};
use ddmpc::tightening::compute_coefficients;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_SAMPLES: usize = 1000;
const N: usize = 3;
const HORIZON: usize = 10;
const DATA_SEED: u64 = 0;

const MEMBER_RESIDUAL_MAX: f64 = 1e-8;
const NON_MEMBER_RESIDUAL_MIN: f64 = 1e-3;
const CONSTANT_TOL: f64 = 1e-6;
const Y_MAX: f64 = 10.0;
const SATURATION_TOL: f64 = 1e-6;
const FINAL_MEAN_BAND: (f64, f64) = (6.0, 8.0);
const NOMINAL_SIGMA_MAX: f64 = 1e-8;
const NOMINAL_COST_MAX: f64 = 1e-10;
const OBJECTIVE_TOL: f64 = 1e-7;
const RESIDUAL_TOL: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

fn plant() -> StateSpaceModel {
    PlantSpec::example_plant().to_model().expect("example plant")
}

fn clean_data(plant: &StateSpaceModel, order: usize) -> DataRecord {
    generate_data(plant, N_SAMPLES, N, &InputBox::symmetric(10.0, 1), DATA_SEED, 0.0, order).expect("clean data")
}

fn membership_roundtrip() -> Outcome {
    let start = Instant::now();
    let m = plant();
    let depth = HORIZON + N;
    let data = clean_data(&m, depth + N);
    let space = TrajectorySpace::new(&data, View::Clean, depth).expect("trajectory space");
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut worst_member = 0.0_f64;
    let mut members = Vec::new();
    for _ in 0..100 {
        let x0 = DVector::from_fn(N, |_, _| rng.random_range(-5.0..=5.0));
        let u = DMatrix::from_fn(1, depth, |_, _| rng.random_range(-10.0..=10.0));
        let sim = simulate(&m, &x0, &u, None).expect("simulate");
        let r = space.membership(&sim.trajectory).expect("membership").residual;
        worst_member = worst_member.max(r);
        members.push(sim.trajectory);
    }

    let mut weakest_outsider = f64::INFINITY;
    for traj in members.iter().take(20) {
        let bump = DMatrix::from_fn(1, depth, |_, _| rng.random_range(-0.1..=0.1));
        let perturbed = Trajectory::new(traj.u().clone(), traj.y() + bump).expect("trajectory");
        let r = space.membership(&perturbed).expect("membership").residual;
        weakest_outsider = weakest_outsider.min(r);
    }

    let elapsed = start.elapsed();
    Outcome {
        pass: worst_member <= MEMBER_RESIDUAL_MAX
            && weakest_outsider >= NON_MEMBER_RESIDUAL_MIN
            && within(Duration::from_secs(30), elapsed),
        detail: format!(
            "max member residual {worst_member:.3e} (<= {MEMBER_RESIDUAL_MAX:e}), min non-member residual \
             {weakest_outsider:.3e} (>= {NON_MEMBER_RESIDUAL_MIN:e}), {:.2} s",
            elapsed.as_secs_f64()
        ),
    }
}

fn constants_match_oracles() -> Outcome {
    let start = Instant::now();
    let m = plant();
    let backend = ClarabelBackend::default();
    let data = clean_data(&m, HORIZON + 2 * N);

    let rho = estimate_rho_table(&data, HORIZON, &backend).expect("rho estimates");
    let rho_dev = rho
        .iter()
        .enumerate()
        .map(|(i, r)| (r - rho_oracle(&m, N + i)).abs())
        .fold(0.0_f64, f64::max);
    let gamma = estimate_gamma(&data, &backend).expect("gamma estimate");
    let gamma_model = gamma_oracle(&m, &backend).expect("gamma oracle");
    let gamma_dev = (gamma - gamma_model).abs();

    let elapsed = start.elapsed();
    Outcome {
        pass: rho.len() == HORIZON
            && rho_dev <= CONSTANT_TOL
            && gamma_dev <= CONSTANT_TOL
            && within(Duration::from_secs(120), elapsed),
        detail: format!(
            "max |rho_k - model| over k = {N}..{} is {rho_dev:.3e}, Gamma = {gamma:.10} vs {gamma_model:.10} \
             (dev {gamma_dev:.3e}), {:.2} s",
            N + HORIZON - 1,
            elapsed.as_secs_f64()
        ),
    }
}

fn tightening_identities() -> Outcome {
    let start = Instant::now();
    let strategy = (
        0.0..50.0_f64,
        prop::collection::vec(0.0..2.0_f64, HORIZON),
        0.0..10.0_f64,
        0.0..100.0_f64,
    );
    let mut runner = TestRunner::new(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() });
    let result = runner.run(&strategy, |(gamma, rho, c_pe, xi_max)| {
        let constants = SystemConstants::new(N, HORIZON, gamma, rho.clone(), c_pe, xi_max, ProvenanceTags::MODEL_ORACLE)
            .expect("constants");
        let coeffs = |eps: f64| compute_coefficients(&constants, eps, HORIZON, N).expect("coefficients");

        let sweep: Vec<_> = [1e-5, 1e-4, 1e-3].into_iter().map(coeffs).collect();
        for (c, eps) in sweep.iter().zip([1e-5, 1e-4, 1e-3]) {
            for k in 0..c.len() {
                prop_assert_eq!(c.a2[k], eps * c.a3[k]);
            }
        }
        for pair in sweep.windows(2) {
            for k in 0..pair[0].len() {
                prop_assert!(pair[1].a1[k] >= pair[0].a1[k]);
                prop_assert!(pair[1].a2[k] >= pair[0].a2[k]);
                prop_assert!(pair[1].a4[k] >= pair[0].a4[k]);
            }
        }

        let nominal = coeffs(0.0);
        for k in 0..nominal.len() {
            prop_assert_eq!(nominal.a1[k], 0.0);
            prop_assert_eq!(nominal.a2[k], 0.0);
            prop_assert_eq!(nominal.a4[k], 0.0);
            if k >= N {
                prop_assert_eq!(nominal.a3[k], 1.0 + rho[k]);
            }
        }
        Ok(())
    });
    let elapsed = start.elapsed();
    let within_budget = within(Duration::from_secs(1), elapsed);
    match result {
        Ok(()) => Outcome {
            pass: within_budget,
            detail: format!("256 random constant sets, {:.3} s", elapsed.as_secs_f64()),
        },
        Err(e) => Outcome { pass: false, detail: format!("{e}") },
    }
}

struct ClosedLoopOutcome {
    reproduction: Outcome,
    prediction_bound: Outcome,
}

fn closed_loop_reproduction() -> ClosedLoopOutcome {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    let backend = ClarabelBackend::default();
    let failed = |msg: String| ClosedLoopOutcome {
        reproduction: Outcome { pass: false, detail: msg.clone() },
        prediction_bound: Outcome { pass: false, detail: msg },
    };
    let pipeline = match prepare(&config, &backend) {
        Ok(p) => p,
        Err(e) => return failed(format!("pipeline setup failed: {e}")),
    };
    let logs = match run_seeds(&pipeline, &config, &config.online_seeds, &backend) {
        Ok(l) => l,
        Err(e) => return failed(format!("closed loop failed: {e}")),
    };
    let elapsed = start.elapsed();

    let max_abs_y = logs
        .iter()
        .flat_map(|l| l.steps.iter().flat_map(|s| s.y.iter()))
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let fewest_saturated = logs
        .iter()
        .map(|l| l.steps.iter().filter(|s| s.u.iter().any(|u| u.abs() >= Y_MAX - SATURATION_TOL)).count())
        .min()
        .unwrap_or(0);
    let means: Vec<f64> = logs
        .iter()
        .map(|l| {
            let tail = &l.steps[l.steps.len() - 60..];
            tail.iter().map(|s| s.y[0]).sum::<f64>() / tail.len() as f64
        })
        .collect();
    let mean_lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let solves: usize = logs.iter().map(|l| l.solves.len()).sum();
    let infeasible: usize = logs.iter().map(|l| l.solves.iter().filter(|s| !s.feasible).count()).sum();
    let complete = logs.iter().all(|l| l.steps.len() == config.steps && l.solves.first().is_some_and(|s| s.feasible));

    let a = max_abs_y <= Y_MAX;
    let b = fewest_saturated >= 1;
    let c = mean_lo >= FINAL_MEAN_BAND.0 && mean_hi <= FINAL_MEAN_BAND.1;
    let d = complete && infeasible == 0;
    let reproduction = Outcome {
        pass: a && b && c && d && within(Duration::from_secs(600), elapsed),
        detail: format!(
            "{} seeds: (a) max |y| = {max_abs_y:.4} [{}] (b) fewest saturated steps {fewest_saturated} [{}] \
             (c) final-60 mean in [{mean_lo:.4}, {mean_hi:.4}] [{}] (d) {infeasible} of {solves} solves infeasible [{}], \
             {:.1} s",
            logs.len(),
            flag(a),
            flag(b),
            flag(c),
            flag(d),
            elapsed.as_secs_f64()
        ),
    };

    let checked: usize = logs.iter().flat_map(|l| &l.solves).filter(|s| s.prediction_max_ratio.is_some()).count();
    let violations: usize = logs.iter().map(|l| l.summary.prediction_violations).sum();
    let worst = logs
        .iter()
        .filter_map(|l| l.summary.prediction_max_ratio)
        .fold(0.0_f64, f64::max);
    let prediction_bound = Outcome {
        pass: checked == solves && solves > 0 && violations == 0,
        detail: format!("{checked} of {solves} solves checked, {violations} violations, worst error/bound {worst:.4}"),
    };
    ClosedLoopOutcome { reproduction, prediction_bound }
}

fn flag(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn nominal_recovery() -> Outcome {
    let config = ExperimentConfig {
        eps_bar: 0.0,
        u_s: vec![0.0],
        y_s: vec![0.0],
        stage_cost: StageCost::Quadratic { q: vec![vec![1.0]], r: vec![vec![0.1]] },
        online_seeds: vec![0],
        ..ExperimentConfig::default()
    };
    let backend = ClarabelBackend::default();
    let pipeline = match prepare(&config, &backend) {
        Ok(p) => p,
        Err(e) => return Outcome { pass: false, detail: format!("pipeline setup failed: {e}") },
    };
    let coeffs = pipeline.coeffs();
    let zero_margins = coeffs.a1.iter().chain(&coeffs.a2).chain(&coeffs.a4).all(|&a| a == 0.0);
    let logs = match run_seeds(&pipeline, &config, &config.online_seeds, &backend) {
        Ok(l) => l,
        Err(e) => return Outcome { pass: false, detail: format!("closed loop failed: {e}") },
    };
    let solves: Vec<_> = logs.iter().flat_map(|l| &l.solves).collect();
    let all_feasible = !solves.is_empty() && solves.iter().all(|s| s.feasible);
    let max_sigma = solves
        .iter()
        .map(|s| s.norms.as_ref().map_or(f64::INFINITY, |n| n.sigma_inf))
        .fold(0.0_f64, f64::max);
    let max_cost = solves
        .iter()
        .map(|s| s.objective.map_or(f64::INFINITY, f64::abs))
        .fold(0.0_f64, f64::max);
    Outcome {
        pass: zero_margins && all_feasible && max_sigma <= NOMINAL_SIGMA_MAX && max_cost <= NOMINAL_COST_MAX,
        detail: format!(
            "a1 = a2 = a4 = 0: {zero_margins}, {} solves, max |sigma*| = {max_sigma:.3e}, max |J*| = {max_cost:.3e}",
            solves.len()
        ),
    }
}

/// Random problem with a prescribed KKT point: `x*` and multipliers are
/// drawn first, then `f` and the right-hand sides are chosen so that
/// stationarity, primal feasibility and complementarity hold exactly.
struct Planted {
    hessian: Option<DMatrix<f64>>,
    linear: DVector<f64>,
    eq: (DMatrix<f64>, DVector<f64>),
    ineq: (DMatrix<f64>, DVector<f64>),
    bounds: Vec<Bound>,
    objective: f64,
    x: DVector<f64>,
}

fn planted(rng: &mut ChaCha8Rng, quadratic: bool) -> Planted {
    let n = rng.random_range(4..=12);
    let me = rng.random_range(0..=n / 2);
    let mi = rng.random_range(n / 2..=2 * n);
    let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0));
    let a_eq = gauss(me, n);
    let a_in = gauss(mi, n);
    let hessian = quadratic.then(|| {
        let g = gauss(n, n);
        &g * g.transpose() + DMatrix::identity(n, n) * 0.5
    });
    let x = DVector::from_fn(n, |_, _| rng.random_range(-2.0..=2.0));
    let y = DVector::from_fn(me, |_, _| rng.random_range(-1.0..=1.0));

    // An LP needs at least n active constraints for a vertex optimum; keep
    // roughly half active either way.
    let mut lambda = DVector::zeros(mi);
    let mut slack = DVector::zeros(mi);
    for i in 0..mi {
        if rng.random_bool(0.5) || (!quadratic && i < n) {
            lambda[i] = rng.random_range(0.1..=2.0);
        } else {
            slack[i] = rng.random_range(0.1..=2.0);
        }
    }
    let mut bounds = vec![Bound::FREE; n];
    let mut mu_lo = DVector::zeros(n);
    let mut mu_up = DVector::zeros(n);
    for i in 0..n {
        match rng.random_range(0..4) {
            0 => {
                bounds[i] = Bound::new(x[i], x[i] + rng.random_range(0.5..=3.0));
                mu_lo[i] = rng.random_range(0.1..=2.0);
            }
            1 => {
                bounds[i] = Bound::new(x[i] - rng.random_range(0.5..=3.0), x[i]);
                mu_up[i] = rng.random_range(0.1..=2.0);
            }
            2 => bounds[i] = Bound::new(x[i] - 1.0, x[i] + 1.0),
            _ => {}
        }
    }

    let mut f = -(a_eq.transpose() * &y + a_in.transpose() * &lambda - &mu_lo + &mu_up);
    if let Some(h) = &hessian {
        f -= h * &x;
    }
    let objective = f.dot(&x) + hessian.as_ref().map_or(0.0, |h| 0.5 * x.dot(&(h * &x)));
    let b_eq = &a_eq * &x;
    let b_in = &a_in * &x + slack;
    Planted { hessian, linear: f, eq: (a_eq, b_eq), ineq: (a_in, b_in), bounds, objective, x }
}

fn backend_contract() -> Outcome {
    let backend = ClarabelBackend::default();
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_obj = 0.0_f64;
    let mut worst_primal = 0.0_f64;
    let mut worst_dual = 0.0_f64;
    let mut worst_x = 0.0_f64;
    let mut not_optimal = 0;
    for i in 0..100 {
        let quadratic = i >= 50;
        let p = planted(&mut rng, quadratic);
        let eq = Constraints::new(SparseMatrix::from_dense(&p.eq.0), p.eq.1.clone());
        let ineq = Constraints::new(SparseMatrix::from_dense(&p.ineq.0), p.ineq.1.clone());
        let report = match &p.hessian {
            Some(h) => {
                let mut qp = QuadraticProgram::new(SparseMatrix::from_dense(h), p.linear.clone());
                qp.eq = eq;
                qp.ineq = ineq;
                qp.bounds = Some(p.bounds.clone());
                backend.solve_qp(&qp, &tol)
            }
            None => {
                let mut lp = LinearProgram::new(p.linear.clone());
                lp.eq = eq;
                lp.ineq = ineq;
                lp.bounds = Some(p.bounds.clone());
                backend.solve_lp(&lp, &tol)
            }
        };
        if !report.is_optimal() {
            not_optimal += 1;
            continue;
        }
        worst_obj = worst_obj.max((report.objective - p.objective).abs());
        worst_primal = worst_primal.max(report.primal_residual);
        worst_dual = worst_dual.max(report.dual_residual);
        if quadratic {
            worst_x = worst_x.max((&report.x - &p.x).amax());
        }
    }
    Outcome {
        pass: not_optimal == 0 && worst_obj <= OBJECTIVE_TOL && worst_primal <= RESIDUAL_TOL && worst_dual <= RESIDUAL_TOL,
        detail: format!(
            "50 LPs + 50 QPs: {not_optimal} not optimal, max |objective error| {worst_obj:.3e}, max primal residual \
             {worst_primal:.3e}, max stationarity residual {worst_dual:.3e}, max QP |x - x*| {worst_x:.3e}"
        ),
    }
}

fn main() -> ExitCode {
    // Keep libtest-style invocations (`--list`, filters) from running the
    // suite twice or failing on unknown flags.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "trajectory membership roundtrip", membership_roundtrip()),
        (2, "data-driven constants match model oracles", constants_match_oracles()),
        (3, "tightening coefficient identities", tightening_identities()),
    ];
    let closed = closed_loop_reproduction();
    results.push((4, "closed-loop reproduction", closed.reproduction));
    results.push((5, "prediction-error bound", closed.prediction_bound));
    results.push((6, "nominal recovery", nominal_recovery()));
    results.push((7, "solver backend contract", backend_contract()));

    let mut all = true;
    for (id, name, outcome) in &results {
        all &= outcome.pass;
        println!("{} [{id}] {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
