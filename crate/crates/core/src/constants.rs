//! Data-driven system constants: the controllability constant Γ, the
//! observability constants ρ_k, the excitation constant c_pe and the
//! extended-state bound ξ_max.
//!
//! Γ and ρ_k are computed from the clean data view only; they are exact
//! for noise-free data and meaningless otherwise.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::{build_h_uxi, zero_input_output_basis, DataRecord, View};
use crate::solver::linalg::{compress_equalities, induced_one_norm, ThinSvd};
use crate::solver::{Backend, Bound, Constraints, LinearProgram, SolveStatus, SparseMatrix, Tolerances};

/// Where a constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    DataDriven,
    ModelOracle,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceTags {
    pub gamma: Provenance,
    pub rho: Provenance,
    pub c_pe: Provenance,
    pub xi_max: Provenance,
}

impl ProvenanceTags {
    pub const DATA_DRIVEN: Self = Self {
        gamma: Provenance::DataDriven,
        rho: Provenance::DataDriven,
        c_pe: Provenance::DataDriven,
        xi_max: Provenance::ClosedForm,
    };
    pub const MODEL_ORACLE: Self = Self {
        gamma: Provenance::ModelOracle,
        rho: Provenance::ModelOracle,
        c_pe: Provenance::DataDriven,
        xi_max: Provenance::ClosedForm,
    };
}

/// Everything the tightening recursion consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConstants {
    pub n: usize,
    pub horizon: usize,
    pub gamma: f64,
    /// `ρ_k` for `k = n, …, L + n − 1`.
    pub rho: Vec<f64>,
    pub rho_n_max: f64,
    #[serde(rename = "rho_L_max")]
    pub rho_l_max: f64,
    pub c_pe: f64,
    pub xi_max: f64,
    pub provenance: ProvenanceTags,
}

impl SystemConstants {
    pub fn new(
        n: usize,
        horizon: usize,
        gamma: f64,
        rho: Vec<f64>,
        c_pe: f64,
        xi_max: f64,
        provenance: ProvenanceTags,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("order bound n must be positive"));
        }
        if horizon < 2 * n {
            return Err(Error::invalid(format!("horizon L = {horizon} must be at least 2n = {}", 2 * n)));
        }
        if rho.len() != horizon {
            return Err(Error::dim(format!(
                "rho must cover k = {n}..{} ({horizon} values), got {}",
                horizon + n - 1,
                rho.len()
            )));
        }
        for (name, v) in [("gamma", gamma), ("c_pe", c_pe), ("xi_max", xi_max)].into_iter().chain(rho.iter().map(|&r| ("rho", r))) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        let max_over = |lo: usize, hi: usize| rho[lo - n..=hi - n].iter().copied().fold(0.0, f64::max);
        let rho_n_max = max_over(n, 2 * n - 1);
        let rho_l_max = max_over(horizon, horizon + n - 1);
        Ok(Self { n, horizon, gamma, rho, rho_n_max, rho_l_max, c_pe, xi_max, provenance })
    }

    /// `ρ_k`, for `k ∈ [n, L + n − 1]`.
    pub fn rho(&self, k: usize) -> f64 {
        assert!(k >= self.n && k < self.horizon + self.n, "rho index {k} outside [{}, {}]", self.n, self.horizon + self.n - 1);
        self.rho[k - self.n]
    }

    /// Parses and re-validates, including the derived maxima.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: SystemConstants = serde_json::from_str(s)?;
        let checked = Self::new(raw.n, raw.horizon, raw.gamma, raw.rho.clone(), raw.c_pe, raw.xi_max, raw.provenance)?;
        if checked.rho_n_max != raw.rho_n_max || checked.rho_l_max != raw.rho_l_max {
            return Err(Error::Parse("rho_n_max / rho_L_max inconsistent with the rho table".into()));
        }
        Ok(checked)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `k  ρ_k` rows.
    pub fn rho_table(&self) -> String {
        let mut out = String::from("k    rho_k\n");
        for (i, r) in self.rho.iter().enumerate() {
            out.push_str(&format!("{:<4} {r:.10}\n", i + self.n));
        }
        out
    }
}

/// Vertices of `{basis·θ : ‖basis·θ‖_∞ ≤ bound}`.
#[derive(Debug, Clone)]
pub struct PolytopeVertexSet {
    pub dim: usize,
    pub vertices: Vec<DVector<f64>>,
    pub basis: DMatrix<f64>,
    pub bound: f64,
}

/// Largest subspace dimension accepted by the vertex enumeration.
pub const MAX_VERTEX_SUBSPACE_DIM: usize = 12;

const VERTEX_DEDUP_TOL: f64 = 1e-7;

/// Enumerates vertices by solving every choice of `r` active facets
/// `±(basis·θ)_i = bound` and keeping the feasible, distinct solutions.
pub fn enumerate_box_subspace_vertices(basis: &DMatrix<f64>, bound: f64) -> Result<PolytopeVertexSet> {
    let (d, r) = basis.shape();
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(Error::invalid(format!("box bound must be finite and nonnegative, got {bound}")));
    }
    if r > d {
        return Err(Error::dim(format!("basis has {r} columns in ambient dimension {d}")));
    }
    if r > MAX_VERTEX_SUBSPACE_DIM {
        return Err(Error::invalid(format!(
            "subspace dimension {r} exceeds the enumeration limit {MAX_VERTEX_SUBSPACE_DIM}"
        )));
    }
    let set = |vertices| PolytopeVertexSet { dim: d, vertices, basis: basis.clone(), bound };
    if r == 0 {
        return Ok(set(vec![DVector::zeros(d)]));
    }
    let svd = ThinSvd::new(basis);
    if svd.rank(svd.default_tolerance()) < r {
        return Err(Error::invalid("basis columns are linearly dependent; the polytope has empty interior"));
    }
    let scale = basis.amax().max(1.0);
    let mut vertices: Vec<DVector<f64>> = Vec::new();
    for rows in (0..d).combinations(r) {
        let sub = DMatrix::from_fn(r, r, |i, j| basis[(rows[i], j)]);
        let lu = sub.lu();
        if !lu.is_invertible() {
            continue;
        }
        for signs in 0u32..(1 << r) {
            let rhs = DVector::from_fn(r, |i, _| if signs >> i & 1 == 1 { -bound } else { bound });
            let Some(theta) = lu.solve(&rhs) else { continue };
            let w = basis * theta;
            if w.amax() > bound + 1e-9 * scale {
                continue;
            }
            if vertices.iter().all(|v| (v - &w).amax() > VERTEX_DEDUP_TOL) {
                vertices.push(w);
            }
        }
    }
    Ok(set(vertices))
}

/// Per-vertex detail of the Γ computation.
#[derive(Debug, Clone)]
pub struct GammaEstimate {
    pub gamma: f64,
    pub vertices: PolytopeVertexSet,
    /// Inner LP optimum per vertex.
    pub costs: Vec<f64>,
}

/// Relative singular-value cut for redundant equality rows.
const EQUALITY_RANK_TOL: f64 = 1e-10;
/// Largest admissible right-hand-side component outside the row space,
/// relative to the right-hand side.
const EQUALITY_CONSISTENCY_TOL: f64 = 1e-7;

/// Data-driven Γ; see [`estimate_gamma_detailed`].
pub fn estimate_gamma(data: &DataRecord, backend: &dyn Backend) -> Result<f64> {
    estimate_gamma_detailed(data, backend).map(|g| g.gamma)
}

/// Γ as the max over vertices of the inner steering LP.
///
/// The outer maximisation runs over `w = y_{[0,n−1]}`, the zero-input
/// output window, whose feasible set is the box ∩ the zero-input response
/// space. For each vertex a matching initial window `(u, y)_{[−n,−1]}` is
/// reconstructed with minimum-norm weights over `H_{2n}`, and the LP
/// `min ‖ū_{[0,n−1]}‖₁` is solved over `H_{3n}` with zero terminal window.
pub fn estimate_gamma_detailed(data: &DataRecord, backend: &dyn Backend) -> Result<GammaEstimate> {
    let n = data.prefix();
    let (m, p) = (data.inputs(), data.outputs());
    let pe = data.persistence_of_excitation(4 * n);
    if !pe.persistently_exciting {
        return Err(Error::InsufficientExcitation(format!(
            "estimating Gamma needs excitation of order {} (rank {} of {})",
            4 * n,
            pe.rank,
            pe.required
        )));
    }
    let basis = zero_input_output_basis(data, n)?;
    let vertices = enumerate_box_subspace_vertices(&basis, 1.0)?;

    // Preimage windows: rows of [H_2n(u); H_2n(y)] for the second half.
    let hu2 = data.hankel_u(2 * n)?.into_matrix();
    let hy2 = data.hankel_y(View::Clean, 2 * n)?.into_matrix();
    let mut tail = DMatrix::zeros(n * (m + p), hu2.ncols());
    tail.rows_mut(0, n * m).copy_from(&hu2.rows(n * m, n * m));
    tail.rows_mut(n * m, n * p).copy_from(&hy2.rows(n * p, n * p));
    let tail_pinv = crate::solver::pseudoinverse(&tail);

    let hu3 = data.hankel_u(3 * n)?.into_matrix();
    let hy3 = data.hankel_y(View::Clean, 3 * n)?.into_matrix();
    let cols = hu3.ncols();
    let mn = m * n;
    let pn = p * n;
    let nvar = cols + 2 * mn;

    // Row blocks: u_{[−n,−1]}, y_{[−n,−1]}, ū_{[0,n−1]} − (u⁺ − u⁻) = 0,
    // u_{[n,2n−1]} = 0, y_{[n,2n−1]} = 0. The terminal outputs are implied
    // by the other blocks on exact data, so the rows are compressed onto
    // their row space before solving.
    let neq = 3 * mn + 2 * pn;
    let mut eq_dense = DMatrix::zeros(neq, nvar);
    eq_dense.view_mut((0, 0), (mn, cols)).copy_from(&hu3.rows(0, mn));
    eq_dense.view_mut((mn, 0), (pn, cols)).copy_from(&hy3.rows(0, pn));
    eq_dense.view_mut((mn + pn, 0), (mn, cols)).copy_from(&hu3.rows(mn, mn));
    eq_dense.view_mut((2 * mn + pn, 0), (mn, cols)).copy_from(&hu3.rows(2 * mn, mn));
    eq_dense.view_mut((3 * mn + pn, 0), (pn, cols)).copy_from(&hy3.rows(2 * pn, pn));
    for i in 0..mn {
        eq_dense[(mn + pn + i, cols + i)] = -1.0;
        eq_dense[(mn + pn + i, cols + mn + i)] = 1.0;
    }

    let mut cost = DVector::zeros(nvar);
    cost.rows_mut(cols, 2 * mn).fill(1.0);
    let mut bounds = vec![Bound::FREE; cols];
    bounds.extend(std::iter::repeat_n(Bound::NONNEGATIVE, 2 * mn));
    let tol = Tolerances::default();

    let mut costs = Vec::with_capacity(vertices.vertices.len());
    for w in &vertices.vertices {
        let mut target = DVector::zeros(n * (m + p));
        target.rows_mut(mn, pn).copy_from(w);
        let alpha = &tail_pinv * target;
        let u_init = hu2.rows(0, mn) * &alpha;
        let y_init = hy2.rows(0, pn) * &alpha;

        let mut rhs = DVector::zeros(neq);
        rhs.rows_mut(0, mn).copy_from(&u_init);
        rhs.rows_mut(mn, pn).copy_from(&y_init);
        let (eq_rows, eq_rhs, outside) = compress_equalities(&eq_dense, &rhs, EQUALITY_RANK_TOL);
        if outside > EQUALITY_CONSISTENCY_TOL * rhs.amax().max(1.0) {
            return Err(Error::Estimation(format!(
                "steering LP at vertex {:?}: initial window inconsistent with the data (residual {outside:.3e})",
                w.as_slice()
            )));
        }
        let lp = LinearProgram {
            cost: cost.clone(),
            eq: Constraints::new(SparseMatrix::from_dense(&eq_rows), eq_rhs),
            ineq: Constraints::empty(nvar),
            bounds: Some(bounds.clone()),
        };
        let report = backend.solve_lp(&lp, &tol);
        if report.status != SolveStatus::Optimal {
            return Err(Error::Estimation(format!(
                "steering LP at vertex {:?} returned {:?}; the data may be insufficiently exciting",
                w.as_slice(),
                report.status
            )));
        }
        costs.push(report.objective.max(0.0));
    }
    let gamma = costs.iter().copied().fold(0.0, f64::max);
    Ok(GammaEstimate { gamma, vertices, costs })
}

/// Data-driven `ρ_k`: the largest `|y_{k,i}|` over zero-input trajectories
/// with `‖y_{[0,n−1]}‖_∞ ≤ 1`, computed as `2p` LPs (one per output
/// component and sign).
pub fn estimate_rho(data: &DataRecord, k: usize, backend: &dyn Backend) -> Result<f64> {
    let n = data.prefix();
    let (m, p) = (data.inputs(), data.outputs());
    if k < n {
        return Err(Error::invalid(format!("rho index k = {k} below n = {n}")));
    }
    let depth = k + 1;
    let pe = data.persistence_of_excitation(depth + n);
    if !pe.persistently_exciting {
        return Err(Error::InsufficientExcitation(format!(
            "estimating rho_{k} needs excitation of order {} (rank {} of {})",
            depth + n,
            pe.rank,
            pe.required
        )));
    }
    let hu = data.hankel_u(depth)?.into_matrix();
    let hy = data.hankel_y(View::Clean, depth)?.into_matrix();
    let cols = hu.ncols();
    let eq = Constraints::new(SparseMatrix::from_dense(&hu), DVector::zeros(m * depth));

    // ±y_{[0,n−1]} ≤ 1.
    let window = hy.rows(0, n * p).into_owned();
    let mut triplets = Vec::new();
    for i in 0..n * p {
        for j in 0..cols {
            let v = window[(i, j)];
            triplets.push((i, j, v));
            triplets.push((n * p + i, j, -v));
        }
    }
    let ineq = Constraints::new(SparseMatrix::from_triplets(2 * n * p, cols, triplets), DVector::from_element(2 * n * p, 1.0));
    let tol = Tolerances::default();

    let mut rho: f64 = 0.0;
    for i in 0..p {
        let row = hy.row(k * p + i).transpose();
        for sign in [1.0, -1.0] {
            let lp = LinearProgram {
                cost: &row * -sign,
                eq: eq.clone(),
                ineq: ineq.clone(),
                bounds: None,
            };
            let report = backend.solve_lp(&lp, &tol);
            match report.status {
                SolveStatus::Optimal => rho = rho.max(-report.objective),
                s => {
                    return Err(Error::Estimation(format!(
                        "rho_{k} LP (output {i}, sign {sign:+}) returned {s:?}"
                    )))
                }
            }
        }
    }
    Ok(rho.max(0.0))
}

/// `ρ_k` for `k = n, …, L + n − 1`, one thread per `k`.
pub fn estimate_rho_table(data: &DataRecord, horizon: usize, backend: &dyn Backend) -> Result<Vec<f64>> {
    let n = data.prefix();
    std::thread::scope(|s| {
        let handles: Vec<_> = (n..horizon + n).map(|k| s.spawn(move || estimate_rho(data, k, backend))).collect();
        handles.into_iter().map(|h| h.join().expect("rho worker panicked")).collect()
    })
}

/// `‖H_{uξ}^†‖₁` for the chosen output view.
pub fn compute_cpe(data: &DataRecord, view: View, horizon: usize) -> Result<f64> {
    let h = build_h_uxi(data, view, horizon)?;
    Ok(induced_one_norm(&crate::solver::pseudoinverse(&h)))
}

/// Closed form of `max ‖ξ‖₁` over `U^n × Y^n` for a box `U` and
/// `Y = [−y_max, y_max]^p`.
pub fn compute_xi_max(u_lower: &[f64], u_upper: &[f64], y_max: f64, outputs: usize, n: usize) -> Result<f64> {
    if u_lower.len() != u_upper.len() {
        return Err(Error::dim("input bound vectors differ in length"));
    }
    if !(y_max >= 0.0 && y_max.is_finite()) {
        return Err(Error::invalid(format!("y_max must be finite and nonnegative for xi_max, got {y_max}")));
    }
    let mut u_sum = 0.0;
    for (&lo, &hi) in u_lower.iter().zip(u_upper) {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("input bound [{lo}, {hi}] is not a finite interval")));
        }
        u_sum += lo.abs().max(hi.abs());
    }
    Ok(n as f64 * (u_sum + outputs as f64 * y_max))
}

/// Fully data-driven constants: Γ and ρ from clean data, c_pe from the
/// view the controller will use.
pub fn estimate_constants(
    data: &DataRecord,
    horizon: usize,
    cpe_view: View,
    xi_max: f64,
    backend: &dyn Backend,
) -> Result<SystemConstants> {
    let gamma = estimate_gamma(data, backend)?;
    let rho = estimate_rho_table(data, horizon, backend)?;
    let c_pe = compute_cpe(data, cpe_view, horizon)?;
    SystemConstants::new(data.prefix(), horizon, gamma, rho, c_pe, xi_max, ProvenanceTags::DATA_DRIVEN)
}
