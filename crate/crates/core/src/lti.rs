//! Ground-truth LTI plant: realization, simulation, measurement noise and
//! the model-based oracles used to validate the data-driven estimators.
//!
//! Nothing in the controller reads from this module; it exists to generate
//! data and to check what the data-driven side computes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constants::enumerate_box_subspace_vertices;
use crate::error::{Error, Result};
use crate::solver::linalg::{induced_inf_norm, ThinSvd};
use crate::solver::{Backend, Bound, Constraints, LinearProgram, SolveStatus, SparseMatrix, Tolerances};

/// Relative singular-value threshold for the minimality test.
const MINIMALITY_RTOL: f64 = 1e-10;

/// Discrete-time plant `x⁺ = Ax + Bu, y = Cx + Du` in a minimal realization.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl StateSpaceModel {
    /// Checks dimensions and minimality (observable and controllable).
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::dim(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        let m = b.ncols();
        let p = c.nrows();
        if m == 0 || p == 0 {
            return Err(Error::dim("at least one input and one output required"));
        }
        if b.nrows() != n || c.ncols() != n || d.nrows() != p || d.ncols() != m {
            return Err(Error::dim(format!(
                "B {}x{}, C {}x{}, D {}x{} inconsistent with n={n}",
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        if [&a, &b, &c, &d].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite matrix entry"));
        }
        let model = Self { a, b, c, d };
        let obs = rank_rel(&model.observability_matrix());
        let ctrb = rank_rel(&model.controllability_matrix());
        if obs < n || ctrb < n {
            return Err(Error::NotMinimal(format!(
                "observability rank {obs}, controllability rank {ctrb}, order {n}"
            )));
        }
        Ok(model)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn order(&self) -> usize {
        self.a.nrows()
    }
    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// `Φ = [C; CA; …; CA^{n−1}]`.
    pub fn observability_matrix(&self) -> DMatrix<f64> {
        self.observability_matrix_of_depth(self.order())
    }

    pub fn observability_matrix_of_depth(&self, depth: usize) -> DMatrix<f64> {
        let (n, p) = (self.order(), self.outputs());
        let mut phi = DMatrix::zeros(p * depth, n);
        let mut cak = self.c.clone();
        for k in 0..depth {
            phi.view_mut((k * p, 0), (p, n)).copy_from(&cak);
            cak = &cak * &self.a;
        }
        phi
    }

    /// `[B, AB, …, A^{n−1}B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.order(), self.inputs());
        let mut ctrb = DMatrix::zeros(n, m * n);
        let mut akb = self.b.clone();
        for k in 0..n {
            ctrb.view_mut((0, k * m), (n, m)).copy_from(&akb);
            akb = &self.a * &akb;
        }
        ctrb
    }

    pub fn a_power(&self, k: usize) -> DMatrix<f64> {
        let mut r = DMatrix::identity(self.order(), self.order());
        for _ in 0..k {
            r = &r * &self.a;
        }
        r
    }

    /// Markov parameters `h_0 = D, h_k = C A^{k−1} B`.
    pub fn markov_parameters(&self, count: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut akb = self.b.clone();
        for k in 0..count {
            if k == 0 {
                out.push(self.d.clone());
            } else {
                out.push(&self.c * &akb);
                akb = &self.a * &akb;
            }
        }
        out
    }

    /// `C (I − A)^{-1} B + D`, if `I − A` is invertible.
    pub fn dc_gain(&self) -> Option<DMatrix<f64>> {
        let n = self.order();
        let ima = DMatrix::identity(n, n) - &self.a;
        ima.lu().solve(&self.b).map(|x| &self.c * x + &self.d)
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y = &self.c * x + &self.d * u;
        let next = &self.a * x + &self.b * u;
        (next, y)
    }
}

fn rank_rel(m: &DMatrix<f64>) -> usize {
    let svd = ThinSvd::new(m);
    let smax = svd.sigma_max();
    if smax == 0.0 {
        return 0;
    }
    svd.rank(MINIMALITY_RTOL * smax)
}

/// Controllable-canonical realization of `num(z)/den(z)`.
///
/// Coefficients are in descending powers of `z`. The denominator is
/// normalised by its leading coefficient; a numerator of the same degree
/// yields a nonzero feedthrough.
pub fn realize_transfer_function(num: &[f64], den: &[f64]) -> Result<StateSpaceModel> {
    let lead = *den.first().ok_or_else(|| Error::invalid("empty denominator"))?;
    if lead == 0.0 {
        return Err(Error::invalid("leading denominator coefficient is zero"));
    }
    if num.is_empty() {
        return Err(Error::invalid("empty numerator"));
    }
    if num.len() > den.len() {
        return Err(Error::invalid(format!(
            "improper transfer function: numerator degree {} > denominator degree {}",
            num.len() - 1,
            den.len() - 1
        )));
    }
    let n = den.len() - 1;
    if n == 0 {
        return Err(Error::invalid("static gain has no state-space realization of positive order"));
    }
    if num.iter().chain(den).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite coefficient"));
    }

    let a_coef: Vec<f64> = den[1..].iter().map(|v| v / lead).collect();
    let mut b_coef = vec![0.0; n + 1 - num.len()];
    b_coef.extend(num.iter().map(|v| v / lead));

    let d0 = b_coef[0];
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        a[(0, j)] = -a_coef[j];
    }
    for i in 1..n {
        a[(i, i - 1)] = 1.0;
    }
    let mut b = DMatrix::zeros(n, 1);
    b[(0, 0)] = 1.0;
    let c = DMatrix::from_fn(1, n, |_, j| b_coef[j + 1] - d0 * a_coef[j]);
    let d = DMatrix::from_element(1, 1, d0);
    StateSpaceModel::new(a, b, c, d).map_err(|e| match e {
        Error::NotMinimal(msg) => Error::NotMinimal(format!("numerator and denominator share a common factor ({msg})")),
        other => other,
    })
}

/// Input/output sequence, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    u: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::dim(format!("input length {} != output length {}", u.ncols(), y.ncols())));
        }
        if u.ncols() == 0 {
            return Err(Error::dim("empty trajectory"));
        }
        Ok(Self { u, y })
    }

    /// Builds from stacked vectors `u_{[0,T−1]}` and `y_{[0,T−1]}`.
    pub fn from_stacked(u: &[f64], y: &[f64], m: usize, p: usize) -> Result<Self> {
        if m == 0 || p == 0 || u.len() % m != 0 || y.len() % p != 0 {
            return Err(Error::dim("stacked lengths not multiples of the signal dimensions"));
        }
        Self::new(
            DMatrix::from_column_slice(m, u.len() / m, u),
            DMatrix::from_column_slice(p, y.len() / p, y),
        )
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.u.ncols() == 0
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// `u_{[0,T−1]}` as one column.
    pub fn stacked_u(&self) -> DVector<f64> {
        DVector::from_column_slice(self.u.as_slice())
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        DVector::from_column_slice(self.y.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDistribution {
    /// Uniform on `[−ε̄, ε̄]^p`.
    #[default]
    Uniform,
    /// Each coordinate `±ε̄` with equal probability.
    ExtremePoints,
}

/// Bounded measurement noise, `‖ε‖_∞ ≤ ε̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub bound: f64,
    #[serde(default)]
    pub distribution: NoiseDistribution,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(bound: f64, distribution: NoiseDistribution, seed: u64) -> Result<Self> {
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::invalid(format!("noise bound must be finite and nonnegative, got {bound}")));
        }
        Ok(Self { bound, distribution, seed })
    }

    pub fn uniform(bound: f64, seed: u64) -> Result<Self> {
        Self::new(bound, NoiseDistribution::Uniform, seed)
    }

    pub fn sampler(&self) -> NoiseSampler {
        NoiseSampler { spec: *self, rng: ChaCha8Rng::seed_from_u64(self.seed) }
    }
}

/// Stateful generator for one [`NoiseSpec`].
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    spec: NoiseSpec,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn sample(&mut self, dim: usize) -> DVector<f64> {
        let e = self.spec.bound;
        if e == 0.0 {
            return DVector::zeros(dim);
        }
        match self.spec.distribution {
            NoiseDistribution::Uniform => DVector::from_fn(dim, |_, _| self.rng.random_range(-e..=e)),
            NoiseDistribution::ExtremePoints => {
                DVector::from_fn(dim, |_, _| if self.rng.random_bool(0.5) { e } else { -e })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub trajectory: Trajectory,
    /// `ỹ_k = y_k + ε_k`, present when noise was requested.
    pub noisy_y: Option<DMatrix<f64>>,
    pub final_state: DVector<f64>,
}

/// Runs the state recursion from `x0` over the inputs `u` (one column per
/// sample).
pub fn simulate(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    u: &DMatrix<f64>,
    noise: Option<&NoiseSpec>,
) -> Result<Simulation> {
    if x0.len() != model.order() {
        return Err(Error::dim(format!("x0 has length {}, plant order {}", x0.len(), model.order())));
    }
    if u.nrows() != model.inputs() {
        return Err(Error::dim(format!("input dimension {} != {}", u.nrows(), model.inputs())));
    }
    if u.ncols() == 0 {
        return Err(Error::dim("empty input sequence"));
    }
    let t = u.ncols();
    let p = model.outputs();
    let mut y = DMatrix::zeros(p, t);
    let mut x = x0.clone();
    for k in 0..t {
        let uk = u.column(k).into_owned();
        let (next, yk) = model.step(&x, &uk);
        y.set_column(k, &yk);
        x = next;
    }
    let noisy_y = noise.map(|spec| {
        let mut sampler = spec.sampler();
        let mut noisy = y.clone();
        for k in 0..t {
            let e = sampler.sample(p);
            let mut col = noisy.column_mut(k);
            col += e;
        }
        noisy
    });
    Ok(Simulation { trajectory: Trajectory::new(u.clone(), y)?, noisy_y, final_state: x })
}

/// `‖C A^k Φ^†‖_∞`: the largest output at time `k` under zero input over
/// all initial windows with `‖y_{[0,n−1]}‖_∞ ≤ 1`.
pub fn rho_oracle(model: &StateSpaceModel, k: usize) -> f64 {
    let phi = model.observability_matrix();
    let pinv = crate::solver::pseudoinverse(&phi);
    induced_inf_norm(&(model.c() * model.a_power(k) * pinv))
}

/// Model-based controllability constant.
///
/// For every vertex `w` of `{Φx} ∩ [−1,1]^{np}` the initial state is
/// `x₀ = Φ^† w` and an LP finds the minimum ℓ1-norm `n`-step input with
/// `A^n x₀ + Σ A^{n−1−j} B u_j = 0`. The result is the maximum over
/// vertices.
pub fn gamma_oracle(model: &StateSpaceModel, backend: &dyn Backend) -> Result<f64> {
    let (n, m) = (model.order(), model.inputs());
    let phi = model.observability_matrix();
    let pinv = crate::solver::pseudoinverse(&phi);
    let vertices = enumerate_box_subspace_vertices(&phi, 1.0)?;

    // Column block j multiplies u_j: A^{n−1−j} B.
    let mut steer = DMatrix::zeros(n, m * n);
    for j in 0..n {
        steer.view_mut((0, j * m), (n, m)).copy_from(&(model.a_power(n - 1 - j) * model.b()));
    }
    let an = model.a_power(n);

    let nvar = 2 * m * n;
    let mut triplets = Vec::new();
    for r in 0..n {
        for c in 0..m * n {
            let v = steer[(r, c)];
            triplets.push((r, c, v));
            triplets.push((r, m * n + c, -v));
        }
    }
    let eq_matrix = SparseMatrix::from_triplets(n, nvar, triplets);
    let tol = Tolerances::default();

    let mut gamma: f64 = 0.0;
    for w in &vertices.vertices {
        let x0 = &pinv * w;
        let rhs = -(&an * &x0);
        let lp = LinearProgram {
            cost: DVector::from_element(nvar, 1.0),
            eq: Constraints::new(eq_matrix.clone(), rhs),
            ineq: Constraints::empty(nvar),
            bounds: Some(vec![Bound::NONNEGATIVE; nvar]),
        };
        let report = backend.solve_lp(&lp, &tol);
        match report.status {
            SolveStatus::Optimal => gamma = gamma.max(report.objective),
            s => {
                return Err(Error::Solver(format!("steering LP at vertex {:?} returned {s:?}", w.as_slice())));
            }
        }
    }
    Ok(gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquilibriumReport {
    pub is_equilibrium: bool,
    pub residual: f64,
}

pub const DEFAULT_EQUILIBRIUM_TOL: f64 = 1e-8;

/// Whether the constant pair `(u_s, y_s)` is a trajectory of the plant.
pub fn equilibrium_check(model: &StateSpaceModel, us: &DVector<f64>, ys: &DVector<f64>, tol: f64) -> Result<EquilibriumReport> {
    if us.len() != model.inputs() || ys.len() != model.outputs() {
        return Err(Error::dim("setpoint dimensions do not match the plant"));
    }
    let residual = match model.dc_gain() {
        Some(g) => (ys - g * us).amax(),
        None => {
            // Steady state x = Ax + Bu_s, y_s = Cx + Du_s in the least-squares sense.
            let n = model.order();
            let p = model.outputs();
            let mut lhs = DMatrix::zeros(n + p, n);
            lhs.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) - model.a()));
            lhs.view_mut((n, 0), (p, n)).copy_from(model.c());
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&(model.b() * us));
            rhs.rows_mut(n, p).copy_from(&(ys - model.d() * us));
            let pinv = crate::solver::pseudoinverse(&lhs);
            (&lhs * (pinv * &rhs) - rhs).amax()
        }
    };
    Ok(EquilibriumReport { is_equilibrium: residual <= tol, residual })
}

/// Plant definition as stored in JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlantSpec {
    TransferFunction {
        num: Vec<f64>,
        den: Vec<f64>,
    },
    StateSpace {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
        #[serde(rename = "C")]
        c: Vec<Vec<f64>>,
        #[serde(rename = "D")]
        d: Vec<Vec<f64>>,
    },
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::dim(format!("{name}: ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl PlantSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// The plant used in the reproduction study.
    pub fn example_plant() -> Self {
        PlantSpec::TransferFunction {
            num: vec![0.02, 0.061, 0.011],
            den: vec![1.0, -2.1, 1.5, -0.3],
        }
    }

    pub fn to_model(&self) -> Result<StateSpaceModel> {
        match self {
            PlantSpec::TransferFunction { num, den } => realize_transfer_function(num, den),
            PlantSpec::StateSpace { a, b, c, d } => StateSpaceModel::new(
                matrix_from_rows(a, "A")?,
                matrix_from_rows(b, "B")?,
                matrix_from_rows(c, "C")?,
                matrix_from_rows(d, "D")?,
            ),
        }
    }

    pub fn from_model(model: &StateSpaceModel) -> Self {
        PlantSpec::StateSpace {
            a: matrix_to_rows(model.a()),
            b: matrix_to_rows(model.b()),
            c: matrix_to_rows(model.c()),
            d: matrix_to_rows(model.d()),
        }
    }
}
