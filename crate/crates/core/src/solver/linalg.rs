//! Dense linear-algebra helpers shared by the estimators and the MPC.

use nalgebra::{DMatrix, DVector};

/// Default relative rank threshold: `max(rows, cols) · ε_mach · σ_max`.
pub fn default_rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Thin SVD, `a = u · diag(s) · v_t`, with singular values sorted in
/// decreasing order.
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (r, c) = a.shape();
        let k = r.min(c);
        if k == 0 {
            return Self {
                u: DMatrix::zeros(r, 0),
                singular_values: DVector::zeros(0),
                v_t: DMatrix::zeros(0, c),
            };
        }
        let svd = a.clone().svd(true, true);
        let (u, s, v_t) = (svd.u.unwrap(), svd.singular_values, svd.v_t.unwrap());
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
        let u = DMatrix::from_fn(r, k, |i, j| u[(i, order[j])]);
        let v_t = DMatrix::from_fn(k, c, |i, j| v_t[(order[i], j)]);
        let s = DVector::from_fn(k, |i, _| s[order[i]]);
        Self { u, singular_values: s, v_t }
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    /// Number of singular values above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.singular_values.iter().filter(|&&s| s > tol).count()
    }

    pub fn default_tolerance(&self) -> f64 {
        default_rank_tolerance(self.u.nrows(), self.v_t.ncols(), self.sigma_max())
    }

    /// Moore–Penrose inverse, discarding singular values at or below `tol`.
    pub fn pseudoinverse(&self, tol: f64) -> DMatrix<f64> {
        let r = self.rank(tol);
        let (rows, cols) = (self.u.nrows(), self.v_t.ncols());
        if r == 0 {
            return DMatrix::zeros(cols, rows);
        }
        let v = self.v_t.rows(0, r).transpose();
        let mut scaled = v;
        for j in 0..r {
            let inv = 1.0 / self.singular_values[j];
            scaled.column_mut(j).scale_mut(inv);
        }
        scaled * self.u.columns(0, r).transpose()
    }

    /// Orthonormal basis of the column space.
    pub fn range_basis(&self, tol: f64) -> DMatrix<f64> {
        let r = self.rank(tol);
        self.u.columns(0, r).into_owned()
    }
}

/// Moore–Penrose pseudoinverse with the default rank threshold.
pub fn pseudoinverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = ThinSvd::new(a);
    let tol = svd.default_tolerance();
    svd.pseudoinverse(tol)
}

/// `A x = b` rewritten on the row space of `A`: returns `(Σ_r V_rᵀ, U_rᵀ b)`
/// with singular values below `rel_tol · σ_max` dropped, together with the
/// part of `b` outside the range of `A` (`‖b − U_r U_rᵀ b‖_∞`).
///
/// Interior-point solvers are fragile on redundant equalities whose
/// right-hand side is consistent only up to rounding; the compressed system
/// has full row rank.
pub fn compress_equalities(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> (DMatrix<f64>, DVector<f64>, f64) {
    let svd = ThinSvd::new(a);
    let r = svd.rank(rel_tol * svd.sigma_max());
    let ur = svd.u.columns(0, r);
    let mut rows = svd.v_t.rows(0, r).into_owned();
    for i in 0..r {
        rows.row_mut(i).scale_mut(svd.singular_values[i]);
    }
    let rhs = ur.transpose() * b;
    let outside = (b - &ur * &rhs).amax();
    (rows, rhs, outside)
}

/// Induced 1-norm: maximum absolute column sum.
pub fn induced_one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Induced ∞-norm: maximum absolute row sum.
pub fn induced_inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn norm_one(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Numerical rank with the default threshold.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let svd = ThinSvd::new(a);
    svd.rank(svd.default_tolerance())
}

/// Residuals of the four Penrose identities for a candidate `x ≈ a⁺`:
/// `axa = a`, `xax = x`, `(ax)ᵀ = ax`, `(xa)ᵀ = xa`. Max-abs entries.
pub fn penrose_residuals(a: &DMatrix<f64>, x: &DMatrix<f64>) -> [f64; 4] {
    let ax = a * x;
    let xa = x * a;
    [
        (&ax * a - a).amax(),
        (&xa * x - x).amax(),
        (ax.transpose() - &ax).amax(),
        (xa.transpose() - &xa).amax(),
    ]
}
