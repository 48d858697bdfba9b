//! Hankel matrices, persistence of excitation and the trajectory algebra of
//! the fundamental lemma.
//!
//! Signals are stored column-per-sample (`q × N`). A [`DataRecord`] keeps
//! `N + n` samples: the first `n` are the prefix needed to form extended
//! states, and record column `n` is sample `0` of the experiment.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::Trajectory;
use crate::solver::linalg::{default_rank_tolerance, ThinSvd};

/// Block-Hankel matrix of a `q`-dimensional signal with `depth` block rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    depth: usize,
    signal_dim: usize,
    source_len: usize,
    matrix: DMatrix<f64>,
}

impl HankelMatrix {
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn signal_dim(&self) -> usize {
        self.signal_dim
    }
    pub fn source_len(&self) -> usize {
        self.source_len
    }
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Block `(i, j)`, which equals source sample `i + j`.
    pub fn block(&self, i: usize, j: usize) -> DVector<f64> {
        self.matrix.view((i * self.signal_dim, j), (self.signal_dim, 1)).column(0).into_owned()
    }
}

/// `H_L(s)` for a signal with one column per sample.
pub fn hankel(signal: &DMatrix<f64>, depth: usize) -> Result<HankelMatrix> {
    let (q, len) = signal.shape();
    if depth == 0 {
        return Err(Error::dim("Hankel depth must be positive"));
    }
    if len < depth {
        return Err(Error::dim(format!("signal length {len} shorter than Hankel depth {depth}")));
    }
    let cols = len - depth + 1;
    let mut matrix = DMatrix::zeros(q * depth, cols);
    for j in 0..cols {
        for i in 0..depth {
            matrix.view_mut((i * q, j), (q, 1)).copy_from(&signal.column(i + j));
        }
    }
    Ok(HankelMatrix { depth, signal_dim: q, source_len: len, matrix })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    pub order: usize,
    pub rank: usize,
    pub required: usize,
    pub persistently_exciting: bool,
    /// Smallest singular value above the rank threshold; zero when none.
    pub smallest_retained_singular_value: f64,
}

/// Rank test of `H_L(u)` against `mL`.
pub fn is_persistently_exciting(u: &DMatrix<f64>, order: usize) -> PeReport {
    let required = u.nrows() * order;
    let not_pe = PeReport {
        order,
        rank: 0,
        required,
        persistently_exciting: false,
        smallest_retained_singular_value: 0.0,
    };
    let Ok(h) = hankel(u, order) else {
        return not_pe;
    };
    let svd = ThinSvd::new(h.matrix());
    let smax = svd.sigma_max();
    if smax == 0.0 {
        return not_pe;
    }
    let tol = default_rank_tolerance(h.matrix.nrows(), h.matrix.ncols(), smax);
    let rank = svd.rank(tol);
    PeReport {
        order,
        rank,
        required,
        persistently_exciting: rank == required,
        smallest_retained_singular_value: svd.singular_values[rank - 1],
    }
}

/// Which output sequence of a [`DataRecord`] to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum View {
    Clean,
    Noisy,
}

/// Offline excitation experiment with clean and noisy outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    u: DMatrix<f64>,
    y: DMatrix<f64>,
    y_noisy: DMatrix<f64>,
    noise_bound: f64,
    seed: u64,
    prefix: usize,
}

/// Metadata stored next to the CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSidecar {
    pub eps_bar: f64,
    pub seed: u64,
    #[serde(rename = "N")]
    pub samples: usize,
    #[serde(rename = "n")]
    pub prefix: usize,
}

impl DataRecord {
    /// All three signals span `N + n` samples; `prefix` is `n`.
    pub fn new(
        u: DMatrix<f64>,
        y: DMatrix<f64>,
        y_noisy: DMatrix<f64>,
        noise_bound: f64,
        seed: u64,
        prefix: usize,
    ) -> Result<Self> {
        if prefix == 0 {
            return Err(Error::dim("data record needs a prefix of at least one sample"));
        }
        let total = u.ncols();
        if y.ncols() != total || y_noisy.ncols() != total {
            return Err(Error::dim(format!(
                "signal lengths differ: u {}, y {}, ytilde {}",
                total,
                y.ncols(),
                y_noisy.ncols()
            )));
        }
        if y.nrows() != y_noisy.nrows() {
            return Err(Error::dim("clean and noisy outputs have different dimensions"));
        }
        if u.nrows() == 0 || y.nrows() == 0 {
            return Err(Error::dim("empty signal dimension"));
        }
        if total <= prefix {
            return Err(Error::dim(format!("record of {total} samples leaves none after the {prefix}-sample prefix")));
        }
        if !(noise_bound >= 0.0 && noise_bound.is_finite()) {
            return Err(Error::invalid(format!("noise bound must be finite and nonnegative, got {noise_bound}")));
        }
        if [&u, &y, &y_noisy].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite sample in data record"));
        }
        for (k, (a, b)) in y.column_iter().zip(y_noisy.column_iter()).enumerate() {
            for (ya, yb) in a.iter().zip(b.iter()) {
                // ỹ = y + ε is rounded once; allow that rounding.
                let slack = 4.0 * f64::EPSILON * ya.abs().max(yb.abs());
                if (yb - ya).abs() > noise_bound + slack {
                    return Err(Error::invalid(format!(
                        "noisy sample at record index {k} deviates by {} > bound {noise_bound}",
                        (yb - ya).abs()
                    )));
                }
            }
        }
        Ok(Self { u, y, y_noisy, noise_bound, seed, prefix })
    }

    /// Effective data length `N`.
    pub fn len(&self) -> usize {
        self.u.ncols() - self.prefix
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prefix length `n`.
    pub fn prefix(&self) -> usize {
        self.prefix
    }
    pub fn inputs(&self) -> usize {
        self.u.nrows()
    }
    pub fn outputs(&self) -> usize {
        self.y.nrows()
    }
    pub fn noise_bound(&self) -> f64 {
        self.noise_bound
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Full input record, prefix included.
    pub fn u_record(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn y_record(&self, view: View) -> &DMatrix<f64> {
        match view {
            View::Clean => &self.y,
            View::Noisy => &self.y_noisy,
        }
    }

    /// `u^d_{[0,N−1]}`.
    pub fn u(&self) -> DMatrix<f64> {
        self.u.columns(self.prefix, self.len()).into_owned()
    }

    /// `y^d_{[0,N−1]}` or `ỹ^d_{[0,N−1]}`.
    pub fn y(&self, view: View) -> DMatrix<f64> {
        self.y_record(view).columns(self.prefix, self.len()).into_owned()
    }

    /// Input at sample `k ∈ [−n, N−1]`.
    pub fn u_at(&self, k: isize) -> DVector<f64> {
        self.u.column(self.record_index(k)).into_owned()
    }

    pub fn y_at(&self, view: View, k: isize) -> DVector<f64> {
        self.y_record(view).column(self.record_index(k)).into_owned()
    }

    fn record_index(&self, k: isize) -> usize {
        let idx = k + self.prefix as isize;
        assert!(idx >= 0 && (idx as usize) < self.u.ncols(), "sample {k} outside record");
        idx as usize
    }

    pub fn hankel_u(&self, depth: usize) -> Result<HankelMatrix> {
        hankel(&self.u(), depth)
    }

    pub fn hankel_y(&self, view: View, depth: usize) -> Result<HankelMatrix> {
        hankel(&self.y(view), depth)
    }

    /// `[H_L(u^d); H_L(y^d)]`.
    pub fn stacked_hankel(&self, view: View, depth: usize) -> Result<DMatrix<f64>> {
        let hu = self.hankel_u(depth)?.into_matrix();
        let hy = self.hankel_y(view, depth)?.into_matrix();
        let mut out = DMatrix::zeros(hu.nrows() + hy.nrows(), hu.ncols());
        out.rows_mut(0, hu.nrows()).copy_from(&hu);
        out.rows_mut(hu.nrows(), hy.nrows()).copy_from(&hy);
        Ok(out)
    }

    pub fn persistence_of_excitation(&self, order: usize) -> PeReport {
        is_persistently_exciting(&self.u(), order)
    }

    pub fn sidecar(&self) -> DataSidecar {
        DataSidecar { eps_bar: self.noise_bound, seed: self.seed, samples: self.len(), prefix: self.prefix }
    }

    /// Writes the CSV table; `k` runs from `−n` to `N−1`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let (m, p) = (self.inputs(), self.outputs());
        let mut header = vec!["k".to_string()];
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.extend((1..=p).map(|i| format!("y_{i}")));
        header.extend((1..=p).map(|i| format!("ytilde_{i}")));
        w.write_record(&header)?;
        for col in 0..self.u.ncols() {
            let mut row = vec![(col as isize - self.prefix as isize).to_string()];
            row.extend(self.u.column(col).iter().map(|v| fmt_f64(*v)));
            row.extend(self.y.column(col).iter().map(|v| fmt_f64(*v)));
            row.extend(self.y_noisy.column(col).iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the CSV table together with its sidecar.
    pub fn read_csv<R: Read>(reader: R, sidecar: &DataSidecar) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names.first() != Some(&"k") {
            return Err(Error::Parse("data CSV must start with column `k`".into()));
        }
        let count = |prefix: &str| names.iter().filter(|h| h.starts_with(prefix)).count();
        let m = count("u_");
        let p = count("y_");
        if m == 0 || p == 0 || count("ytilde_") != p || names.len() != 1 + m + 2 * p {
            return Err(Error::Parse(format!("unexpected data CSV header: {}", names.join(","))));
        }
        for (i, name) in names[1..].iter().enumerate() {
            let expected = if i < m {
                format!("u_{}", i + 1)
            } else if i < m + p {
                format!("y_{}", i - m + 1)
            } else {
                format!("ytilde_{}", i - m - p + 1)
            };
            if *name != expected {
                return Err(Error::Parse(format!("column {} is `{name}`, expected `{expected}`", i + 1)));
            }
        }
        let total = sidecar
            .samples
            .checked_add(sidecar.prefix)
            .ok_or_else(|| Error::Parse("sidecar sample count overflows".into()))?;
        let mut u = Vec::new();
        let mut y = Vec::new();
        let mut yt = Vec::new();
        let mut rows = 0usize;
        for (idx, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != names.len() {
                return Err(Error::Parse(format!("row {idx} has {} fields", record.len())));
            }
            if idx >= total {
                return Err(Error::Parse(format!("more than N + n = {total} rows")));
            }
            let k: isize = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {idx}: bad index `{}`", &record[0])))?;
            if k != idx as isize - sidecar.prefix as isize {
                return Err(Error::Parse(format!("row {idx}: index {k} out of sequence")));
            }
            for (j, field) in record.iter().enumerate().skip(1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {idx}, column {j}: bad number `{field}`")))?;
                if j <= m {
                    u.push(v);
                } else if j <= m + p {
                    y.push(v);
                } else {
                    yt.push(v);
                }
            }
            rows += 1;
        }
        if rows != total {
            return Err(Error::Parse(format!("expected N + n = {total} rows, found {rows}")));
        }
        Self::new(
            DMatrix::from_vec(m, rows, u),
            DMatrix::from_vec(p, rows, y),
            DMatrix::from_vec(p, rows, yt),
            sidecar.eps_bar,
            sidecar.seed,
            sidecar.prefix,
        )
    }

    /// Writes `path` (CSV) and its sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: DataSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        Self::read_csv(std::fs::File::open(path)?, &sidecar)
    }
}

/// `data.csv` → `data.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// 17 significant digits, which round-trips every `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `(H_L(u^d) α, H_L(y^d) α)`.
pub fn trajectory_from_alpha(data: &DataRecord, view: View, depth: usize, alpha: &DVector<f64>) -> Result<Trajectory> {
    let hu = data.hankel_u(depth)?;
    let hy = data.hankel_y(view, depth)?;
    if alpha.len() != hu.ncols() {
        return Err(Error::dim(format!("alpha has length {}, Hankel matrix has {} columns", alpha.len(), hu.ncols())));
    }
    let u = hu.matrix() * alpha;
    let y = hy.matrix() * alpha;
    Trajectory::from_stacked(u.as_slice(), y.as_slice(), data.inputs(), data.outputs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    /// `‖[H_u; H_y] α − [ū; ȳ]‖₂`.
    pub residual: f64,
    /// Minimum-norm least-squares weights.
    pub alpha: DVector<f64>,
}

/// Column space of `[H_L(u^d); H_L(y^d)]`, factorised once for repeated
/// membership queries.
pub struct TrajectorySpace {
    depth: usize,
    m: usize,
    p: usize,
    stacked: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl TrajectorySpace {
    pub fn new(data: &DataRecord, view: View, depth: usize) -> Result<Self> {
        let stacked = data.stacked_hankel(view, depth)?;
        let svd = ThinSvd::new(&stacked);
        let pinv = svd.pseudoinverse(svd.default_tolerance());
        Ok(Self { depth, m: data.inputs(), p: data.outputs(), stacked, pinv })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn membership(&self, candidate: &Trajectory) -> Result<Membership> {
        if candidate.len() != self.depth || candidate.u().nrows() != self.m || candidate.y().nrows() != self.p {
            return Err(Error::dim(format!(
                "candidate of length {} ({}x{} signals) does not match depth {}",
                candidate.len(),
                candidate.u().nrows(),
                candidate.y().nrows(),
                self.depth
            )));
        }
        let mut w = DVector::zeros(self.stacked.nrows());
        let mu = self.m * self.depth;
        w.rows_mut(0, mu).copy_from(&candidate.stacked_u());
        w.rows_mut(mu, self.p * self.depth).copy_from(&candidate.stacked_y());
        let alpha = &self.pinv * &w;
        let residual = (&self.stacked * &alpha - w).norm();
        Ok(Membership { residual, alpha })
    }
}

/// Least-squares fit of `candidate` by Hankel columns of the clean data.
pub fn membership_residual(data: &DataRecord, candidate: &Trajectory) -> Result<Membership> {
    TrajectorySpace::new(data, View::Clean, candidate.len())?.membership(candidate)
}

/// Relative threshold separating the zero-input response subspace from
/// rounding noise.
const ZERO_INPUT_RTOL: f64 = 1e-8;

/// Orthonormal basis of `{y : (0, y)` is a length-`W` trajectory`}`, from
/// the clean data.
///
/// The record's prefix length serves as the order bound `n`; a basis with
/// more than `n` columns means the data is inconsistent with that bound.
pub fn zero_input_output_basis(data: &DataRecord, window: usize) -> Result<DMatrix<f64>> {
    let n = data.prefix();
    let pe = data.persistence_of_excitation(window + n);
    if !pe.persistently_exciting {
        return Err(Error::InsufficientExcitation(format!(
            "input not persistently exciting of order {} (rank {} of {})",
            window + n,
            pe.rank,
            pe.required
        )));
    }
    let hu = data.hankel_u(window)?.into_matrix();
    let hy = data.hankel_y(View::Clean, window)?.into_matrix();
    // H_y restricted to ker H_u: H_y (I − H_u^† H_u).
    let hu_pinv = crate::solver::pseudoinverse(&hu);
    let restricted = &hy - (&hy * hu_pinv) * &hu;
    let svd = ThinSvd::new(&restricted);
    let smax = svd.sigma_max();
    if smax == 0.0 {
        return Ok(DMatrix::zeros(hy.nrows(), 0));
    }
    let basis = svd.range_basis(ZERO_INPUT_RTOL * smax);
    if basis.ncols() > n {
        return Err(Error::Estimation(format!(
            "zero-input output space has dimension {} > order bound {n}; data is not noise-free or n is too small",
            basis.ncols()
        )));
    }
    Ok(basis)
}

/// `ξ = (u_{[t−n,t−1]}, y_{[t−n,t−1]})`, inputs stacked above outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState(pub DVector<f64>);

impl ExtendedState {
    /// From `m × n` and `p × n` windows, oldest sample first.
    pub fn from_window(u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::dim("input and output windows differ in length"));
        }
        let mut v = Vec::with_capacity(u.len() + y.len());
        v.extend_from_slice(u.as_slice());
        v.extend_from_slice(y.as_slice());
        Ok(Self(DVector::from_vec(v)))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }
}

/// Matrix whose column `k` is `ξ_k`, for `k = 0..N−L−n`.
pub fn extended_state_matrix(data: &DataRecord, view: View, horizon: usize) -> Result<DMatrix<f64>> {
    let n = data.prefix();
    let (m, p) = (data.inputs(), data.outputs());
    let count = (data.len() + 1)
        .checked_sub(horizon + n)
        .filter(|&c| c > 0)
        .ok_or_else(|| Error::dim(format!("N = {} too short for horizon {horizon} with n = {n}", data.len())))?;
    let ys = data.y_record(view);
    let mut out = DMatrix::zeros(n * (m + p), count);
    for k in 0..count {
        // Record columns k..k+n−1 hold samples k−n..k−1.
        for j in 0..n {
            out.view_mut((j * m, k), (m, 1)).copy_from(&data.u.column(k + j));
            out.view_mut((n * m + j * p, k), (p, 1)).copy_from(&ys.column(k + j));
        }
    }
    Ok(out)
}

pub fn extended_state_sequence(data: &DataRecord, view: View, horizon: usize) -> Result<Vec<ExtendedState>> {
    let mat = extended_state_matrix(data, view, horizon)?;
    Ok(mat.column_iter().map(|c| ExtendedState(c.into_owned())).collect())
}

/// `H_{uξ} = [H_{L+n}(u^d); H_1(ξ^d_{[0,N−L−n]})]`.
pub fn build_h_uxi(data: &DataRecord, view: View, horizon: usize) -> Result<DMatrix<f64>> {
    let hu = data.hankel_u(horizon + data.prefix())?.into_matrix();
    let xi = extended_state_matrix(data, view, horizon)?;
    debug_assert_eq!(hu.ncols(), xi.ncols());
    let mut out = DMatrix::zeros(hu.nrows() + xi.nrows(), hu.ncols());
    out.rows_mut(0, hu.nrows()).copy_from(&hu);
    out.rows_mut(hu.nrows(), xi.nrows()).copy_from(&xi);
    Ok(out)
}
