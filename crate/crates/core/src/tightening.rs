//! Output-constraint tightening coefficients `a_{1..4,k}`.
//!
//! Entries `k < n` use `ρ_n^max` uniformly; a `k`-specific `ρ_{n+k}` would
//! be tighter but the uniform choice is what the stability argument uses.
//! The coefficients are computed once and frozen before the loop starts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::constants::SystemConstants;
use crate::error::{Error, Result};
use crate::hankel::fmt_f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TighteningInputs {
    pub eps_bar: f64,
    #[serde(rename = "L")]
    pub horizon: usize,
    pub n: usize,
    pub constants: SystemConstants,
}

/// Four arrays indexed `k ∈ [0, L − n − 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TighteningCoefficients {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub a3: Vec<f64>,
    pub a4: Vec<f64>,
    pub inputs: TighteningInputs,
}

pub fn compute_coefficients(
    constants: &SystemConstants,
    eps_bar: f64,
    horizon: usize,
    n: usize,
) -> Result<TighteningCoefficients> {
    if !(eps_bar >= 0.0 && eps_bar.is_finite()) {
        return Err(Error::invalid(format!("noise bound must be finite and nonnegative, got {eps_bar}")));
    }
    if n == 0 || horizon < 2 * n {
        return Err(Error::invalid(format!("need L >= 2n with n >= 1, got L = {horizon}, n = {n}")));
    }
    if constants.n != n || constants.horizon != horizon || constants.rho.len() != horizon {
        return Err(Error::invalid(format!(
            "constants cover n = {}, L = {} ({} rho values); requested n = {n}, L = {horizon}",
            constants.n,
            constants.horizon,
            constants.rho.len()
        )));
    }
    let eps = eps_bar;
    let rho = |k: usize| constants.rho(k);
    let (gamma, c_pe, xi_max) = (constants.gamma, constants.c_pe, constants.xi_max);
    let (rho_n_max, rho_l_max) = (constants.rho_n_max, constants.rho_l_max);

    let len = horizon - n;
    let mut a1 = vec![0.0; len];
    let mut a2 = vec![0.0; len];
    let mut a3 = vec![0.0; len];
    let mut a4 = vec![0.0; len];
    for k in 0..n {
        a3[k] = 1.0 + rho_n_max;
        a2[k] = eps * a3[k];
        a4[k] = eps * rho_n_max;
    }
    for k in 0..horizon - 2 * n {
        let carry = (a2[k] + a3[k] * eps) * c_pe;
        a1[k + n] = a1[k] + carry;
        a3[k + n] = 1.0 + rho(2 * n + k) + gamma * (1.0 + rho_l_max) * a1[k + n];
        a2[k + n] = eps * a3[k + n];
        a4[k + n] = a4[k]
            + eps * rho(2 * n + k)
            + eps * a1[k + n] * gamma * rho_l_max
            + eps * a3[k]
            + carry * xi_max;
    }
    Ok(TighteningCoefficients {
        a1,
        a2,
        a3,
        a4,
        inputs: TighteningInputs { eps_bar, horizon, n, constants: constants.clone() },
    })
}

impl TighteningCoefficients {
    pub fn len(&self) -> usize {
        self.a1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a1.is_empty()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `k,a1,a2,a3,a4` table.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "a1", "a2", "a3", "a4"])?;
        for k in 0..self.len() {
            w.write_record([
                k.to_string(),
                fmt_f64(self.a1[k]),
                fmt_f64(self.a2[k]),
                fmt_f64(self.a3[k]),
                fmt_f64(self.a4[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `a1[k]‖ū‖₁ + a2[k]‖α‖₁ + a3[k]‖σ‖_∞ + a4[k]`.
pub fn tightened_margin(coeffs: &TighteningCoefficients, k: usize, u_l1: f64, alpha_l1: f64, sigma_inf: f64) -> Result<f64> {
    if k >= coeffs.len() {
        return Err(Error::invalid(format!("index {k} outside [0, {}]", coeffs.len().saturating_sub(1))));
    }
    Ok(coeffs.a1[k] * u_l1 + coeffs.a2[k] * alpha_l1 + coeffs.a3[k] * sigma_inf + coeffs.a4[k])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecheckReport {
    pub y_max: f64,
    /// Indices with `a4[k] ≥ y_max`.
    pub flagged: Vec<usize>,
    pub max_a4: f64,
    /// Largest noise bound without flags, other constants held fixed.
    pub max_admissible_eps: f64,
}

impl PrecheckReport {
    pub fn feasible(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn table(&self, coeffs: &TighteningCoefficients) -> String {
        let mut out = format!("k    a4[k]                   y_max = {}\n", self.y_max);
        for (k, a4) in coeffs.a4.iter().enumerate() {
            let flag = if self.flagged.contains(&k) { "  INFEASIBLE" } else { "" };
            out.push_str(&format!("{k:<4} {a4:<23.16e}{flag}\n"));
        }
        out.push_str(&format!("largest admissible eps_bar: {:.6e}\n", self.max_admissible_eps));
        out
    }
}

const PRECHECK_BISECTIONS: usize = 20;

/// Flags every `k` whose constant offset alone exhausts `y_max`.
pub fn feasibility_precheck(coeffs: &TighteningCoefficients, y_max: f64) -> Result<PrecheckReport> {
    let flags = |c: &TighteningCoefficients| -> Vec<usize> { (0..c.len()).filter(|&k| c.a4[k] >= y_max).collect() };
    let flagged = flags(coeffs);
    let max_a4 = coeffs.a4.iter().copied().fold(0.0, f64::max);
    let inputs = &coeffs.inputs;
    let admissible = |eps: f64| -> Result<bool> {
        let c = compute_coefficients(&inputs.constants, eps, inputs.horizon, inputs.n)?;
        Ok(flags(&c).is_empty())
    };

    let max_admissible_eps = if !(y_max > 0.0) {
        0.0
    } else if y_max.is_infinite() {
        f64::INFINITY
    } else {
        // a4 is increasing in ε̄; bracket then bisect.
        let mut lo = 0.0;
        let mut hi = inputs.eps_bar.max(1e-12);
        let mut doublings = 0;
        while admissible(hi)? {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > 200 {
                return Ok(PrecheckReport { y_max, flagged, max_a4, max_admissible_eps: f64::INFINITY });
            }
        }
        for _ in 0..PRECHECK_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if admissible(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    Ok(PrecheckReport { y_max, flagged, max_a4, max_admissible_eps })
}
