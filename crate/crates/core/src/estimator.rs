//! Covariance-based recovery of dynamic-load time constants, plus the
//! linear-system machinery used to validate it.
//!
//! Around the ambient equilibrium the load states form a stationary vector
//! Ornstein–Uhlenbeck process, so the state matrix, input matrix and
//! stationary covariance are tied together by the Lyapunov equation
//! `A·C + C·Aᵀ = −B·Bᵀ`. With the state matrix well approximated by
//! `−diag(V²/τ)` blocks, the stationary covariances collapse to closed
//! form — `C_gg = ½·T_g⁻¹(P^s)²(Σ^p)²V⁻²`, `C_bb` analogously, and the
//! cross-covariance vanishes — which inverts directly for the time
//! constants:
//!
//! ```text
//! T_g = ½ (P^s)² (Σ^p)² V̄⁻² Q_gg⁻¹
//! T_b = ½ (Q^s)² (Σ^q)² V̄⁻² Q_bb⁻¹
//! ```
//!
//! where `V̄`, `Q_gg`, `Q_bb` are the sample mean voltage and sample
//! covariance matrices measured over a window of PMU reports.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

use crate::cases::NetworkCase;
use crate::numfmt::fmt_f64;
use crate::pmu::AdmittanceSeries;
use crate::sim::{DynamicModel, SimError};

/// Condition-number ceiling beyond which a sample covariance is treated as
/// numerically singular.
pub const MAX_CONDITION_NUMBER: f64 = 1e12;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("empty series")]
    EmptySeries,
    #[error("need at least 2 samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sample covariance is singular or ill-conditioned (cond = {cond:.3e})")]
    SingularCovariance { cond: f64 },
    #[error("state matrix is not Hurwitz (max eigenvalue real part = {max_re:.3e})")]
    NotHurwitz { max_re: f64 },
    #[error("Lyapunov solve failed: {0}")]
    LyapunovSolve(String),
    #[error("linearization failed: {0}")]
    Linearization(#[from] SimError),
}

/// Which reading of the closed-form inversion to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMethod {
    /// Invert the full sample covariance matrix and read the diagonal of
    /// the resulting `T` matrix (the literal closed form).
    MatrixInverse,
    /// Ignore off-diagonal covariance entries: `τ̂_k` from the reciprocal
    /// of the k-th diagonal entry alone.
    DiagonalReciprocal,
}

impl std::fmt::Display for EstimationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimationMethod::MatrixInverse => write!(f, "matrix-inverse"),
            EstimationMethod::DiagonalReciprocal => write!(f, "diagonal-reciprocal"),
        }
    }
}

/// Prior-known static characteristics of the monitored loads, as diagonal
/// vectors in ascending monitored-bus order.
#[derive(Debug, Clone)]
pub struct LoadStaticCharacteristics {
    pub buses: Vec<usize>,
    pub p_s: DVector<f64>,
    pub q_s: DVector<f64>,
    pub sigma_p: DVector<f64>,
    pub sigma_q: DVector<f64>,
}

impl LoadStaticCharacteristics {
    /// Extract the characteristics of the given dynamic-load buses from a case.
    pub fn from_case(case: &NetworkCase, buses: &[usize]) -> Result<Self, EstimatorError> {
        let mut p_s = Vec::new();
        let mut q_s = Vec::new();
        let mut sp = Vec::new();
        let mut sq = Vec::new();
        for &bus in buses {
            let load = case.dynamic_loads.get(&bus).ok_or_else(|| {
                EstimatorError::DimensionMismatch(format!("bus {bus} has no dynamic load"))
            })?;
            p_s.push(load.p_s);
            q_s.push(load.q_s);
            sp.push(load.sigma_p);
            sq.push(load.sigma_q);
        }
        Ok(LoadStaticCharacteristics {
            buses: buses.to_vec(),
            p_s: DVector::from_vec(p_s),
            q_s: DVector::from_vec(q_s),
            sigma_p: DVector::from_vec(sp),
            sigma_q: DVector::from_vec(sq),
        })
    }
}

/// Sample statistics of an admittance series over one estimation window.
#[derive(Debug, Clone)]
pub struct SampleStatistics {
    /// Mean voltage magnitude per monitored bus (diagonal of `V̄`).
    pub v_bar: DVector<f64>,
    pub q_gg: DMatrix<f64>,
    pub q_bb: DMatrix<f64>,
    pub n: usize,
    /// Time span of the samples used, seconds.
    pub window: f64,
}

/// Per-bus arithmetic mean of the voltage magnitude samples.
pub fn sample_mean_voltage(series: &AdmittanceSeries) -> Result<DVector<f64>, EstimatorError> {
    let n = series.len();
    if n == 0 {
        return Err(EstimatorError::EmptySeries);
    }
    Ok(series.v_mag.row_mean().transpose())
}

/// Unbiased sample cross-covariance of two multichannel series
/// (`n × m` matrices, one row per sample): `Σ_i (x_i − x̄)(y_i − ȳ)ᵀ/(n−1)`.
pub fn sample_covariance(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>, EstimatorError> {
    let n = x.nrows();
    if n != y.nrows() || x.ncols() != y.ncols() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    if n < 2 {
        return Err(EstimatorError::TooFewSamples { n });
    }
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let mut xc = x.clone();
    let mut yc = y.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }
    Ok(xc.transpose() * yc / (n as f64 - 1.0))
}

/// Steps 1–2 of the estimation algorithm: mean voltage and the two sample
/// covariance matrices of an admittance series.
pub fn compute_statistics(series: &AdmittanceSeries) -> Result<SampleStatistics, EstimatorError> {
    let v_bar = sample_mean_voltage(series)?;
    let q_gg = sample_covariance(&series.g, &series.g)?;
    let q_bb = sample_covariance(&series.b, &series.b)?;
    let window = series.t.last().unwrap() - series.t.first().unwrap();
    Ok(SampleStatistics {
        v_bar,
        q_gg,
        q_bb,
        n: series.len(),
        window,
    })
}

/// Model-mismatch and conditioning diagnostics of an estimate.
#[derive(Debug, Clone)]
pub struct EstimationDiagnostics {
    /// `‖Q − diag(Q)‖_F / ‖diag(Q)‖_F` for the conductance covariance.
    pub offdiag_energy_g: f64,
    pub offdiag_energy_b: f64,
    pub cond_q_gg: f64,
    pub cond_q_bb: f64,
}

/// Per-load time-constant estimates with diagnostics.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub buses: Vec<usize>,
    pub tau_g_hat: Vec<f64>,
    pub tau_b_hat: Vec<f64>,
    /// Indices whose τ̂_g came out non-positive or non-finite.
    pub invalid_g: Vec<usize>,
    pub invalid_b: Vec<usize>,
    pub method: EstimationMethod,
    pub stats: SampleStatistics,
    pub diagnostics: EstimationDiagnostics,
}

impl EstimationResult {
    pub fn all_valid(&self) -> bool {
        self.invalid_g.is_empty() && self.invalid_b.is_empty()
    }
}

fn offdiag_energy(q: &DMatrix<f64>) -> f64 {
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..q.nrows() {
        for j in 0..q.ncols() {
            let x = q[(i, j)] * q[(i, j)];
            if i == j {
                diag += x;
            } else {
                off += x;
            }
        }
    }
    (off / diag.max(f64::MIN_POSITIVE)).sqrt()
}

fn condition_number(q: &DMatrix<f64>) -> f64 {
    let sv = q.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Per-channel inversion of the closed-form covariance relation.
fn invert_channel(
    q: &DMatrix<f64>,
    demand: &DVector<f64>,
    sigma: &DVector<f64>,
    v_bar: &DVector<f64>,
    method: EstimationMethod,
) -> Result<(Vec<f64>, Vec<usize>), EstimatorError> {
    let m = demand.len();
    let scale = |k: usize| (demand[k] * sigma[k]).powi(2) / (2.0 * v_bar[k] * v_bar[k]);
    let taus: Vec<f64> = match method {
        EstimationMethod::MatrixInverse => {
            let cond = condition_number(q);
            if !cond.is_finite() || cond > MAX_CONDITION_NUMBER {
                return Err(EstimatorError::SingularCovariance { cond });
            }
            let inv = q
                .clone()
                .try_inverse()
                .ok_or(EstimatorError::SingularCovariance { cond })?;
            (0..m).map(|k| scale(k) * inv[(k, k)]).collect()
        }
        EstimationMethod::DiagonalReciprocal => (0..m).map(|k| scale(k) / q[(k, k)]).collect(),
    };
    let invalid = taus
        .iter()
        .enumerate()
        .filter(|(_, &t)| !(t.is_finite() && t > 0.0))
        .map(|(k, _)| k)
        .collect();
    Ok((taus, invalid))
}

/// Step 3 of the estimation algorithm: recover the per-load time constants
/// from sample statistics and prior-known static characteristics.
///
/// Non-positive or non-finite estimates are reported in the `invalid_*`
/// index lists rather than clamped or dropped.
pub fn estimate_time_constants(
    stats: &SampleStatistics,
    chars: &LoadStaticCharacteristics,
    method: EstimationMethod,
) -> Result<EstimationResult, EstimatorError> {
    let m = chars.p_s.len();
    if stats.q_gg.nrows() != m || stats.v_bar.len() != m {
        return Err(EstimatorError::DimensionMismatch(format!(
            "statistics for {} loads, characteristics for {m}",
            stats.q_gg.nrows()
        )));
    }
    let (tau_g_hat, invalid_g) =
        invert_channel(&stats.q_gg, &chars.p_s, &chars.sigma_p, &stats.v_bar, method)?;
    let (tau_b_hat, invalid_b) =
        invert_channel(&stats.q_bb, &chars.q_s, &chars.sigma_q, &stats.v_bar, method)?;
    let diagnostics = EstimationDiagnostics {
        offdiag_energy_g: offdiag_energy(&stats.q_gg),
        offdiag_energy_b: offdiag_energy(&stats.q_bb),
        cond_q_gg: condition_number(&stats.q_gg),
        cond_q_bb: condition_number(&stats.q_bb),
    };
    Ok(EstimationResult {
        buses: chars.buses.clone(),
        tau_g_hat,
        tau_b_hat,
        invalid_g,
        invalid_b,
        method,
        stats: stats.clone(),
        diagnostics,
    })
}

/// Which linearization of the load subsystem to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearizationVariant {
    /// Voltage held constant: `A = blockdiag(−T_g⁻¹V², −T_b⁻¹V²)`.
    Approximate,
    /// Demand sensitivities measured by central finite differences through
    /// the full algebraic network solve, capturing the voltage feedback the
    /// approximate variant drops.
    Exact,
}

/// The `(A, B)` pair of the linearized load subsystem, states ordered
/// `[g_1..g_m, b_1..b_m]`.
#[derive(Debug, Clone)]
pub struct LinearizedLoadSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub variant: LinearizationVariant,
}

/// Build the linearized load subsystem around the model's equilibrium.
pub fn build_linearized_system(
    model: &DynamicModel,
    variant: LinearizationVariant,
) -> Result<LinearizedLoadSystem, EstimatorError> {
    let m = model.loads.len();
    let eq = model.equilibrium();
    let mut a = DMatrix::zeros(2 * m, 2 * m);
    let mut b = DMatrix::zeros(2 * m, 2 * m);
    for (k, (bus, p)) in model.loads.iter().enumerate() {
        let v2 = eq.v[bus - 1] * eq.v[bus - 1];
        b[(k, k)] = p.p_s * p.sigma_p / p.tau_g;
        b[(m + k, m + k)] = p.q_s * p.sigma_q / p.tau_b;
        if variant == LinearizationVariant::Approximate {
            a[(k, k)] = -v2 / p.tau_g;
            a[(m + k, m + k)] = -v2 / p.tau_b;
        }
    }
    if variant == LinearizationVariant::Approximate {
        return Ok(LinearizedLoadSystem { a, b, variant });
    }

    // Exact variant: ∂P/∂g, ∂P/∂b, ∂Q/∂g, ∂Q/∂b by central differences,
    // re-solving the network (machine angles frozen) at each perturbation.
    let h = 1e-4;
    let fd_tol = 1e-12;
    let demands = |state: &mut crate::sim::SystemState| -> Result<(DVector<f64>, DVector<f64>), EstimatorError> {
        let mut p_full = DVector::zeros(model.y_aug.n());
        let mut q_full = DVector::zeros(model.y_aug.n());
        model.solve_algebraic(state, &mut p_full, &mut q_full, fd_tol)?;
        let mut p = DVector::zeros(m);
        let mut q = DVector::zeros(m);
        for (k, (bus, _)) in model.loads.iter().enumerate() {
            let v2 = state.v[bus - 1] * state.v[bus - 1];
            p[k] = state.g[k] * v2;
            q[k] = state.b[k] * v2;
        }
        Ok((p, q))
    };

    for j in 0..m {
        for channel in 0..2 {
            let mut plus = eq.clone();
            let mut minus = eq.clone();
            if channel == 0 {
                plus.g[j] += h;
                minus.g[j] -= h;
            } else {
                plus.b[j] += h;
                minus.b[j] -= h;
            }
            let (pp, qp) = demands(&mut plus)?;
            let (pm, qm) = demands(&mut minus)?;
            for k in 0..m {
                let dp = (pp[k] - pm[k]) / (2.0 * h);
                let dq = (qp[k] - qm[k]) / (2.0 * h);
                let (tau_g, tau_b) = (model.loads[k].1.tau_g, model.loads[k].1.tau_b);
                let col = if channel == 0 { j } else { m + j };
                a[(k, col)] = -dp / tau_g;
                a[(m + k, col)] = -dq / tau_b;
            }
        }
    }
    Ok(LinearizedLoadSystem { a, b, variant })
}

/// Closed-form stationary covariance of the approximate system:
/// diagonal `C_gg = ½(P^sσ^p)²/(τ_g V²)·τ_g/...` — concretely
/// `C_gg[k,k] = (P_k^s σ_k^p)² / (2 τ_gk V_k²)` and the analogous `C_bb`
/// block, zero elsewhere.
pub fn closed_form_covariance(model: &DynamicModel) -> DMatrix<f64> {
    let m = model.loads.len();
    let eq = model.equilibrium();
    let mut c = DMatrix::zeros(2 * m, 2 * m);
    for (k, (bus, p)) in model.loads.iter().enumerate() {
        let v2 = eq.v[bus - 1] * eq.v[bus - 1];
        c[(k, k)] = (p.p_s * p.sigma_p).powi(2) / (2.0 * p.tau_g * v2);
        c[(m + k, m + k)] = (p.q_s * p.sigma_q).powi(2) / (2.0 * p.tau_b * v2);
    }
    c
}

/// Solve `A·C + C·Aᵀ = −B·Bᵀ` for the stationary covariance of a stable
/// linear SDE, by direct dense solution of the Kronecker-product system.
///
/// `A` must be Hurwitz; this is checked and a [`EstimatorError::NotHurwitz`]
/// returned otherwise. The result is symmetrized and its residual verified
/// to `1e−10` relative.
pub fn lyapunov_stationary_covariance(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>, EstimatorError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(EstimatorError::DimensionMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let eigs = a.clone().complex_eigenvalues();
    let max_re = eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    if max_re >= 0.0 {
        return Err(EstimatorError::NotHurwitz { max_re });
    }

    let bbt = b * b.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let system = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DVector::from_column_slice((-&bbt).as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| EstimatorError::LyapunovSolve("singular Kronecker system".into()))?;
    let c = DMatrix::from_column_slice(n, n, sol.as_slice());
    let c = (&c + c.transpose()) * 0.5;

    let residual = (a * &c + &c * a.transpose() + &bbt).norm();
    let scale = bbt.norm();
    if residual > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(EstimatorError::LyapunovSolve(format!(
            "residual {residual:.3e} exceeds 1e-10 relative to ‖BBᵀ‖ = {scale:.3e}"
        )));
    }
    Ok(c)
}

/// Write an estimation result as CSV, Table-style: one row per monitored
/// bus with optional ground-truth columns.
pub fn write_result_csv<P: AsRef<Path>>(
    result: &EstimationResult,
    truth: Option<(&[f64], &[f64])>,
    path: P,
) -> Result<(), std::io::Error> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "bus,tau_g_true,tau_g_hat,err_g_pct,tau_b_true,tau_b_hat,err_b_pct"
    )?;
    for (k, &bus) in result.buses.iter().enumerate() {
        let (tg_true, eg, tb_true, eb) = match truth {
            Some((tg, tb)) => (
                fmt_f64(tg[k]),
                fmt_f64(percent_error(tg[k], result.tau_g_hat[k])),
                fmt_f64(tb[k]),
                fmt_f64(percent_error(tb[k], result.tau_b_hat[k])),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        writeln!(
            w,
            "{bus},{tg_true},{},{eg},{tb_true},{},{eb}",
            fmt_f64(result.tau_g_hat[k]),
            fmt_f64(result.tau_b_hat[k]),
        )?;
    }
    w.flush()
}

/// Percent error convention used throughout: `|actual − estimated|/|actual|·100`.
pub fn percent_error(actual: f64, estimated: f64) -> f64 {
    (actual - estimated).abs() / actual.abs() * 100.0
}
