//! Static network model: admittance assembly, bus power injections, and
//! Newton–Raphson power flow.
//!
//! Everything here is expressed in per-unit on a common MVA base with bus
//! ids `1..=N` mapped to matrix indices `0..N`. The power flow establishes
//! the ambient equilibrium: bus voltages, generator internal angles and
//! mechanical powers, and the steady-state demands the dynamic loads relax
//! towards.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::cases::NetworkCase;

/// Errors from network assembly and power-flow solution.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("isolated bus {bus}: no branch is incident to it")]
    IsolatedBus { bus: usize },
    #[error("branch {from}-{to} is invalid: {reason}")]
    InvalidBranch {
        from: usize,
        to: usize,
        reason: String,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("power flow did not converge after {iterations} iterations (max mismatch {max_mismatch:.3e} pu)")]
    NonConvergence {
        iterations: usize,
        max_mismatch: f64,
    },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("voltage collapsed at bus {bus} (|V| = {v:.3e} pu)")]
    VoltageCollapse { bus: usize, v: f64 },
    #[error("invalid case: {0}")]
    BadCase(String),
}

/// Role of a bus in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    /// Angle/voltage reference; absorbs the power balance residual.
    Slack,
    /// Generator (PV) bus: fixed active dispatch and voltage magnitude.
    Generator,
    /// Load bus hosting a dynamic (first-order) load.
    LoadDynamic,
    /// Load bus with constant-power demand only (possibly zero).
    LoadStatic,
}

impl BusKind {
    pub fn is_generator(self) -> bool {
        matches!(self, BusKind::Slack | BusKind::Generator)
    }
}

/// One network bus.
///
/// `voltage_setpoint` is the regulated magnitude for slack/generator buses
/// and the flat-start initial guess for load buses. `p_load`/`q_load` are
/// the static constant-power demands (consumption positive, pu); demand of
/// dynamic loads lives in the case's load parameters instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub voltage_setpoint: f64,
    pub initial_angle: f64,
    #[serde(default)]
    pub p_load: f64,
    #[serde(default)]
    pub q_load: f64,
}

/// A branch (line or transformer) described by its series admittance and
/// total line-charging susceptance, all per-unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub series_conductance: f64,
    pub series_susceptance: f64,
    #[serde(default)]
    pub shunt_susceptance: f64,
}

impl Branch {
    /// Build a branch from series impedance `r + jx` and total charging `b`.
    pub fn from_impedance(from: usize, to: usize, r: f64, x: f64, b: f64) -> Self {
        let d = r * r + x * x;
        Branch {
            from,
            to,
            series_conductance: r / d,
            series_susceptance: -x / d,
            shunt_susceptance: b,
        }
    }
}

/// Real and imaginary parts of the nodal admittance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }
}

/// Assemble the nodal admittance matrix for `n` buses.
///
/// Diagonal entries collect the incident series admittances plus half of
/// each incident branch's charging susceptance; off-diagonals get the
/// negated series admittance. Parallel branches between the same pair sum.
/// Every bus must be touched by at least one branch unless the network is
/// a single bus.
pub fn build_ybus(n: usize, branches: &[Branch]) -> Result<AdmittanceMatrix, GridError> {
    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, n);
    let mut touched = vec![false; n];

    for br in branches {
        if br.from == br.to {
            return Err(GridError::InvalidBranch {
                from: br.from,
                to: br.to,
                reason: "endpoints coincide".into(),
            });
        }
        if br.from == 0 || br.from > n || br.to == 0 || br.to > n {
            return Err(GridError::InvalidBranch {
                from: br.from,
                to: br.to,
                reason: format!("endpoint outside 1..={n}"),
            });
        }
        let (i, j) = (br.from - 1, br.to - 1);
        touched[i] = true;
        touched[j] = true;
        let (gs, bs) = (br.series_conductance, br.series_susceptance);
        g[(i, i)] += gs;
        g[(j, j)] += gs;
        g[(i, j)] -= gs;
        g[(j, i)] -= gs;
        b[(i, i)] += bs + 0.5 * br.shunt_susceptance;
        b[(j, j)] += bs + 0.5 * br.shunt_susceptance;
        b[(i, j)] -= bs;
        b[(j, i)] -= bs;
    }

    if n > 1 {
        if let Some(i) = touched.iter().position(|t| !t) {
            return Err(GridError::IsolatedBus { bus: i + 1 });
        }
    }

    Ok(AdmittanceMatrix { g, b })
}

/// Active and reactive injections at every bus for the given voltage state.
///
/// `P_i = Σ_k V_i V_k (G_ik cos θ_ik + B_ik sin θ_ik)` and
/// `Q_i = Σ_k V_i V_k (G_ik sin θ_ik − B_ik cos θ_ik)`; positive values are
/// power flowing from the bus into the network, so load consumption is the
/// negation.
pub fn bus_injections(
    v: &DVector<f64>,
    theta: &DVector<f64>,
    y: &AdmittanceMatrix,
) -> Result<(DVector<f64>, DVector<f64>), GridError> {
    let n = y.n();
    if v.len() != n {
        return Err(GridError::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    if theta.len() != n {
        return Err(GridError::DimensionMismatch {
            expected: n,
            got: theta.len(),
        });
    }
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for i in 0..n {
        let (vi, ti) = (v[i], theta[i]);
        let mut pi = 0.0;
        let mut qi = 0.0;
        for k in 0..n {
            let gik = y.g[(i, k)];
            let bik = y.b[(i, k)];
            if gik == 0.0 && bik == 0.0 {
                continue;
            }
            let d = ti - theta[k];
            let (s, c) = d.sin_cos();
            pi += v[k] * (gik * c + bik * s);
            qi += v[k] * (gik * s - bik * c);
        }
        p[i] = vi * pi;
        q[i] = vi * qi;
    }
    Ok((p, q))
}

/// Fill a Newton Jacobian for the injection equations.
///
/// Rows are `[P at row_p..., Q at row_q...]`, columns `[θ at col_theta...,
/// V at col_v...]`; all index lists contain 0-based node indices into the
/// full `(v, theta)` state, which may include nodes that are not unknowns
/// (e.g. fixed internal generator nodes).
#[allow(clippy::too_many_arguments)]
pub(crate) fn fill_injection_jacobian(
    jac: &mut DMatrix<f64>,
    y: &AdmittanceMatrix,
    v: &DVector<f64>,
    theta: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    row_p: &[usize],
    row_q: &[usize],
    col_theta: &[usize],
    col_v: &[usize],
) {
    let np = row_p.len();
    let nt = col_theta.len();
    debug_assert_eq!(jac.nrows(), np + row_q.len());
    debug_assert_eq!(jac.ncols(), nt + col_v.len());
    jac.fill(0.0);

    for (r, &i) in row_p.iter().enumerate() {
        let (vi, ti) = (v[i], theta[i]);
        for (c, &j) in col_theta.iter().enumerate() {
            jac[(r, c)] = if i == j {
                -q[i] - y.b[(i, i)] * vi * vi
            } else {
                let d = ti - theta[j];
                let (s, co) = d.sin_cos();
                vi * v[j] * (y.g[(i, j)] * s - y.b[(i, j)] * co)
            };
        }
        for (c, &j) in col_v.iter().enumerate() {
            jac[(r, nt + c)] = if i == j {
                p[i] / vi + y.g[(i, i)] * vi
            } else {
                let d = ti - theta[j];
                let (s, co) = d.sin_cos();
                vi * (y.g[(i, j)] * co + y.b[(i, j)] * s)
            };
        }
    }
    for (r, &i) in row_q.iter().enumerate() {
        let (vi, ti) = (v[i], theta[i]);
        for (c, &j) in col_theta.iter().enumerate() {
            jac[(np + r, c)] = if i == j {
                p[i] - y.g[(i, i)] * vi * vi
            } else {
                let d = ti - theta[j];
                let (s, co) = d.sin_cos();
                -vi * v[j] * (y.g[(i, j)] * co + y.b[(i, j)] * s)
            };
        }
        for (c, &j) in col_v.iter().enumerate() {
            jac[(np + r, nt + c)] = if i == j {
                q[i] / vi - y.b[(i, i)] * vi
            } else {
                let d = ti - theta[j];
                let (s, co) = d.sin_cos();
                vi * (y.g[(i, j)] * s - y.b[(i, j)] * co)
            };
        }
    }
}

/// Generator operating point established by the power flow.
///
/// The classical machine is an EMF `emf ∠ delta` behind the transient
/// reactance; `p_mech` balances the electrical output at equilibrium.
#[derive(Debug, Clone)]
pub struct MachineEquilibrium {
    pub delta: f64,
    pub emf: f64,
    pub p_mech: f64,
    pub p_gen: f64,
    pub q_gen: f64,
}

/// Converged power-flow state.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub v: DVector<f64>,
    pub theta: DVector<f64>,
    pub p_inj: DVector<f64>,
    pub q_inj: DVector<f64>,
    pub iterations: usize,
    pub max_mismatch: f64,
    /// Machine equilibria keyed by generator bus id.
    pub machines: BTreeMap<usize, MachineEquilibrium>,
}

/// Scheduled net injection at every bus: dispatch minus demand.
fn scheduled_injections(case: &NetworkCase) -> (DVector<f64>, DVector<f64>) {
    let n = case.buses.len();
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for bus in &case.buses {
        let i = bus.id - 1;
        p[i] -= bus.p_load;
        q[i] -= bus.q_load;
    }
    for (&bus, load) in &case.dynamic_loads {
        p[bus - 1] -= load.p_s;
        q[bus - 1] -= load.q_s;
    }
    for (&bus, gen) in &case.generators {
        p[bus - 1] += gen.p_dispatch;
    }
    (p, q)
}

/// Solve the power flow by full Newton–Raphson from a flat start.
///
/// Unknowns are the angles at every non-slack bus and the magnitudes at
/// every load bus. On success the solution also carries each generator's
/// internal angle, EMF and mechanical power, consistent with the classical
/// machine model at zero speed deviation.
pub fn solve_power_flow(
    case: &NetworkCase,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, GridError> {
    let n = case.buses.len();
    let slack_count = case
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .count();
    if slack_count != 1 {
        return Err(GridError::BadCase(format!(
            "expected exactly one slack bus, found {slack_count}"
        )));
    }

    let y = build_ybus(n, &case.branches)?;
    let (p_sched, q_sched) = scheduled_injections(case);

    let mut v = DVector::zeros(n);
    let mut theta = DVector::zeros(n);
    for bus in &case.buses {
        v[bus.id - 1] = bus.voltage_setpoint;
        theta[bus.id - 1] = bus.initial_angle;
    }

    // Unknown sets: θ at non-slack, V at load (PQ) buses.
    let theta_vars: Vec<usize> = case
        .buses
        .iter()
        .filter(|b| b.kind != BusKind::Slack)
        .map(|b| b.id - 1)
        .collect();
    let v_vars: Vec<usize> = case
        .buses
        .iter()
        .filter(|b| !b.kind.is_generator())
        .map(|b| b.id - 1)
        .collect();

    let m = theta_vars.len() + v_vars.len();
    let mut jac = DMatrix::<f64>::zeros(m, m);
    let mut iterations = 0;
    let mut max_mismatch;

    loop {
        let (p, q) = bus_injections(&v, &theta, &y)?;
        let mut rhs = DVector::zeros(m);
        for (r, &i) in theta_vars.iter().enumerate() {
            rhs[r] = p_sched[i] - p[i];
        }
        for (r, &i) in v_vars.iter().enumerate() {
            rhs[theta_vars.len() + r] = q_sched[i] - q[i];
        }
        max_mismatch = rhs.amax();
        if max_mismatch <= tol {
            let (p_inj, q_inj) = (p, q);
            let machines = machine_equilibria(case, &v, &theta, &p_inj, &q_inj);
            return Ok(PowerFlowSolution {
                v,
                theta,
                p_inj,
                q_inj,
                iterations,
                max_mismatch,
                machines,
            });
        }
        if iterations >= max_iter {
            return Err(GridError::NonConvergence {
                iterations,
                max_mismatch,
            });
        }

        fill_injection_jacobian(
            &mut jac, &y, &v, &theta, &p, &q, &theta_vars, &v_vars, &theta_vars, &v_vars,
        );
        let delta = jac
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or(GridError::SingularJacobian {
                iteration: iterations,
            })?;
        for (r, &i) in theta_vars.iter().enumerate() {
            theta[i] += delta[r];
        }
        for (r, &i) in v_vars.iter().enumerate() {
            v[i] += delta[theta_vars.len() + r];
            if v[i] <= 0.0 || !v[i].is_finite() {
                return Err(GridError::VoltageCollapse { bus: i + 1, v: v[i] });
            }
        }
        iterations += 1;
    }
}

/// Initialize each classical machine from the converged network state.
///
/// The machine current is recovered from the generator's net output at its
/// terminal (injection plus any local demand), the EMF phasor is
/// `V + jx'_d·I`, and the mechanical power equals the active power
/// delivered by the internal node (the transient reactance is lossless).
fn machine_equilibria(
    case: &NetworkCase,
    v: &DVector<f64>,
    theta: &DVector<f64>,
    p_inj: &DVector<f64>,
    q_inj: &DVector<f64>,
) -> BTreeMap<usize, MachineEquilibrium> {
    use num_complex::Complex64;
    let mut out = BTreeMap::new();
    for (&bus, gen) in &case.generators {
        let i = bus - 1;
        let bus_data = &case.buses[i];
        let p_gen = p_inj[i] + bus_data.p_load;
        let q_gen = q_inj[i] + bus_data.q_load;
        let vt = Complex64::from_polar(v[i], theta[i]);
        let s = Complex64::new(p_gen, q_gen);
        let current = (s / vt).conj();
        let emf = vt + Complex64::new(0.0, gen.x_d_prime) * current;
        let p_mech = (emf * current.conj()).re;
        out.insert(
            bus,
            MachineEquilibrium {
                delta: emf.arg(),
                emf: emf.norm(),
                p_mech,
                p_gen,
                q_gen,
            },
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use approx::assert_relative_eq;

    fn two_bus_branch() -> Branch {
        Branch {
            from: 1,
            to: 2,
            series_conductance: 1.0,
            series_susceptance: -5.0,
            shunt_susceptance: 0.0,
        }
    }

    #[test]
    fn ybus_two_bus_line() {
        let y = build_ybus(2, &[two_bus_branch()]).unwrap();
        assert_eq!(y.g, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(y.b, DMatrix::from_row_slice(2, 2, &[-5.0, 5.0, 5.0, -5.0]));
    }

    #[test]
    fn ybus_single_bus_no_branches() {
        let y = build_ybus(1, &[]).unwrap();
        assert_eq!(y.g, DMatrix::zeros(1, 1));
        assert_eq!(y.b, DMatrix::zeros(1, 1));
    }

    #[test]
    fn ybus_parallel_branches_sum() {
        let y = build_ybus(2, &[two_bus_branch(), two_bus_branch()]).unwrap();
        assert_eq!(y.g[(0, 0)], 2.0);
        assert_eq!(y.b[(0, 1)], 10.0);
    }

    #[test]
    fn ybus_isolated_bus_rejected() {
        let err = build_ybus(3, &[two_bus_branch()]).unwrap_err();
        assert!(matches!(err, GridError::IsolatedBus { bus: 3 }));
    }

    #[test]
    fn ybus_self_loop_rejected() {
        let br = Branch {
            from: 1,
            to: 1,
            series_conductance: 1.0,
            series_susceptance: 0.0,
            shunt_susceptance: 0.0,
        };
        assert!(matches!(
            build_ybus(2, &[br]),
            Err(GridError::InvalidBranch { .. })
        ));
    }

    #[test]
    fn ybus_assembly_is_linear() {
        // Union of branch sets assembles to the elementwise sum.
        let a = vec![two_bus_branch()];
        let b = vec![Branch::from_impedance(2, 3, 0.01, 0.1, 0.2)];
        let both: Vec<Branch> = a.iter().chain(b.iter()).cloned().collect();
        let ya = build_ybus(3, &both).unwrap();
        // Assemble separately without the isolation check by summing.
        let mut g = DMatrix::zeros(3, 3);
        let mut bb = DMatrix::zeros(3, 3);
        for set in [&a, &b] {
            let part = build_ybus(3, &{
                // pad with a zero-admittance branch so no bus is isolated
                let mut padded = set.clone();
                padded.push(Branch {
                    from: 1,
                    to: 3,
                    series_conductance: 0.0,
                    series_susceptance: 0.0,
                    shunt_susceptance: 0.0,
                });
                if set[0].from != 2 {
                    padded.push(Branch {
                        from: 2,
                        to: 3,
                        series_conductance: 0.0,
                        series_susceptance: 0.0,
                        shunt_susceptance: 0.0,
                    });
                }
                padded
            })
            .unwrap();
            g += part.g;
            bb += part.b;
        }
        assert_relative_eq!(ya.g, g, epsilon = 0.0);
        assert_relative_eq!(ya.b, bb, epsilon = 0.0);
    }

    #[test]
    fn injections_flat_start_lossless() {
        // G ≡ 0: P vanishes and Q is minus the B row sums at V = 1, θ = 0.
        let br = Branch {
            from: 1,
            to: 2,
            series_conductance: 0.0,
            series_susceptance: -4.0,
            shunt_susceptance: 0.1,
        };
        let y = build_ybus(2, &[br]).unwrap();
        let v = DVector::from_element(2, 1.0);
        let th = DVector::zeros(2);
        let (p, q) = bus_injections(&v, &th, &y).unwrap();
        for i in 0..2 {
            assert_relative_eq!(p[i], 0.0, epsilon = 1e-15);
            let row_sum: f64 = (0..2).map(|k| y.b[(i, k)]).sum();
            assert_relative_eq!(q[i], -row_sum, epsilon = 1e-15);
        }
    }

    #[test]
    fn injections_single_bus_self_admittance() {
        let y = AdmittanceMatrix {
            g: DMatrix::from_element(1, 1, 0.7),
            b: DMatrix::from_element(1, 1, -2.0),
        };
        let v = DVector::from_element(1, 1.0);
        let th = DVector::zeros(1);
        let (p, q) = bus_injections(&v, &th, &y).unwrap();
        assert_relative_eq!(p[0], 0.7, epsilon = 1e-15);
        assert_relative_eq!(q[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn injections_dimension_mismatch() {
        let y = build_ybus(2, &[two_bus_branch()]).unwrap();
        let v = DVector::from_element(3, 1.0);
        let th = DVector::zeros(2);
        assert!(matches!(
            bus_injections(&v, &th, &y),
            Err(GridError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn power_flow_no_load_identity() {
        let case = cases::two_bus_test_case(0.0, 0.0);
        let sol = solve_power_flow(&case, 1e-10, 20).unwrap();
        assert!(sol.iterations <= 1, "iterations = {}", sol.iterations);
        for i in 0..2 {
            assert_relative_eq!(sol.v[i], 1.0, epsilon = 1e-9);
            assert_relative_eq!(sol.theta[i], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn power_flow_wscc9_converges() {
        let case = cases::builtin_wscc9();
        let sol = solve_power_flow(&case, 1e-8, 50).unwrap();
        assert!(sol.iterations <= 10, "iterations = {}", sol.iterations);
        assert!(sol.max_mismatch < 1e-8);
        // Injections at the solved state reproduce the schedule.
        let y = build_ybus(case.buses.len(), &case.branches).unwrap();
        let (p, q) = bus_injections(&sol.v, &sol.theta, &y).unwrap();
        for bus in &case.buses {
            let i = bus.id - 1;
            if bus.kind == BusKind::LoadDynamic {
                let load = &case.dynamic_loads[&bus.id];
                assert_relative_eq!(p[i], -load.p_s, epsilon = 1e-8);
                assert_relative_eq!(q[i], -load.q_s, epsilon = 1e-8);
            }
        }
        // Machine data present for all three generators.
        assert_eq!(sol.machines.len(), 3);
        for eq in sol.machines.values() {
            assert!(eq.emf > 0.0);
            assert!(eq.p_mech > 0.0);
        }
    }

    #[test]
    fn power_flow_slack_balances_losses() {
        let case = cases::builtin_wscc9();
        let sol = solve_power_flow(&case, 1e-10, 50).unwrap();
        // Total generation covers total load plus series losses.
        let total_gen: f64 = sol.machines.values().map(|m| m.p_gen).sum();
        let total_load: f64 = case.dynamic_loads.values().map(|l| l.p_s).sum::<f64>()
            + case.buses.iter().map(|b| b.p_load).sum::<f64>();
        let losses: f64 = sol.p_inj.iter().sum();
        assert_relative_eq!(total_gen - total_load, losses, epsilon = 1e-6);
        assert!(losses > 0.0);
    }

    #[test]
    fn power_flow_lossless_sums_to_zero() {
        // Strip all conductances from the 9-bus case: total P injection ≈ 0.
        let mut case = cases::builtin_wscc9();
        for br in &mut case.branches {
            br.series_conductance = 0.0;
        }
        let sol = solve_power_flow(&case, 1e-10, 50).unwrap();
        let total: f64 = sol.p_inj.iter().sum();
        assert!(total.abs() < 1e-10, "total P = {total:.3e}");
    }

    #[test]
    fn power_flow_infeasible_fails() {
        let case = cases::two_bus_test_case(60.0, 20.0);
        let err = solve_power_flow(&case, 1e-8, 50).unwrap_err();
        assert!(
            matches!(
                err,
                GridError::NonConvergence { .. }
                    | GridError::VoltageCollapse { .. }
                    | GridError::SingularJacobian { .. }
            ),
            "unexpected error: {err}"
        );
    }
}
