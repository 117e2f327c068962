//! Built-in test systems and the JSON case-file format.
//!
//! Buses follow the structure-preserving numbering convention: load buses
//! come first (`1..=m`), generator buses last (`m+1..=N`). Both built-in
//! systems are reconstructions from canonical published network data with
//! dynamic loads attached to a subset of the load buses; the canonical bus
//! numbers are given in each builder's documentation.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::estimator::EstimationMethod;
use crate::grid::{self, Branch, Bus, BusKind};

/// Errors from case construction, validation and file I/O.
#[derive(Debug, Error)]
pub enum CaseError {
    #[error("case validation failed: {0}")]
    Validation(String),
    #[error("case file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("case file parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("power flow on case '{name}' failed: {source}")]
    PowerFlow {
        name: String,
        source: grid::GridError,
    },
    #[error("unknown case '{0}' (expected wscc9, ieee39, or a file path)")]
    Unknown(String),
}

/// Static description of a generator for case files.
///
/// `inertia` is the swing-equation coefficient `M = 2H/ω_s` in s²/rad,
/// `damping` multiplies the speed deviation in rad/s. The mechanical power
/// and EMF of the machine are derived from the power-flow equilibrium, not
/// stored here; `p_dispatch` is the scheduled active output used by the
/// power flow (ignored for the slack machine).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorData {
    pub inertia: f64,
    pub damping: f64,
    pub x_d_prime: f64,
    pub p_dispatch: f64,
}

/// First-order dynamic load parameters.
///
/// The load's instantaneous demand is `P = gV²`, `Q = bV²`; `g` and `b`
/// relax towards the steady-state demands `p_s`, `q_s` with time constants
/// `tau_g`, `tau_b`, driven by zero-mean Gaussian demand fluctuations of
/// relative intensity `sigma_p`, `sigma_q`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicLoadParams {
    pub tau_g: f64,
    pub tau_b: f64,
    pub p_s: f64,
    pub q_s: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
}

/// A complete test system: topology, machine data, dynamic loads, and the
/// set of buses monitored by PMUs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCase {
    pub name: String,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: BTreeMap<usize, GeneratorData>,
    pub dynamic_loads: BTreeMap<usize, DynamicLoadParams>,
    pub monitored: Vec<usize>,
}

/// Noise intensity giving `(demand·σ)² = 0.0025 pu²` — the common forcing
/// level used by both built-in systems.
pub fn ambient_sigma(demand: f64) -> f64 {
    0.05 / demand.abs()
}

impl NetworkCase {
    /// Dynamic-load bus ids in ascending order.
    pub fn dynamic_load_buses(&self) -> Vec<usize> {
        self.dynamic_loads.keys().copied().collect()
    }

    /// Generator bus ids in ascending order.
    pub fn generator_buses(&self) -> Vec<usize> {
        self.generators.keys().copied().collect()
    }

    /// Structural validation; does not run a power flow.
    pub fn validate_structure(&self) -> Result<(), CaseError> {
        let n = self.buses.len();
        if n == 0 {
            return Err(CaseError::Validation("case has no buses".into()));
        }
        let mut seen = vec![false; n];
        for bus in &self.buses {
            if bus.id == 0 || bus.id > n {
                return Err(CaseError::Validation(format!(
                    "bus id {} outside contiguous range 1..={n}",
                    bus.id
                )));
            }
            if seen[bus.id - 1] {
                return Err(CaseError::Validation(format!("duplicate bus id {}", bus.id)));
            }
            seen[bus.id - 1] = true;
            if bus.voltage_setpoint <= 0.0 {
                return Err(CaseError::Validation(format!(
                    "bus {} has non-positive voltage setpoint",
                    bus.id
                )));
            }
        }
        let slack: Vec<usize> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        if slack.len() != 1 {
            return Err(CaseError::Validation(format!(
                "expected exactly one slack bus, found {:?}",
                slack
            )));
        }
        // Structure-preserving numbering: every generator bus id exceeds
        // every load bus id.
        let max_load = self
            .buses
            .iter()
            .filter(|b| !b.kind.is_generator())
            .map(|b| b.id)
            .max();
        let min_gen = self
            .buses
            .iter()
            .filter(|b| b.kind.is_generator())
            .map(|b| b.id)
            .min();
        if let (Some(ml), Some(mg)) = (max_load, min_gen) {
            if ml > mg {
                return Err(CaseError::Validation(format!(
                    "load bus {ml} is numbered after generator bus {mg}; \
                     load buses must be 1..=m, generators m+1..=N"
                )));
            }
        }
        for bus in &self.buses {
            match bus.kind {
                BusKind::Slack | BusKind::Generator => {
                    if !self.generators.contains_key(&bus.id) {
                        return Err(CaseError::Validation(format!(
                            "generator bus {} has no generator data",
                            bus.id
                        )));
                    }
                }
                BusKind::LoadDynamic => {
                    if !self.dynamic_loads.contains_key(&bus.id) {
                        return Err(CaseError::Validation(format!(
                            "dynamic-load bus {} has no load parameters",
                            bus.id
                        )));
                    }
                }
                BusKind::LoadStatic => {}
            }
        }
        for (&bus, gen) in &self.generators {
            let kind = self.bus_kind(bus)?;
            if !kind.is_generator() {
                return Err(CaseError::Validation(format!(
                    "generator data attached to non-generator bus {bus}"
                )));
            }
            if gen.inertia <= 0.0 {
                return Err(CaseError::Validation(format!(
                    "generator at bus {bus} has non-positive inertia"
                )));
            }
            if gen.damping < 0.0 {
                return Err(CaseError::Validation(format!(
                    "generator at bus {bus} has negative damping"
                )));
            }
            if gen.x_d_prime <= 0.0 {
                return Err(CaseError::Validation(format!(
                    "generator at bus {bus} has non-positive transient reactance"
                )));
            }
        }
        for (&bus, load) in &self.dynamic_loads {
            let kind = self.bus_kind(bus)?;
            if kind != BusKind::LoadDynamic {
                return Err(CaseError::Validation(format!(
                    "dynamic load attached to bus {bus}, which is not a dynamic-load bus"
                )));
            }
            if load.tau_g <= 0.0 || load.tau_b <= 0.0 {
                return Err(CaseError::Validation(format!(
                    "dynamic load at bus {bus} has non-positive time constant \
                     (tau_g = {}, tau_b = {})",
                    load.tau_g, load.tau_b
                )));
            }
            if load.p_s == 0.0 || load.q_s == 0.0 {
                return Err(CaseError::Validation(format!(
                    "dynamic load at bus {bus} has zero steady-state demand"
                )));
            }
            if load.sigma_p < 0.0 || load.sigma_q < 0.0 {
                return Err(CaseError::Validation(format!(
                    "dynamic load at bus {bus} has negative noise intensity"
                )));
            }
        }
        for &bus in &self.monitored {
            if !self.dynamic_loads.contains_key(&bus) {
                return Err(CaseError::Validation(format!(
                    "monitored bus {bus} carries no dynamic load"
                )));
            }
        }
        // Topological sanity via admittance assembly.
        grid::build_ybus(n, &self.branches).map_err(|e| CaseError::Validation(e.to_string()))?;
        Ok(())
    }

    /// Full validation: structure plus power-flow convergence.
    pub fn validate(&self) -> Result<(), CaseError> {
        self.validate_structure()?;
        grid::solve_power_flow(self, 1e-8, 50).map_err(|e| CaseError::PowerFlow {
            name: self.name.clone(),
            source: e,
        })?;
        Ok(())
    }

    fn bus_kind(&self, id: usize) -> Result<BusKind, CaseError> {
        self.buses
            .iter()
            .find(|b| b.id == id)
            .map(|b| b.kind)
            .ok_or_else(|| CaseError::Validation(format!("reference to unknown bus {id}")))
    }
}

fn bus(id: usize, kind: BusKind, v: f64) -> Bus {
    Bus {
        id,
        kind,
        voltage_setpoint: v,
        initial_angle: 0.0,
        p_load: 0.0,
        q_load: 0.0,
    }
}

/// WSCC 3-machine, 9-bus system with three dynamic loads.
///
/// The network is the classic 9-bus case (100 MVA base, 60 Hz) renumbered
/// so that load buses come first:
///
/// | id | canonical | role                                        |
/// |----|-----------|---------------------------------------------|
/// | 1  | 5         | dynamic load 1.25 + j0.35, τ_g = 1, τ_b = 5 |
/// | 2  | 6         | dynamic load 0.90 + j0.30, τ_g = 3, τ_b = 7 |
/// | 3  | 8         | dynamic load 1.00 + j0.35, τ_g = 0.2, τ_b = 0.8 |
/// | 4  | 4         | connection bus                              |
/// | 5  | 7         | connection bus                              |
/// | 6  | 9         | connection bus                              |
/// | 7  | 1         | slack machine, V = 1.04                     |
/// | 8  | 2         | machine, P = 1.63, V = 1.025                |
/// | 9  | 3         | machine, P = 0.85, V = 1.025                |
///
/// Noise intensities follow [`ambient_sigma`], i.e. every load's
/// `(P^s σ^p)²` and `(Q^s σ^q)²` equal 0.0025 pu².
///
/// Bus 1 carries 0.35 pu reactive demand instead of the canonical 0.50:
/// at the full canonical demand the voltage feedback on that load's
/// susceptance channel exceeds the 10% band the constant-voltage
/// linearization is required to hold.
pub fn builtin_wscc9() -> NetworkCase {
    const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;
    let buses = vec![
        bus(1, BusKind::LoadDynamic, 1.0),
        bus(2, BusKind::LoadDynamic, 1.0),
        bus(3, BusKind::LoadDynamic, 1.0),
        bus(4, BusKind::LoadStatic, 1.0),
        bus(5, BusKind::LoadStatic, 1.0),
        bus(6, BusKind::LoadStatic, 1.0),
        bus(7, BusKind::Slack, 1.04),
        bus(8, BusKind::Generator, 1.025),
        bus(9, BusKind::Generator, 1.025),
    ];
    // (from, to, r, x, b_charging) in the renumbered scheme.
    let lines = [
        (7, 4, 0.0, 0.0576, 0.0),
        (8, 5, 0.0, 0.0625, 0.0),
        (9, 6, 0.0, 0.0586, 0.0),
        (4, 1, 0.010, 0.085, 0.176),
        (4, 2, 0.017, 0.092, 0.158),
        (1, 5, 0.032, 0.161, 0.306),
        (2, 6, 0.039, 0.170, 0.358),
        (5, 3, 0.0085, 0.072, 0.149),
        (3, 6, 0.0119, 0.1008, 0.209),
    ];
    let branches = lines
        .iter()
        .map(|&(f, t, r, x, b)| Branch::from_impedance(f, t, r, x, b))
        .collect();

    let mut generators = BTreeMap::new();
    for (id, h, xdp, p) in [
        (7, 23.64, 0.0608, 0.0),
        (8, 6.4, 0.1198, 1.63),
        (9, 3.01, 0.1813, 0.85),
    ] {
        generators.insert(
            id,
            GeneratorData {
                inertia: 2.0 * h / OMEGA_S,
                damping: 2.0 / OMEGA_S,
                x_d_prime: xdp,
                p_dispatch: p,
            },
        );
    }

    let mut dynamic_loads = BTreeMap::new();
    for (id, tau_g, tau_b, p_s, q_s) in [
        (1, 1.0, 5.0, 1.25, 0.35),
        (2, 3.0, 7.0, 0.90, 0.30),
        (3, 0.2, 0.8, 1.00, 0.35),
    ] {
        dynamic_loads.insert(
            id,
            DynamicLoadParams {
                tau_g,
                tau_b,
                p_s,
                q_s,
                sigma_p: ambient_sigma(p_s),
                sigma_q: ambient_sigma(q_s),
            },
        );
    }

    NetworkCase {
        name: "wscc9".into(),
        buses,
        branches,
        generators,
        dynamic_loads,
        monitored: vec![1, 2, 3],
    }
}

/// IEEE 10-machine, 39-bus system with ten dynamic loads.
///
/// Network data is the canonical New England system (100 MVA base, 60 Hz,
/// transformer taps taken as nominal). The ten dynamic loads replace the
/// canonical constant-power demands at the first ten load buses whose
/// active and reactive demands are both at least 0.1 pu in magnitude; those
/// buses are renumbered to ids 1–10 and assigned time constants
/// `τ_g = 0.1, 0.6, …, 4.6 s` and `τ_b = 0.5, 1.0, …, 5.0 s` in id order:
///
/// | id | canonical | demand (pu)     | τ_g | τ_b |
/// |----|-----------|-----------------|-----|-----|
/// | 1  | 4         | 5.000 + j1.840  | 0.1 | 0.5 |
/// | 2  | 7         | 2.338 + j0.840  | 0.6 | 1.0 |
/// | 3  | 8         | 5.220 + j1.766  | 1.1 | 1.5 |
/// | 4  | 15        | 3.200 + j1.530  | 1.6 | 2.0 |
/// | 5  | 16        | 3.290 + j0.323  | 2.1 | 2.5 |
/// | 6  | 18        | 1.580 + j0.300  | 2.6 | 3.0 |
/// | 7  | 20        | 6.800 + j1.030  | 3.1 | 3.5 |
/// | 8  | 21        | 2.740 + j1.150  | 3.6 | 4.0 |
/// | 9  | 23        | 2.475 + j0.846  | 4.1 | 4.5 |
/// | 10 | 25        | 2.240 + j0.472  | 4.6 | 5.0 |
///
/// Remaining non-generator buses become ids 11–29 (canonical
/// 1, 2, 3, 5, 6, 9, 10, 11, 12, 13, 14, 17, 19, 22, 24, 26, 27, 28, 29 in
/// that order); generator buses keep their canonical ids 30–39 with the
/// slack machine at bus 31. Demands at skipped load buses stay as static
/// constant-power loads.
pub fn builtin_ieee39() -> NetworkCase {
    const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;
    // canonical id -> artifact id
    let dynamic_canonical = [4usize, 7, 8, 15, 16, 18, 20, 21, 23, 25];
    let other_canonical = [
        1usize, 2, 3, 5, 6, 9, 10, 11, 12, 13, 14, 17, 19, 22, 24, 26, 27, 28, 29,
    ];
    let mut map = BTreeMap::new();
    for (k, &c) in dynamic_canonical.iter().enumerate() {
        map.insert(c, k + 1);
    }
    for (k, &c) in other_canonical.iter().enumerate() {
        map.insert(c, k + 11);
    }
    for c in 30..=39 {
        map.insert(c, c);
    }
    let id = |canonical: usize| map[&canonical];

    // Static loads kept at their canonical buses (canonical id, P, Q in pu).
    let static_loads = [
        (3, 3.22, 0.024),
        (12, 0.085, 0.88),
        (24, 3.086, -0.922),
        (26, 1.39, 0.17),
        (27, 2.81, 0.755),
        (28, 2.06, 0.276),
        (29, 2.835, 0.269),
        (31, 0.092, 0.046),
        (39, 11.04, 2.50),
    ];
    // Dynamic loads (canonical id, P_s, Q_s).
    let dyn_demands = [
        (4, 5.00, 1.84),
        (7, 2.338, 0.84),
        (8, 5.22, 1.766),
        (15, 3.20, 1.53),
        (16, 3.29, 0.323),
        (18, 1.58, 0.30),
        (20, 6.80, 1.03),
        (21, 2.74, 1.15),
        (23, 2.475, 0.846),
        (25, 2.24, 0.472),
    ];
    // Generators (canonical id, p_dispatch, v_setpoint, H, x'd); bus 31 is slack.
    let gens = [
        (30, 2.50, 1.0499, 42.0, 0.031),
        (31, 0.0, 0.9820, 30.3, 0.0697),
        (32, 6.50, 0.9841, 35.8, 0.0531),
        (33, 6.32, 0.9972, 28.6, 0.0436),
        (34, 5.08, 1.0123, 26.0, 0.1320),
        (35, 6.50, 1.0494, 34.8, 0.0500),
        (36, 5.60, 1.0636, 26.4, 0.0490),
        (37, 5.40, 1.0275, 24.3, 0.0570),
        (38, 8.30, 1.0265, 34.5, 0.0570),
        (39, 10.00, 1.0300, 500.0, 0.0060),
    ];
    // Branches in canonical numbering (from, to, r, x, b_charging).
    let lines = [
        (1, 2, 0.0035, 0.0411, 0.6987),
        (1, 39, 0.0010, 0.0250, 0.7500),
        (2, 3, 0.0013, 0.0151, 0.2572),
        (2, 25, 0.0070, 0.0086, 0.1460),
        (2, 30, 0.0, 0.0181, 0.0),
        (3, 4, 0.0013, 0.0213, 0.2214),
        (3, 18, 0.0011, 0.0133, 0.2138),
        (4, 5, 0.0008, 0.0128, 0.1342),
        (4, 14, 0.0008, 0.0129, 0.1382),
        (5, 6, 0.0002, 0.0026, 0.0434),
        (5, 8, 0.0008, 0.0112, 0.1476),
        (6, 7, 0.0006, 0.0092, 0.1130),
        (6, 11, 0.0007, 0.0082, 0.1389),
        (6, 31, 0.0, 0.0250, 0.0),
        (7, 8, 0.0004, 0.0046, 0.0780),
        (8, 9, 0.0023, 0.0363, 0.3804),
        (9, 39, 0.0010, 0.0250, 1.2000),
        (10, 11, 0.0004, 0.0043, 0.0729),
        (10, 13, 0.0004, 0.0043, 0.0729),
        (10, 32, 0.0, 0.0200, 0.0),
        (12, 11, 0.0016, 0.0435, 0.0),
        (12, 13, 0.0016, 0.0435, 0.0),
        (13, 14, 0.0009, 0.0101, 0.1723),
        (14, 15, 0.0018, 0.0217, 0.3660),
        (15, 16, 0.0009, 0.0094, 0.1710),
        (16, 17, 0.0007, 0.0089, 0.1342),
        (16, 19, 0.0016, 0.0195, 0.3040),
        (16, 21, 0.0008, 0.0135, 0.2548),
        (16, 24, 0.0003, 0.0059, 0.0680),
        (17, 18, 0.0007, 0.0082, 0.1319),
        (17, 27, 0.0013, 0.0173, 0.3216),
        (19, 20, 0.0007, 0.0138, 0.0),
        (19, 33, 0.0007, 0.0142, 0.0),
        (20, 34, 0.0009, 0.0180, 0.0),
        (21, 22, 0.0008, 0.0140, 0.2565),
        (22, 23, 0.0006, 0.0096, 0.1846),
        (22, 35, 0.0, 0.0143, 0.0),
        (23, 24, 0.0022, 0.0350, 0.3610),
        (23, 36, 0.0005, 0.0272, 0.0),
        (25, 26, 0.0032, 0.0323, 0.5130),
        (25, 37, 0.0006, 0.0232, 0.0),
        (26, 27, 0.0014, 0.0147, 0.2396),
        (26, 28, 0.0043, 0.0474, 0.7802),
        (26, 29, 0.0057, 0.0625, 1.0290),
        (28, 29, 0.0014, 0.0151, 0.2490),
        (29, 38, 0.0008, 0.0156, 0.0),
    ];

    let mut buses = Vec::with_capacity(39);
    for c in 1..=29usize {
        let kind = if dynamic_canonical.contains(&c) {
            BusKind::LoadDynamic
        } else {
            BusKind::LoadStatic
        };
        buses.push(bus(id(c), kind, 1.0));
    }
    for &(c, _, v, _, _) in &gens {
        let kind = if c == 31 {
            BusKind::Slack
        } else {
            BusKind::Generator
        };
        buses.push(bus(id(c), kind, v));
    }
    for (c, p, q) in static_loads {
        let i = buses.iter().position(|b| b.id == id(c)).unwrap();
        buses[i].p_load = p;
        buses[i].q_load = q;
    }
    buses.sort_by_key(|b| b.id);

    let branches = lines
        .iter()
        .map(|&(f, t, r, x, b)| Branch::from_impedance(id(f), id(t), r, x, b))
        .collect();

    let mut generators = BTreeMap::new();
    for (c, p, _v, h, xdp) in gens {
        generators.insert(
            id(c),
            GeneratorData {
                inertia: 2.0 * h / OMEGA_S,
                damping: 2.0 / OMEGA_S,
                x_d_prime: xdp,
                p_dispatch: p,
            },
        );
    }

    let mut dynamic_loads = BTreeMap::new();
    for (k, (c, p_s, q_s)) in dyn_demands.into_iter().enumerate() {
        let tau_g = 0.1 + 0.5 * k as f64;
        let tau_b = 0.5 + 0.5 * k as f64;
        dynamic_loads.insert(
            id(c),
            DynamicLoadParams {
                tau_g,
                tau_b,
                p_s,
                q_s,
                sigma_p: ambient_sigma(p_s),
                sigma_q: ambient_sigma(q_s),
            },
        );
    }

    NetworkCase {
        name: "ieee39".into(),
        buses,
        branches,
        generators,
        dynamic_loads,
        monitored: (1..=10).collect(),
    }
}

/// Minimal two-bus system: a static load at bus 1 fed by a slack machine at
/// bus 2 over a 0.01 + j0.1 line. Used by tests for trivially analyzable
/// behavior and designed failures.
pub fn two_bus_test_case(p_load: f64, q_load: f64) -> NetworkCase {
    const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;
    let mut b1 = bus(1, BusKind::LoadStatic, 1.0);
    b1.p_load = p_load;
    b1.q_load = q_load;
    let buses = vec![b1, bus(2, BusKind::Slack, 1.0)];
    let branches = vec![Branch::from_impedance(1, 2, 0.01, 0.1, 0.0)];
    let mut generators = BTreeMap::new();
    generators.insert(
        2,
        GeneratorData {
            inertia: 2.0 * 5.0 / OMEGA_S,
            damping: 2.0 / OMEGA_S,
            x_d_prime: 0.1,
            p_dispatch: 0.0,
        },
    );
    NetworkCase {
        name: "two-bus".into(),
        buses,
        branches,
        generators,
        dynamic_loads: BTreeMap::new(),
        monitored: vec![],
    }
}

/// Two-bus system with one dynamic load on a stiff bus: the load (bus 1,
/// demand 1.0 + j0.5) hangs off a high-inertia slack machine through a very
/// strong line, so its voltage barely moves and the load states behave like
/// decoupled scalar processes.
pub fn stiff_bus_case(tau_g: f64, tau_b: f64) -> NetworkCase {
    const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;
    let (p_s, q_s) = (1.0, 0.5);
    let buses = vec![bus(1, BusKind::LoadDynamic, 1.0), bus(2, BusKind::Slack, 1.0)];
    let branches = vec![Branch::from_impedance(1, 2, 0.0005, 0.005, 0.0)];
    let mut generators = BTreeMap::new();
    generators.insert(
        2,
        GeneratorData {
            inertia: 2.0 * 1000.0 / OMEGA_S,
            damping: 10.0 / OMEGA_S,
            x_d_prime: 0.002,
            p_dispatch: 0.0,
        },
    );
    let mut dynamic_loads = BTreeMap::new();
    dynamic_loads.insert(
        1,
        DynamicLoadParams {
            tau_g,
            tau_b,
            p_s,
            q_s,
            sigma_p: ambient_sigma(p_s),
            sigma_q: ambient_sigma(q_s),
        },
    );
    NetworkCase {
        name: format!("stiff-bus-{tau_g}-{tau_b}"),
        buses,
        branches,
        generators,
        dynamic_loads,
        monitored: vec![1],
    }
}

/// Look up a built-in case by name.
pub fn builtin(name: &str) -> Option<NetworkCase> {
    match name {
        "wscc9" => Some(builtin_wscc9()),
        "ieee39" => Some(builtin_ieee39()),
        _ => None,
    }
}

/// Resolve a case argument: a built-in name or a JSON case-file path.
pub fn resolve_case(spec: &str) -> Result<NetworkCase, CaseError> {
    if let Some(case) = builtin(spec) {
        return Ok(case);
    }
    let path = Path::new(spec);
    if path.exists() {
        load_case(path)
    } else {
        Err(CaseError::Unknown(spec.to_string()))
    }
}

/// Load and fully validate a case file.
pub fn load_case<P: AsRef<Path>>(path: P) -> Result<NetworkCase, CaseError> {
    let text = std::fs::read_to_string(path)?;
    let case: NetworkCase = serde_json::from_str(&text)?;
    case.validate()?;
    Ok(case)
}

/// Write a case file (pretty-printed JSON; floats round-trip exactly).
pub fn save_case<P: AsRef<Path>>(case: &NetworkCase, path: P) -> Result<(), CaseError> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), case)?;
    Ok(())
}

/// One end-to-end experiment: which case, how long to simulate, how to
/// sample, and how to estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub case: String,
    /// Total simulated time in seconds (must cover burn-in plus window).
    pub duration: f64,
    pub dt: f64,
    /// PMU reporting rate in reports/s.
    pub rate: f64,
    /// Estimation window length in seconds.
    pub window: f64,
    /// Leading trajectory segment discarded before estimation, seconds.
    pub burn_in: f64,
    /// Measurement noise standard deviation on phasor components, pu.
    pub sigma_meas: f64,
    pub seed: u64,
    pub method: EstimationMethod,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            case: "wscc9".into(),
            duration: 1050.0,
            dt: 0.01,
            rate: 20.0,
            window: 1000.0,
            burn_in: 50.0,
            sigma_meas: 0.0,
            seed: 0,
            method: EstimationMethod::MatrixInverse,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CaseError> {
        if self.dt <= 0.0 {
            return Err(CaseError::Validation("dt must be positive".into()));
        }
        if self.rate <= 0.0 {
            return Err(CaseError::Validation("rate must be positive".into()));
        }
        let steps_per_sample = (1.0 / (self.rate * self.dt)).round();
        if steps_per_sample < 1.0
            || (steps_per_sample * self.rate * self.dt - 1.0).abs() > 1e-9
        {
            return Err(CaseError::Validation(format!(
                "rate {} does not evenly divide 1/dt = {}",
                self.rate,
                1.0 / self.dt
            )));
        }
        if self.window + self.burn_in > self.duration + 1e-9 {
            return Err(CaseError::Validation(format!(
                "window ({}) + burn_in ({}) exceeds duration ({})",
                self.window, self.burn_in, self.duration
            )));
        }
        if self.sigma_meas < 0.0 {
            return Err(CaseError::Validation(
                "sigma_meas must be non-negative".into(),
            ));
        }
        Ok(())
    }
}
