//! End-to-end experiment runner: simulate, sample phasors, add measurement
//! noise, recover admittances, estimate time constants.

use thiserror::Error;

use crate::cases::{CaseError, ExperimentConfig, NetworkCase};
use crate::estimator::{
    self, EstimationMethod, EstimationResult, EstimatorError, LoadStaticCharacteristics,
};
use crate::pmu::{self, PhasorStream, PmuError};
use crate::sim::{self, SimError};

/// Offset added to a simulation seed to derive the measurement-noise seed,
/// keeping process noise and measurement noise on unrelated streams.
pub const NOISE_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Measurement-noise seed derived from a simulation seed.
pub fn noise_seed(sim_seed: u64) -> u64 {
    sim_seed.wrapping_add(NOISE_SEED_OFFSET)
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pmu(#[from] PmuError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Result of one experiment, with ground truth attached.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub buses: Vec<usize>,
    pub tau_g_true: Vec<f64>,
    pub tau_b_true: Vec<f64>,
    pub result: EstimationResult,
}

impl ExperimentOutcome {
    /// Percent errors per load, conductance channel.
    pub fn err_g_pct(&self) -> Vec<f64> {
        self.tau_g_true
            .iter()
            .zip(&self.result.tau_g_hat)
            .map(|(&a, &e)| estimator::percent_error(a, e))
            .collect()
    }

    pub fn err_b_pct(&self) -> Vec<f64> {
        self.tau_b_true
            .iter()
            .zip(&self.result.tau_b_hat)
            .map(|(&a, &e)| estimator::percent_error(a, e))
            .collect()
    }
}

/// True time constants of the monitored buses, in bus order.
pub fn true_time_constants(case: &NetworkCase, buses: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let tg = buses.iter().map(|b| case.dynamic_loads[b].tau_g).collect();
    let tb = buses.iter().map(|b| case.dynamic_loads[b].tau_b).collect();
    (tg, tb)
}

/// Synthesize the phasor stream of one experiment (simulation, sampling,
/// and measurement noise if configured).
pub fn synthesize_stream(
    case: &NetworkCase,
    cfg: &ExperimentConfig,
) -> Result<PhasorStream, PipelineError> {
    cfg.validate()?;
    let mut buses = case.monitored.clone();
    buses.sort_unstable();
    let traj = sim::simulate(case, cfg.duration, cfg.dt, cfg.seed)?;
    let stream = pmu::sample_phasors(&traj, &buses, cfg.rate)?;
    Ok(if cfg.sigma_meas > 0.0 {
        pmu::add_noise(&stream, cfg.sigma_meas, noise_seed(cfg.seed))
    } else {
        stream
    })
}

/// Estimate from an existing phasor stream: recover admittances, drop the
/// burn-in, optionally truncate to a window, and run the estimator.
pub fn estimate_from_stream(
    stream: &PhasorStream,
    chars: &LoadStaticCharacteristics,
    burn_in: f64,
    window: Option<f64>,
    method: EstimationMethod,
) -> Result<EstimationResult, PipelineError> {
    let series = pmu::recover_admittance(stream)?;
    let t_end = window.map_or(f64::INFINITY, |w| burn_in + w);
    let series = series.slice_time(burn_in, t_end);
    let stats = estimator::compute_statistics(&series)?;
    Ok(estimator::estimate_time_constants(&stats, chars, method)?)
}

/// Run a full experiment and attach ground truth.
pub fn run_experiment(
    case: &NetworkCase,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome, PipelineError> {
    let stream = synthesize_stream(case, cfg)?;
    let chars = LoadStaticCharacteristics::from_case(case, &stream.buses)?;
    let result = estimate_from_stream(&stream, &chars, cfg.burn_in, Some(cfg.window), cfg.method)?;
    let (tau_g_true, tau_b_true) = true_time_constants(case, &stream.buses);
    Ok(ExperimentOutcome {
        buses: stream.buses.clone(),
        tau_g_true,
        tau_b_true,
        result,
    })
}
