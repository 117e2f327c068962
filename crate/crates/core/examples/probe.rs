//! Scratch probe: single-seed estimation quality and runtime on both cases.

use loadid_core::cases::{self, ExperimentConfig};
use loadid_core::pipeline;
use std::time::Instant;

fn main() {
    let case = cases::builtin_wscc9();
    let cfg = ExperimentConfig {
        seed: 1,
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = pipeline::run_experiment(&case, &cfg).unwrap();
    println!(
        "wscc9 seed 1: {:.2?}\n tau_g_hat {:?} err% {:?}\n tau_b_hat {:?} err% {:?}",
        t0.elapsed(),
        out.result.tau_g_hat,
        out.err_g_pct(),
        out.result.tau_b_hat,
        out.err_b_pct()
    );

    let case39 = cases::builtin_ieee39();
    let cfg39 = ExperimentConfig {
        case: "ieee39".into(),
        seed: 1,
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = pipeline::run_experiment(&case39, &cfg39).unwrap();
    println!(
        "ieee39 seed 1: {:.2?}\n err_g% {:?}\n err_b% {:?}",
        t0.elapsed(),
        out.err_g_pct(),
        out.err_b_pct()
    );
}
