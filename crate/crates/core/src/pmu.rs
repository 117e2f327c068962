//! PMU-style phasor streams: sampling from trajectories, measurement noise,
//! and admittance recovery.
//!
//! Load currents follow the consumption convention `I = (g − jb)·V`, so the
//! complex power drawn by the load is `S = V·I* = (g + jb)|V|²` and the
//! instantaneous demands `P = gV²`, `Q = bV²` hold exactly. Consequently
//! the susceptance recovered from a phasor ratio is `b = −Im{I/V}`; sources
//! that define `b = +Im{I/V}` (with `Q = bV²` read in the injection sense)
//! are supported via [`SignConvention::ImaginaryPart`].

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

use crate::numfmt::{fmt_f64, parse_f64};
use crate::sim::Trajectory;

#[derive(Debug, Error)]
pub enum PmuError {
    #[error("bus {bus} is not a dynamic-load bus of the trajectory")]
    NotDynamicLoad { bus: usize },
    #[error("reporting rate {rate} does not evenly divide the trajectory step rate {step_rate}")]
    RateMismatch { rate: f64, step_rate: f64 },
    #[error("degenerate voltage |V| = {v:.3e} at t = {t}, bus {bus}")]
    DegenerateVoltage { t: f64, bus: usize, v: f64 },
    #[error("phasor file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("phasor file parse: {0}")]
    Parse(String),
}

/// One synchronized phasor report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasorRecord {
    pub t: f64,
    pub bus: usize,
    /// Voltage phasor, rectangular pu.
    pub v: Complex64,
    /// Load current phasor, rectangular pu (consumption convention).
    pub i: Complex64,
}

/// A time-ordered stream of phasor reports for a set of monitored buses.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasorStream {
    pub buses: Vec<usize>,
    /// Reports per second.
    pub rate: f64,
    pub case_id: String,
    pub seed: u64,
    /// Records ordered by time, then bus; every monitored bus appears at
    /// every timestamp.
    pub records: Vec<PhasorRecord>,
}

impl PhasorStream {
    pub fn n_samples(&self) -> usize {
        if self.buses.is_empty() {
            0
        } else {
            self.records.len() / self.buses.len()
        }
    }

    /// `(t_start, t_end)` of the stream.
    pub fn window(&self) -> (f64, f64) {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => (0.0, 0.0),
        }
    }
}

/// Recovered per-bus admittance and voltage-magnitude series
/// (`n_samples × m` matrices, one column per monitored bus).
#[derive(Debug, Clone)]
pub struct AdmittanceSeries {
    pub buses: Vec<usize>,
    pub t: Vec<f64>,
    pub g: nalgebra::DMatrix<f64>,
    pub b: nalgebra::DMatrix<f64>,
    pub v_mag: nalgebra::DMatrix<f64>,
}

impl AdmittanceSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Restrict to samples with `t_min ≤ t ≤ t_max`.
    pub fn slice_time(&self, t_min: f64, t_max: f64) -> AdmittanceSeries {
        let idx: Vec<usize> = self
            .t
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= t_min && t <= t_max)
            .map(|(i, _)| i)
            .collect();
        let m = self.buses.len();
        let pick = |mat: &nalgebra::DMatrix<f64>| {
            nalgebra::DMatrix::from_fn(idx.len(), m, |r, c| mat[(idx[r], c)])
        };
        AdmittanceSeries {
            buses: self.buses.clone(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            g: pick(&self.g),
            b: pick(&self.b),
            v_mag: pick(&self.v_mag),
        }
    }
}

/// Sample phasors from a trajectory at `rate` reports/s for the given
/// dynamic-load buses.
///
/// The voltage phasor is `V·e^{jθ}` from the bus algebraic state; the load
/// current is `(g − jb)·V` from the load states, so a noiseless stream
/// inverts exactly back to the simulated `g`, `b`.
pub fn sample_phasors(
    traj: &Trajectory,
    buses: &[usize],
    rate: f64,
) -> Result<PhasorStream, PmuError> {
    let step_rate = 1.0 / traj.dt;
    let per = step_rate / rate;
    let per_rounded = per.round();
    if per_rounded < 1.0 || (per - per_rounded).abs() > 1e-9 * per {
        return Err(PmuError::RateMismatch { rate, step_rate });
    }
    let stride = per_rounded as usize;

    let mut load_index = Vec::with_capacity(buses.len());
    for &bus in buses {
        match traj.load_buses.iter().position(|&b| b == bus) {
            Some(k) => load_index.push(k),
            None => return Err(PmuError::NotDynamicLoad { bus }),
        }
    }

    let mut records = Vec::new();
    for state in traj.states.iter().step_by(stride) {
        for (&bus, &k) in buses.iter().zip(&load_index) {
            let v = Complex64::from_polar(state.v[bus - 1], state.theta[bus - 1]);
            let y = Complex64::new(state.g[k], -state.b[k]);
            records.push(PhasorRecord {
                t: state.t,
                bus,
                v,
                i: y * v,
            });
        }
    }
    Ok(PhasorStream {
        buses: buses.to_vec(),
        rate,
        case_id: traj.case_id.clone(),
        seed: traj.seed,
        records,
    })
}

/// Add independent zero-mean Gaussian noise of standard deviation
/// `sigma_meas` to the real and imaginary part of every voltage and current
/// phasor.
///
/// Noise for monitored bus `k` (position in `stream.buses`) comes from
/// ChaCha8 substream `k` of `seed`, four draws per record in the order
/// `V_re, V_im, I_re, I_im`.
pub fn add_noise(stream: &PhasorStream, sigma_meas: f64, seed: u64) -> PhasorStream {
    if sigma_meas == 0.0 {
        return stream.clone();
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..stream.buses.len())
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            rng
        })
        .collect();
    let mut noisy = stream.clone();
    for rec in &mut noisy.records {
        let k = stream.buses.iter().position(|&b| b == rec.bus).unwrap();
        let rng = &mut rngs[k];
        let mut draw = || -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            sigma_meas * z
        };
        rec.v += Complex64::new(draw(), draw());
        rec.i += Complex64::new(draw(), draw());
    }
    noisy
}

/// How to read the susceptance from the phasor ratio `I/V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignConvention {
    /// `b = −Im{I/V}`: consistent with `Q = bV²` under `S = V·I*`
    /// (inductive consumption gives `b > 0`). The default.
    #[default]
    PowerConsistent,
    /// `b = +Im{I/V}`: the raw imaginary part, for data following the
    /// opposite current sign convention.
    ImaginaryPart,
}

/// Recover the effective admittance series `g = Re{I/V}`,
/// `b = −Im{I/V}` (see [`SignConvention`]) and `|V|` from a phasor stream.
pub fn recover_admittance(stream: &PhasorStream) -> Result<AdmittanceSeries, PmuError> {
    recover_admittance_with(stream, SignConvention::PowerConsistent)
}

/// [`recover_admittance`] with an explicit sign convention.
pub fn recover_admittance_with(
    stream: &PhasorStream,
    convention: SignConvention,
) -> Result<AdmittanceSeries, PmuError> {
    let m = stream.buses.len();
    let n = stream.n_samples();
    let mut t = Vec::with_capacity(n);
    let mut g = nalgebra::DMatrix::zeros(n, m);
    let mut b = nalgebra::DMatrix::zeros(n, m);
    let mut v_mag = nalgebra::DMatrix::zeros(n, m);

    for (idx, rec) in stream.records.iter().enumerate() {
        let (row, col) = (idx / m, idx % m);
        if rec.v.norm() < 1e-6 {
            return Err(PmuError::DegenerateVoltage {
                t: rec.t,
                bus: rec.bus,
                v: rec.v.norm(),
            });
        }
        let ratio = rec.i / rec.v;
        g[(row, col)] = ratio.re;
        b[(row, col)] = match convention {
            SignConvention::PowerConsistent => -ratio.im,
            SignConvention::ImaginaryPart => ratio.im,
        };
        v_mag[(row, col)] = rec.v.norm();
        if col == 0 {
            t.push(rec.t);
        }
    }
    Ok(AdmittanceSeries {
        buses: stream.buses.clone(),
        t,
        g,
        b,
        v_mag,
    })
}

/// Add Gaussian noise directly to the derived `g`, `b` and `|V|` series
/// instead of to the phasors (substream `k` per bus, three draws per
/// sample in the order `g, b, V`).
pub fn add_derived_noise(series: &AdmittanceSeries, sigma: f64, seed: u64) -> AdmittanceSeries {
    if sigma == 0.0 {
        return series.clone();
    }
    let mut out = series.clone();
    for (k, _) in series.buses.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for row in 0..series.len() {
            let zg: f64 = StandardNormal.sample(&mut rng);
            let zb: f64 = StandardNormal.sample(&mut rng);
            let zv: f64 = StandardNormal.sample(&mut rng);
            out.g[(row, k)] += sigma * zg;
            out.b[(row, k)] += sigma * zb;
            out.v_mag[(row, k)] += sigma * zv;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Phasor stream file format
// ---------------------------------------------------------------------------

/// Write a phasor stream as CSV: one `# rate=… case=… seed=…` metadata
/// line, a header, then `t,bus,V_re,V_im,I_re,I_im` records with 17
/// significant digits (bit-exact round trip).
pub fn write_phasor_csv<P: AsRef<Path>>(stream: &PhasorStream, path: P) -> Result<(), PmuError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "# rate={} case={} seed={}",
        fmt_f64(stream.rate),
        stream.case_id,
        stream.seed
    )?;
    writeln!(w, "t,bus,V_re,V_im,I_re,I_im")?;
    for r in &stream.records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_f64(r.t),
            r.bus,
            fmt_f64(r.v.re),
            fmt_f64(r.v.im),
            fmt_f64(r.i.re),
            fmt_f64(r.i.im)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read a phasor stream written by [`write_phasor_csv`].
pub fn read_phasor_csv<P: AsRef<Path>>(path: P) -> Result<PhasorStream, PmuError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();

    let meta = lines
        .next()
        .ok_or_else(|| PmuError::Parse("empty file".into()))?
        .map_err(PmuError::Io)?;
    let meta = meta
        .strip_prefix("# ")
        .ok_or_else(|| PmuError::Parse("missing metadata header line".into()))?;
    let mut rate = None;
    let mut case_id = String::new();
    let mut seed = 0u64;
    for field in meta.split_whitespace() {
        match field.split_once('=') {
            Some(("rate", v)) => {
                rate = Some(parse_f64(v).map_err(|e| PmuError::Parse(e.to_string()))?)
            }
            Some(("case", v)) => case_id = v.to_string(),
            Some(("seed", v)) => {
                seed = v
                    .parse()
                    .map_err(|_| PmuError::Parse(format!("bad seed '{v}'")))?
            }
            _ => return Err(PmuError::Parse(format!("unknown metadata field '{field}'"))),
        }
    }
    let rate = rate.ok_or_else(|| PmuError::Parse("metadata line lacks rate".into()))?;

    match lines.next() {
        Some(Ok(h)) if h.trim() == "t,bus,V_re,V_im,I_re,I_im" => {}
        other => return Err(PmuError::Parse(format!("bad column header: {other:?}"))),
    }

    let mut records = Vec::new();
    let mut buses: Vec<usize> = Vec::new();
    let mut first_t: Option<String> = None;
    for line in lines {
        let line = line.map_err(PmuError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(PmuError::Parse(format!("expected 6 columns: '{line}'")));
        }
        let t = parse_f64(cols[0]).map_err(|e| PmuError::Parse(e.to_string()))?;
        let bus: usize = cols[1]
            .parse()
            .map_err(|_| PmuError::Parse(format!("bad bus id '{}'", cols[1])))?;
        let nums: Result<Vec<f64>, _> = cols[2..].iter().map(|s| parse_f64(s)).collect();
        let nums = nums.map_err(|e| PmuError::Parse(e.to_string()))?;
        match &first_t {
            None => {
                first_t = Some(cols[0].to_string());
                buses.push(bus);
            }
            Some(ft) if cols[0] == ft => buses.push(bus),
            _ => {}
        }
        records.push(PhasorRecord {
            t,
            bus,
            v: Complex64::new(nums[0], nums[1]),
            i: Complex64::new(nums[2], nums[3]),
        });
    }
    Ok(PhasorStream {
        buses,
        rate,
        case_id,
        seed,
        records,
    })
}
