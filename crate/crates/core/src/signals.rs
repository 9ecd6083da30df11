//! Normalized regulation signals and ensemble-level regulation targets.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::devices::uniform_spacing;
use crate::envelope::PowerEnvelope;
use crate::series::{check_same_grid, mean, steps_for};
use crate::{Error, Result};

/// Dimensionless regulation signal with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSignal {
    pub samples: Vec<f64>,
    pub dt_s: f64,
    pub source: String,
}

impl NormalizedSignal {
    pub fn horizon_s(&self) -> f64 {
        self.samples.len() as f64 * self.dt_s
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_series(writer, self.dt_s, &self.samples)
    }
}

/// Ensemble power target `P_reg`, kW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulationSignal {
    pub id: String,
    pub samples: Vec<f64>,
    pub dt_s: f64,
    pub gamma: f64,
}

impl RegulationSignal {
    pub fn horizon_s(&self) -> f64 {
        self.samples.len() as f64 * self.dt_s
    }

    /// `P_reg - P_base`, the virtual battery input.
    pub fn deviation(&self, baseline_kw: &[f64]) -> Result<Vec<f64>> {
        check_same_grid(self.dt_s, self.samples.len(), self.dt_s, baseline_kw.len())?;
        Ok(self.samples.iter().zip(baseline_kw).map(|(r, b)| r - b).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_series(writer, self.dt_s, &self.samples)
    }
}

fn write_series<W: Write>(writer: W, dt_s: f64, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time_s", "value"])?;
    for (k, v) in values.iter().enumerate() {
        w.write_record([(k as f64 * dt_s).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `time_s,value` CSV and resamples it to `dt_s` by zero-order hold.
pub fn load_normalized<R: Read>(reader: R, dt_s: f64, source: &str) -> Result<NormalizedSignal> {
    let mut r = csv::Reader::from_reader(reader);
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Parse(format!("row {row}: missing column {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {row}: {e}")))
        };
        let (t, v) = (field(0)?, field(1)?);
        if !v.is_finite() || v.abs() > 1.0 + 1e-9 {
            return Err(Error::OutOfRange { row, value: v });
        }
        times.push(t);
        values.push(v);
    }
    if !(dt_s > 0.0) {
        return Err(Error::InvalidParams(format!("time step must be positive, got {dt_s}")));
    }
    let src_dt = uniform_spacing(&times)?.unwrap_or(dt_s);
    let horizon = values.len() as f64 * src_dt;
    let n = (horizon / dt_s + 1e-9).floor() as usize;
    let samples = (0..n)
        .map(|k| {
            let idx = ((k as f64 * dt_s) / src_dt + 1e-9).floor() as usize;
            values[idx.min(values.len() - 1)]
        })
        .collect();
    Ok(NormalizedSignal { samples, dt_s, source: source.to_string() })
}

/// Shape of the synthetic substitute for recorded regulation signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Mean-reversion time of the underlying walk, s.
    pub reversion_s: f64,
    /// Time constant of the first-order smoothing filter, s.
    pub smoothing_s: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { reversion_s: 600.0, smoothing_s: 60.0 }
    }
}

/// Synthesizes a normalized signal: a mean-reverting random walk clipped to
/// `[-1, 1]`, low-pass filtered, then rescaled so that `max |p| = 1`.
pub fn synth_normalized(seed: u64, horizon_s: f64, dt_s: f64) -> Result<NormalizedSignal> {
    synth_normalized_with(seed, horizon_s, dt_s, &SynthOptions::default())
}

pub fn synth_normalized_with(seed: u64, horizon_s: f64, dt_s: f64, opts: &SynthOptions) -> Result<NormalizedSignal> {
    let n = steps_for(horizon_s, dt_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stationary standard deviation of 0.5 for the unclipped walk.
    let reversion = (dt_s / opts.reversion_s).min(1.0);
    let sigma = (0.25 * reversion * (2.0 - reversion)).sqrt();
    let smoothing = 1.0 - (-dt_s / opts.smoothing_s).exp();

    let mut walk: f64 = rng.random_range(-0.5..0.5);
    let mut filtered = walk;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let noise: f64 = rng.sample(StandardNormal);
        walk = (walk * (1.0 - reversion) + sigma * noise).clamp(-1.0, 1.0);
        filtered += smoothing * (walk - filtered);
        samples.push(filtered);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(NormalizedSignal { samples, dt_s, source: format!("synth:{seed}") })
}

/// `P_reg(t) = P_base(t) + γ·mean(P_base)·p(t)`.
pub fn build_regulation(baseline_kw: &[f64], baseline_dt_s: f64, signal: &NormalizedSignal, gamma: f64, id: &str) -> Result<RegulationSignal> {
    check_same_grid(baseline_dt_s, baseline_kw.len(), signal.dt_s, signal.samples.len())?;
    let scale = gamma * mean(baseline_kw);
    let samples = baseline_kw.iter().zip(&signal.samples).map(|(b, p)| b + scale * p).collect();
    Ok(RegulationSignal { id: id.to_string(), samples, dt_s: baseline_dt_s, gamma })
}

/// Whether `P⁻(t) ≤ P_reg(t) − P_base(t) ≤ P⁺(t)` holds at every sample.
pub fn within_envelope(signal: &RegulationSignal, envelope: &PowerEnvelope, baseline_kw: &[f64]) -> Result<bool> {
    check_same_grid(envelope.dt_s, envelope.p_plus.len(), signal.dt_s, signal.samples.len())?;
    let deviation = signal.deviation(baseline_kw)?;
    Ok(deviation
        .iter()
        .zip(envelope.p_minus.iter().zip(&envelope.p_plus))
        .all(|(u, (lo, hi))| *lo <= *u && *u <= *hi))
}

/// Keeps the signals whose deviation from the baseline stays inside the envelope.
pub fn filter_by_envelope(
    signals: &[RegulationSignal],
    envelope: &PowerEnvelope,
    baseline_kw: &[f64],
) -> Result<Vec<RegulationSignal>> {
    let mut kept = Vec::new();
    for s in signals {
        if within_envelope(s, envelope, baseline_kw)? {
            kept.push(s.clone());
        }
    }
    Ok(kept)
}
