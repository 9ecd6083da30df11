//! First-order virtual battery `ẋ = −a·x − u` and band-referenced SOC.
//!
//! `u` is the deviation of ensemble power from its baseline (kW), `x` is in
//! kWh and `a` in 1/h. Consuming above baseline discharges the battery.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::devices::{AcParams, Ensemble, EwhParams, TemperatureTrajectory};
use crate::envelope::PowerEnvelope;
use crate::series::check_same_grid;
use crate::{Error, Result, SECONDS_PER_HOUR};

/// Below this `a·h` the step uses the `a → 0` limit.
const SERIES_THRESHOLD: f64 = 1e-8;

/// Capacity bounds count as violated within this distance, kWh.
pub const CAPACITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VbParams {
    pub a_per_h: f64,
    pub c1_kwh: f64,
    pub c2_kwh: f64,
    pub x0_kwh: f64,
}

impl VbParams {
    pub fn symmetric(a_per_h: f64, c_kwh: f64, x0_kwh: f64) -> Self {
        Self { a_per_h, c1_kwh: -c_kwh, c2_kwh: c_kwh, x0_kwh }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_per_h >= 0.0) || !self.a_per_h.is_finite() {
            return Err(Error::InvalidParams(format!("dissipation must be finite and ≥ 0, got {}", self.a_per_h)));
        }
        if !(self.c1_kwh <= self.x0_kwh && self.x0_kwh <= self.c2_kwh) {
            return Err(Error::InvalidParams(format!(
                "initial state {} outside [{}, {}]",
                self.x0_kwh, self.c1_kwh, self.c2_kwh
            )));
        }
        Ok(())
    }

    fn breaches(&self, x: f64) -> bool {
        x <= self.c1_kwh + CAPACITY_TOL || x >= self.c2_kwh - CAPACITY_TOL
    }
}

/// Exact state after holding `u` constant for `dt_s` seconds.
pub fn vb_step(x: f64, a_per_h: f64, u_kw: f64, dt_s: f64) -> f64 {
    let h = dt_s / SECONDS_PER_HOUR;
    let ah = a_per_h * h;
    if ah.abs() < SERIES_THRESHOLD {
        // x·(1 − ah) − u·h·(1 − ah/2), truncated where the terms vanish.
        return x - ah * x - u_kw * h * (1.0 - 0.5 * ah);
    }
    let decay = (-ah).exp();
    x * decay - (u_kw / a_per_h) * (-(-ah).exp_m1())
}

/// States `x_0 … x_n` reached under the step inputs `u`.
pub fn vb_simulate(x0: f64, a_per_h: f64, u_kw: &[f64], dt_s: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(u_kw.len() + 1);
    let mut x = x0;
    out.push(x);
    for &u in u_kw {
        x = vb_step(x, a_per_h, u, dt_s);
        out.push(x);
    }
    out
}

/// First time the battery leaves its capacity or power bounds.
///
/// Returns `0` if `x₀` already touches a bound, `(k+1)·dt` if input `k` lies
/// outside the envelope or the state after step `k` reaches a bound, and
/// the horizon `u.len()·dt` otherwise.
pub fn vb_violation_time(params: &VbParams, envelope: Option<&PowerEnvelope>, u_kw: &[f64], dt_s: f64) -> Result<f64> {
    if let Some(env) = envelope {
        check_same_grid(env.dt_s, env.steps(), dt_s, u_kw.len())?;
    }
    if params.breaches(params.x0_kwh) {
        return Ok(0.0);
    }
    let mut x = params.x0_kwh;
    for (k, &u) in u_kw.iter().enumerate() {
        if let Some(env) = envelope {
            if u > env.p_plus[k] || u < env.p_minus[k] {
                return Ok((k + 1) as f64 * dt_s);
            }
        }
        x = vb_step(x, params.a_per_h, u, dt_s);
        if params.breaches(x) {
            return Ok((k + 1) as f64 * dt_s);
        }
    }
    Ok(u_kw.len() as f64 * dt_s)
}

/// Stored energy above each AC's lower band edge, kWh.
pub fn initial_soc_ac(temps: &[f64], params: &[AcParams]) -> f64 {
    temps
        .iter()
        .zip(params)
        .map(|(t, p)| (t - (p.setpoint - 0.5 * p.deadband)) / (p.cop / p.thermal_capacitance))
        .sum()
}

/// Headroom below each EWH's upper band edge, kWh.
pub fn initial_soc_ewh(temps: &[f64], params: &[EwhParams]) -> f64 {
    temps
        .iter()
        .zip(params)
        .map(|(t, p)| (p.setpoint + 0.5 * p.deadband - t) / (1.0 / p.thermal_capacitance))
        .sum()
}

/// Analytic SOC of a whole ensemble at its initial state.
pub fn initial_soc(ensemble: &Ensemble) -> f64 {
    initial_soc_ac(&ensemble.initial.ac_temps, &ensemble.acs)
        + initial_soc_ewh(&ensemble.initial.ewh_temps, &ensemble.ewhs)
}

/// Largest analytic SOC the ensemble can hold inside its bands.
pub fn band_energy(ensemble: &Ensemble) -> f64 {
    ensemble.acs.iter().map(AcParams::band_energy_kwh).sum::<f64>()
        + ensemble.ewhs.iter().map(EwhParams::band_energy_kwh).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SocSource {
    VbModel,
    Analytic,
}

impl SocSource {
    pub fn label(self) -> &'static str {
        match self {
            SocSource::VbModel => "vb-model",
            SocSource::Analytic => "analytic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocTrace {
    pub soc_kwh: Vec<f64>,
    pub dt_s: f64,
    pub source: SocSource,
}

impl SocTrace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time_s", "soc_kwh", "source"])?;
        for (k, x) in self.soc_kwh.iter().enumerate() {
            w.write_record([(k as f64 * self.dt_s).to_string(), x.to_string(), self.source.label().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Applies the per-device SOC expressions at every snapshot of a trajectory.
pub fn analytic_soc_trace(trajectory: &TemperatureTrajectory, ensemble: &Ensemble) -> SocTrace {
    let soc_kwh = trajectory
        .ac
        .iter()
        .zip(&trajectory.ewh)
        .map(|(ac, ewh)| initial_soc_ac(ac, &ensemble.acs) + initial_soc_ewh(ewh, &ensemble.ewhs))
        .collect();
    SocTrace { soc_kwh, dt_s: trajectory.dt_s, source: SocSource::Analytic }
}

/// Battery state driven by the deviation series, without bounds.
pub fn vb_soc_trace(x0: f64, a_per_h: f64, u_kw: &[f64], dt_s: f64) -> SocTrace {
    SocTrace { soc_kwh: vb_simulate(x0, a_per_h, u_kw, dt_s), dt_s, source: SocSource::VbModel }
}
