//! First-order equivalent-thermal-parameter (ETP) models of air conditioners
//! (ACs) and electric water heaters (EWHs), ensemble sampling and
//! thermostat-only baseline simulation.
//!
//! Temperatures are in °C, thermal resistance in °C/kW, thermal capacitance
//! in kWh/°C and electric power in kW, so `R·C` is a time constant in hours.
//! The thermal part of every step is integrated exactly for a constant
//! ON/OFF status, which makes the next temperature affine in the status.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::series::steps_for;
use crate::{Error, Result, SECONDS_PER_HOUR};

/// Thermal capacitance of one litre of water, kWh/°C.
pub const WATER_KWH_PER_LITRE_DEGC: f64 = 4.186 / 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcParams {
    /// °C/kW
    pub thermal_resistance: f64,
    /// kWh/°C
    pub thermal_capacitance: f64,
    pub cop: f64,
    /// Electric power drawn while ON, kW.
    pub rated_power: f64,
    pub setpoint: f64,
    pub deadband: f64,
    pub ambient: f64,
}

impl AcParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("thermal_resistance", self.thermal_resistance),
            ("thermal_capacitance", self.thermal_capacitance),
            ("cop", self.cop),
            ("rated_power", self.rated_power),
            ("deadband", self.deadband),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParams(format!("AC {name} must be positive, got {v}")));
            }
        }
        if !self.setpoint.is_finite() || !(self.ambient > self.setpoint) {
            return Err(Error::InvalidParams(format!(
                "AC ambient {} must exceed setpoint {} (cooling regime)",
                self.ambient, self.setpoint
            )));
        }
        Ok(())
    }

    /// Deadband edges `(low, high)`.
    pub fn band(&self) -> (f64, f64) {
        (self.setpoint - self.deadband / 2.0, self.setpoint + self.deadband / 2.0)
    }

    pub fn time_constant_h(&self) -> f64 {
        self.thermal_resistance * self.thermal_capacitance
    }

    /// Electric energy equivalent of the whole deadband, kWh.
    pub fn band_energy_kwh(&self) -> f64 {
        self.deadband * self.thermal_capacitance / self.cop
    }

    /// Long-run fraction of time ON under thermostat control at the setpoint.
    pub fn duty_cycle(&self) -> f64 {
        ((self.ambient - self.setpoint) / (self.cop * self.thermal_resistance * self.rated_power))
            .clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwhParams {
    /// °C/kW
    pub thermal_resistance: f64,
    /// kWh/°C
    pub thermal_capacitance: f64,
    pub efficiency: f64,
    /// kW
    pub rated_power: f64,
    pub setpoint: f64,
    pub deadband: f64,
    pub inlet_temp: f64,
    pub ambient: f64,
    /// Litres.
    pub tank_volume: f64,
}

impl EwhParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("thermal_resistance", self.thermal_resistance),
            ("thermal_capacitance", self.thermal_capacitance),
            ("efficiency", self.efficiency),
            ("rated_power", self.rated_power),
            ("setpoint", self.setpoint),
            ("deadband", self.deadband),
            ("inlet_temp", self.inlet_temp),
            ("ambient", self.ambient),
            ("tank_volume", self.tank_volume),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParams(format!("EWH {name} must be positive, got {v}")));
            }
        }
        if !(self.inlet_temp < self.band().0) {
            return Err(Error::InvalidParams(format!(
                "EWH inlet temperature {} must lie below the lower band edge {}",
                self.inlet_temp,
                self.band().0
            )));
        }
        Ok(())
    }

    pub fn band(&self) -> (f64, f64) {
        (self.setpoint - self.deadband / 2.0, self.setpoint + self.deadband / 2.0)
    }

    pub fn time_constant_h(&self) -> f64 {
        self.thermal_resistance * self.thermal_capacitance
    }

    pub fn band_energy_kwh(&self) -> f64 {
        self.deadband * self.thermal_capacitance
    }

    /// Fraction of time ON needed to hold the setpoint against standby losses
    /// and a steady draw of `mean_draw_lpm`.
    pub fn duty_cycle(&self, mean_draw_lpm: f64) -> f64 {
        let loss_kw = (self.setpoint - self.ambient) / self.thermal_resistance;
        let draw_kw = self.thermal_capacitance * 60.0 * mean_draw_lpm / self.tank_volume
            * (self.setpoint - self.inlet_temp);
        ((loss_kw + draw_kw) / (self.efficiency * self.rated_power)).clamp(0.0, 1.0)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidState(format!("non-finite input in {values:?}")))
    }
}

fn check_dt(dt_s: f64) -> Result<()> {
    if dt_s < 0.0 || !dt_s.is_finite() {
        return Err(Error::InvalidState(format!("time step must be non-negative, got {dt_s}")));
    }
    Ok(())
}

/// One exact step of the AC thermal model with constant status over `dt_s`.
pub fn ac_step(temp: f64, params: &AcParams, on: bool, dt_s: f64) -> Result<f64> {
    check_finite(&[temp, params.ambient, params.thermal_resistance, params.thermal_capacitance])?;
    check_dt(dt_s)?;
    let rate = -(dt_s / SECONDS_PER_HOUR) / params.time_constant_h();
    let cooling = if on {
        params.cop * params.thermal_resistance * params.rated_power
    } else {
        0.0
    };
    Ok(temp * rate.exp() - (params.ambient - cooling) * rate.exp_m1())
}

/// One step of the EWH model: exact standby-loss/heating integration
/// followed by an explicit mixing step for the cold water drawn in `dt_s`.
pub fn ewh_step(temp: f64, params: &EwhParams, draw_lpm: f64, on: bool, dt_s: f64) -> Result<f64> {
    check_finite(&[temp, draw_lpm, params.ambient, params.inlet_temp])?;
    check_dt(dt_s)?;
    if draw_lpm < 0.0 {
        return Err(Error::InvalidState(format!("negative water draw {draw_lpm} L/min")));
    }
    let rate = -(dt_s / SECONDS_PER_HOUR) / params.time_constant_h();
    let heating = if on {
        params.efficiency * params.thermal_resistance * params.rated_power
    } else {
        0.0
    };
    let equilibrium = params.ambient + heating;
    let heated = temp * rate.exp() - equilibrium * rate.exp_m1();
    let mixed_fraction = draw_lpm * (dt_s / 60.0) / params.tank_volume;
    if mixed_fraction > 1.0 {
        return Err(Error::InvalidState(format!(
            "draw of {draw_lpm} L/min replaces more than the tank volume in one step"
        )));
    }
    Ok(heated - mixed_fraction * (heated - params.inlet_temp))
}

/// Hot-water draw rate sampled on a fixed step and repeated periodically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterDrawProfile {
    pub dt_s: f64,
    /// L/min per sample.
    pub lpm: Vec<f64>,
}

impl WaterDrawProfile {
    pub fn none() -> Self {
        Self { dt_s: 60.0, lpm: vec![0.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0) || self.lpm.is_empty() {
            return Err(Error::InvalidParams("water draw profile needs dt > 0 and samples".into()));
        }
        if let Some(v) = self.lpm.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParams(format!("water draw rate {v} must be >= 0")));
        }
        Ok(())
    }

    /// Draw rate in force at time `t_s`.
    pub fn rate_at(&self, t_s: f64) -> f64 {
        let idx = (t_s / self.dt_s + 1e-9).floor().max(0.0) as usize;
        self.lpm[idx % self.lpm.len()]
    }

    pub fn mean_lpm(&self) -> f64 {
        crate::series::mean(&self.lpm)
    }

    /// Writes `time_s,lpm` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time_s", "lpm"])?;
        for (k, v) in self.lpm.iter().enumerate() {
            w.write_record([(k as f64 * self.dt_s).to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut times = Vec::new();
        let mut lpm = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Parse(format!("missing column {i}")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(e.to_string()))
            };
            times.push(parse(0)?);
            lpm.push(parse(1)?);
        }
        let dt_s = uniform_spacing(&times)?.unwrap_or(60.0);
        let profile = Self { dt_s, lpm };
        profile.validate()?;
        Ok(profile)
    }
}

/// Common spacing of `times`, `None` for fewer than two samples.
pub(crate) fn uniform_spacing(times: &[f64]) -> Result<Option<f64>> {
    if times.len() < 2 {
        return Ok(None);
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::NonUniformSpacing { row: 1 });
    }
    for (row, pair) in times.windows(2).enumerate() {
        if ((pair[1] - pair[0]) - dt).abs() > 1e-6 * dt.max(1.0) {
            return Err(Error::NonUniformSpacing { row: row + 1 });
        }
    }
    Ok(Some(dt))
}

/// Temperatures and statuses of every device at one instant.
///
/// Statuses are ordered ACs first, then EWHs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub ac_temps: Vec<f64>,
    pub ewh_temps: Vec<f64>,
    pub statuses: Vec<bool>,
    pub time: f64,
}

impl EnsembleState {
    pub fn temp(&self, device: usize) -> f64 {
        if device < self.ac_temps.len() {
            self.ac_temps[device]
        } else {
            self.ewh_temps[device - self.ac_temps.len()]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    Ac,
    Ewh,
}

/// A sampled ensemble together with its initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub acs: Vec<AcParams>,
    pub ewhs: Vec<EwhParams>,
    /// One profile per EWH.
    pub draws: Vec<WaterDrawProfile>,
    pub initial: EnsembleState,
}

impl Ensemble {
    /// Builds an ensemble, checking every device and the initial state.
    pub fn new(
        acs: Vec<AcParams>,
        ewhs: Vec<EwhParams>,
        draws: Vec<WaterDrawProfile>,
        initial: EnsembleState,
    ) -> Result<Self> {
        let ensemble = Self { acs, ewhs, draws, initial };
        ensemble.validate()?;
        Ok(ensemble)
    }

    pub fn validate(&self) -> Result<()> {
        self.acs.iter().try_for_each(AcParams::validate)?;
        self.ewhs.iter().try_for_each(EwhParams::validate)?;
        if self.draws.len() != self.ewhs.len() {
            return Err(Error::InvalidParams(format!(
                "{} water draw profiles for {} EWHs",
                self.draws.len(),
                self.ewhs.len()
            )));
        }
        self.draws.iter().try_for_each(WaterDrawProfile::validate)?;
        self.check_state(&self.initial)
    }

    pub fn check_state(&self, state: &EnsembleState) -> Result<()> {
        if state.ac_temps.len() != self.acs.len()
            || state.ewh_temps.len() != self.ewhs.len()
            || state.statuses.len() != self.len()
        {
            return Err(Error::InvalidState(format!(
                "state sized {}/{}/{} for ensemble of {} ACs and {} EWHs",
                state.ac_temps.len(),
                state.ewh_temps.len(),
                state.statuses.len(),
                self.acs.len(),
                self.ewhs.len()
            )));
        }
        check_finite(&state.ac_temps)?;
        check_finite(&state.ewh_temps)
    }

    pub fn len(&self) -> usize {
        self.acs.len() + self.ewhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self, device: usize) -> DeviceKind {
        if device < self.acs.len() {
            DeviceKind::Ac
        } else {
            DeviceKind::Ewh
        }
    }

    pub fn rated_power(&self, device: usize) -> f64 {
        match self.kind(device) {
            DeviceKind::Ac => self.acs[device].rated_power,
            DeviceKind::Ewh => self.ewhs[device - self.acs.len()].rated_power,
        }
    }

    pub fn rated_powers(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.rated_power(i)).collect()
    }

    pub fn total_rated_power(&self) -> f64 {
        (0..self.len()).map(|i| self.rated_power(i)).sum()
    }

    pub fn setpoint(&self, device: usize) -> f64 {
        match self.kind(device) {
            DeviceKind::Ac => self.acs[device].setpoint,
            DeviceKind::Ewh => self.ewhs[device - self.acs.len()].setpoint,
        }
    }

    pub fn band(&self, device: usize) -> (f64, f64) {
        match self.kind(device) {
            DeviceKind::Ac => self.acs[device].band(),
            DeviceKind::Ewh => self.ewhs[device - self.acs.len()].band(),
        }
    }

    /// Next temperature of `device` as `(T_off, T_on - T_off)`; the step is
    /// affine in the status, so `T' = T_off + s·delta` for `s ∈ [0, 1]`.
    pub fn next_temp_affine(&self, state: &EnsembleState, device: usize, dt_s: f64) -> Result<(f64, f64)> {
        let temp = state.temp(device);
        let (off, on) = match self.kind(device) {
            DeviceKind::Ac => {
                let p = &self.acs[device];
                (ac_step(temp, p, false, dt_s)?, ac_step(temp, p, true, dt_s)?)
            }
            DeviceKind::Ewh => {
                let j = device - self.acs.len();
                let p = &self.ewhs[j];
                let draw = self.draws[j].rate_at(state.time);
                (ewh_step(temp, p, draw, false, dt_s)?, ewh_step(temp, p, draw, true, dt_s)?)
            }
        };
        Ok((off, on - off))
    }

    /// Advances every device by `dt_s` with the given statuses.
    pub fn advance(&self, state: &EnsembleState, statuses: &[bool], dt_s: f64) -> Result<EnsembleState> {
        let ac_temps = self
            .acs
            .iter()
            .zip(&state.ac_temps)
            .zip(statuses)
            .map(|((p, &t), &s)| ac_step(t, p, s, dt_s))
            .collect::<Result<Vec<_>>>()?;
        let n_ac = self.acs.len();
        let ewh_temps = self
            .ewhs
            .iter()
            .zip(&self.draws)
            .zip(&state.ewh_temps)
            .zip(&statuses[n_ac..])
            .map(|(((p, d), &t), &s)| ewh_step(t, p, d.rate_at(state.time), s, dt_s))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleState {
            ac_temps,
            ewh_temps,
            statuses: statuses.to_vec(),
            time: state.time + dt_s,
        })
    }

    /// Aggregate electric power, kW.
    pub fn power(&self, statuses: &[bool]) -> f64 {
        statuses
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| self.rated_power(i))
            .sum()
    }
}

/// Deadband hysteresis: returns `state` with statuses updated from its
/// temperatures, the previous statuses acting as the memory.
pub fn thermostat_step(ensemble: &Ensemble, state: &EnsembleState) -> EnsembleState {
    let mut next = state.clone();
    for (i, (p, &t)) in ensemble.acs.iter().zip(&state.ac_temps).enumerate() {
        let (low, high) = p.band();
        if t >= high {
            next.statuses[i] = true;
        } else if t <= low {
            next.statuses[i] = false;
        }
    }
    let n_ac = ensemble.acs.len();
    for (j, (p, &t)) in ensemble.ewhs.iter().zip(&state.ewh_temps).enumerate() {
        let (low, high) = p.band();
        if t <= low {
            next.statuses[n_ac + j] = true;
        } else if t >= high {
            next.statuses[n_ac + j] = false;
        }
    }
    next
}

/// Temperature snapshots on a uniform grid, one row per instant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemperatureTrajectory {
    pub dt_s: f64,
    pub ac: Vec<Vec<f64>>,
    pub ewh: Vec<Vec<f64>>,
}

impl TemperatureTrajectory {
    pub fn new(dt_s: f64) -> Self {
        Self { dt_s, ac: Vec::new(), ewh: Vec::new() }
    }

    pub fn push(&mut self, state: &EnsembleState) {
        self.ac.push(state.ac_temps.clone());
        self.ewh.push(state.ewh_temps.clone());
    }

    pub fn len(&self) -> usize {
        self.ac.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ac.is_empty()
    }
}

/// Thermostat-only evolution of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub dt_s: f64,
    /// Power over each step `[k·dt, (k+1)·dt)`, kW.
    pub power_kw: Vec<f64>,
    /// Temperatures at `k·dt` for `k = 0..=steps`.
    pub trajectory: TemperatureTrajectory,
    /// Seconds each device spent ON.
    pub on_time_s: Vec<f64>,
}

impl Baseline {
    pub fn horizon_s(&self) -> f64 {
        self.power_kw.len() as f64 * self.dt_s
    }

    pub fn mean_kw(&self) -> f64 {
        crate::series::mean(&self.power_kw)
    }
}

/// Simulates thermostat-only operation from the ensemble's initial state.
pub fn compute_baseline(ensemble: &Ensemble, horizon_s: f64, dt_s: f64) -> Result<Baseline> {
    let steps = steps_for(horizon_s, dt_s)?;
    ensemble.check_state(&ensemble.initial)?;
    let mut state = ensemble.initial.clone();
    let mut trajectory = TemperatureTrajectory::new(dt_s);
    trajectory.push(&state);
    let mut power_kw = Vec::with_capacity(steps);
    let mut on_time_s = vec![0.0; ensemble.len()];
    for _ in 0..steps {
        state = thermostat_step(ensemble, &state);
        power_kw.push(ensemble.power(&state.statuses));
        for (acc, &s) in on_time_s.iter_mut().zip(&state.statuses) {
            if s {
                *acc += dt_s;
            }
        }
        let statuses = state.statuses.clone();
        state = ensemble.advance(&state, &statuses, dt_s)?;
        trajectory.push(&state);
    }
    Ok(Baseline { dt_s, power_kw, trajectory, on_time_s })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub const fn fixed(value: f64) -> Self {
        Self { low: value, high: value }
    }

    pub fn is_degenerate(&self) -> bool {
        self.low == self.high
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.is_degenerate() {
            self.low
        } else {
            rng.random_range(self.low..self.high)
        }
    }

    fn check(&self, field: &str) -> Result<()> {
        if !self.low.is_finite() || !self.high.is_finite() || self.low > self.high {
            return Err(Error::InvalidParams(format!(
                "range for `{field}` must satisfy low <= high, got [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcRanges {
    pub thermal_resistance: Range,
    pub thermal_capacitance: Range,
    pub cop: Range,
    pub rated_power: Range,
    pub setpoint: Range,
    pub deadband: Range,
    pub ambient: Range,
}

impl Default for AcRanges {
    fn default() -> Self {
        Self {
            thermal_resistance: Range::new(1.5, 2.5),
            thermal_capacitance: Range::new(1.5, 2.5),
            cop: Range::new(2.0, 3.0),
            rated_power: Range::new(4.0, 7.2),
            setpoint: Range::new(21.0, 24.0),
            deadband: Range::new(0.5, 1.0),
            ambient: Range::fixed(32.0),
        }
    }
}

impl AcRanges {
    fn fields(&self) -> [(&'static str, Range); 7] {
        [
            ("thermal_resistance", self.thermal_resistance),
            ("thermal_capacitance", self.thermal_capacitance),
            ("cop", self.cop),
            ("rated_power", self.rated_power),
            ("setpoint", self.setpoint),
            ("deadband", self.deadband),
            ("ambient", self.ambient),
        ]
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> AcParams {
        AcParams {
            thermal_resistance: self.thermal_resistance.sample(rng),
            thermal_capacitance: self.thermal_capacitance.sample(rng),
            cop: self.cop.sample(rng),
            rated_power: self.rated_power.sample(rng),
            setpoint: self.setpoint.sample(rng),
            deadband: self.deadband.sample(rng),
            ambient: self.ambient.sample(rng),
        }
    }

    pub fn nominal(&self) -> AcParams {
        let mid = |r: Range| 0.5 * (r.low + r.high);
        AcParams {
            thermal_resistance: mid(self.thermal_resistance),
            thermal_capacitance: mid(self.thermal_capacitance),
            cop: mid(self.cop),
            rated_power: mid(self.rated_power),
            setpoint: mid(self.setpoint),
            deadband: mid(self.deadband),
            ambient: mid(self.ambient),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EwhRanges {
    pub thermal_resistance: Range,
    pub thermal_capacitance: Range,
    pub efficiency: Range,
    pub rated_power: Range,
    pub setpoint: Range,
    pub deadband: Range,
    pub inlet_temp: Range,
    pub ambient: Range,
    /// `None` derives each tank's volume from its thermal capacitance.
    pub tank_volume: Option<Range>,
}

impl Default for EwhRanges {
    fn default() -> Self {
        Self {
            thermal_resistance: Range::new(250.0, 350.0),
            thermal_capacitance: Range::new(0.2, 0.6),
            efficiency: Range::new(0.95, 1.0),
            rated_power: Range::new(4.0, 5.0),
            setpoint: Range::new(48.0, 52.0),
            deadband: Range::new(3.0, 5.0),
            inlet_temp: Range::fixed(15.0),
            ambient: Range::fixed(20.0),
            tank_volume: None,
        }
    }
}

impl EwhRanges {
    fn fields(&self) -> Vec<(&'static str, Range)> {
        let mut f = vec![
            ("thermal_resistance", self.thermal_resistance),
            ("thermal_capacitance", self.thermal_capacitance),
            ("efficiency", self.efficiency),
            ("rated_power", self.rated_power),
            ("setpoint", self.setpoint),
            ("deadband", self.deadband),
            ("inlet_temp", self.inlet_temp),
            ("ambient", self.ambient),
        ];
        if let Some(v) = self.tank_volume {
            f.push(("tank_volume", v));
        }
        f
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> EwhParams {
        let thermal_resistance = self.thermal_resistance.sample(rng);
        let thermal_capacitance = self.thermal_capacitance.sample(rng);
        let efficiency = self.efficiency.sample(rng);
        let rated_power = self.rated_power.sample(rng);
        let setpoint = self.setpoint.sample(rng);
        let deadband = self.deadband.sample(rng);
        let inlet_temp = self.inlet_temp.sample(rng);
        let ambient = self.ambient.sample(rng);
        let tank_volume = match self.tank_volume {
            Some(r) => r.sample(rng),
            None => thermal_capacitance / WATER_KWH_PER_LITRE_DEGC,
        };
        EwhParams {
            thermal_resistance,
            thermal_capacitance,
            efficiency,
            rated_power,
            setpoint,
            deadband,
            inlet_temp,
            ambient,
            tank_volume,
        }
    }
}

/// One rectangular draw event per period at a per-device random offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrawSpec {
    pub rate_lpm: f64,
    pub event_s: f64,
    pub period_s: f64,
    pub resolution_s: f64,
}

impl Default for DrawSpec {
    /// Two 20-minute events a day at 4 L/min, volume-scaled into one
    /// 20-minute event per 2-hour period.
    fn default() -> Self {
        Self {
            rate_lpm: 4.0 * 2.0 * 7200.0 / 86_400.0,
            event_s: 1200.0,
            period_s: 7200.0,
            resolution_s: 60.0,
        }
    }
}

impl DrawSpec {
    pub fn profile(&self, offset_s: f64) -> Result<WaterDrawProfile> {
        let n = steps_for(self.period_s, self.resolution_s)?;
        if n == 0 {
            return Err(Error::InvalidParams("water draw period must be positive".into()));
        }
        let lpm = (0..n)
            .map(|k| {
                let t = k as f64 * self.resolution_s;
                let since = (t - offset_s).rem_euclid(self.period_s);
                if since < self.event_s {
                    self.rate_lpm
                } else {
                    0.0
                }
            })
            .collect();
        let profile = WaterDrawProfile { dt_s: self.resolution_s, lpm };
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialStatus {
    /// Every device starts OFF.
    Off,
    /// Each device starts ON with probability equal to its duty cycle.
    #[default]
    DutyCycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    pub n_ac: usize,
    pub n_ewh: usize,
    pub ac: AcRanges,
    pub ewh: EwhRanges,
    pub draw: DrawSpec,
    pub initial_status: InitialStatus,
    /// Pins initial AC temperatures instead of sampling them in the deadband.
    pub initial_ac_temps: Option<Vec<f64>>,
    pub initial_ewh_temps: Option<Vec<f64>>,
    /// Requires non-degenerate ranges for the parameters that set device diversity.
    pub heterogeneous: bool,
    pub seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            n_ac: 100,
            n_ewh: 0,
            ac: AcRanges::default(),
            ewh: EwhRanges::default(),
            draw: DrawSpec::default(),
            initial_status: InitialStatus::default(),
            initial_ac_temps: None,
            initial_ewh_temps: None,
            heterogeneous: true,
            seed: 1,
        }
    }
}

/// Fields that must vary when a heterogeneous ensemble is requested.
const DIVERSITY_FIELDS: [&str; 3] = ["thermal_resistance", "thermal_capacitance", "setpoint"];

/// Draws a deterministic ensemble from `spec`.
pub fn sample_ensemble(spec: &EnsembleSpec) -> Result<Ensemble> {
    for (name, r) in spec.ac.fields() {
        r.check(name)?;
        if spec.heterogeneous && spec.n_ac > 1 && DIVERSITY_FIELDS.contains(&name) && r.is_degenerate() {
            return Err(Error::DegenerateRange { field: format!("ac.{name}") });
        }
    }
    for (name, r) in spec.ewh.fields() {
        r.check(name)?;
        if spec.heterogeneous && spec.n_ewh > 1 && DIVERSITY_FIELDS.contains(&name) && r.is_degenerate() {
            return Err(Error::DegenerateRange { field: format!("ewh.{name}") });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let acs: Vec<AcParams> = (0..spec.n_ac).map(|_| spec.ac.sample(&mut rng)).collect();
    let ewhs: Vec<EwhParams> = (0..spec.n_ewh).map(|_| spec.ewh.sample(&mut rng)).collect();
    let draws = (0..spec.n_ewh)
        .map(|_| {
            let offset = rng.random_range(0.0..spec.draw.period_s);
            spec.draw.profile(offset)
        })
        .collect::<Result<Vec<_>>>()?;

    let ac_temps = match &spec.initial_ac_temps {
        Some(t) => t.clone(),
        None => acs
            .iter()
            .map(|p| {
                let (lo, hi) = p.band();
                rng.random_range(lo..hi)
            })
            .collect(),
    };
    let ewh_temps = match &spec.initial_ewh_temps {
        Some(t) => t.clone(),
        None => ewhs
            .iter()
            .map(|p| {
                let (lo, hi) = p.band();
                rng.random_range(lo..hi)
            })
            .collect(),
    };
    let statuses = match spec.initial_status {
        InitialStatus::Off => vec![false; acs.len() + ewhs.len()],
        InitialStatus::DutyCycle => {
            let duties = acs
                .iter()
                .map(AcParams::duty_cycle)
                .chain(ewhs.iter().zip(&draws).map(|(p, d)| p.duty_cycle(d.mean_lpm())));
            duties.collect::<Vec<_>>().into_iter().map(|q| rng.random::<f64>() < q).collect()
        }
    };
    Ensemble::new(acs, ewhs, draws, EnsembleState { ac_temps, ewh_temps, statuses, time: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ac() -> AcParams {
        AcParams {
            thermal_resistance: 2.0,
            thermal_capacitance: 2.0,
            cop: 2.5,
            rated_power: 2.0,
            setpoint: 22.0,
            deadband: 1.0,
            ambient: 32.0,
        }
    }

    fn ewh() -> EwhParams {
        EwhParams {
            thermal_resistance: 300.0,
            thermal_capacitance: 0.4,
            efficiency: 1.0,
            rated_power: 4.5,
            setpoint: 50.0,
            deadband: 4.0,
            inlet_temp: 15.0,
            ambient: 20.0,
            tank_volume: 200.0,
        }
    }

    #[test]
    fn ac_zero_step_is_identity() {
        assert_eq!(ac_step(22.0, &ac(), false, 0.0).unwrap(), 22.0);
        assert_eq!(ac_step(22.0, &ac(), true, 0.0).unwrap(), 22.0);
    }

    #[test]
    fn ac_ambient_is_equilibrium() {
        for dt in [1.0, 10.0, 3600.0, 1e6] {
            assert_abs_diff_eq!(ac_step(32.0, &ac(), false, dt).unwrap(), 32.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ac_closed_form_values() {
        // T_a - (T_a - T)·e^{-1/1440}
        let expected_off = 32.0 - 10.0 * (-1.0f64 / 1440.0).exp();
        let off = ac_step(22.0, &ac(), false, 10.0).unwrap();
        assert_abs_diff_eq!(off, expected_off, epsilon = 1e-12);
        assert_abs_diff_eq!(off, 22.006942, epsilon = 1e-6);
        // η·R·P = 10 = T_a - T cancels the drift exactly.
        assert_abs_diff_eq!(ac_step(22.0, &ac(), true, 10.0).unwrap(), 22.0, epsilon = 1e-12);
    }

    #[test]
    fn step_rejects_non_finite() {
        assert!(matches!(ac_step(f64::NAN, &ac(), false, 1.0), Err(Error::InvalidState(_))));
        assert!(matches!(ewh_step(f64::INFINITY, &ewh(), 0.0, false, 1.0), Err(Error::InvalidState(_))));
        assert!(ewh_step(50.0, &ewh(), -1.0, false, 1.0).is_err());
    }

    #[test]
    fn ewh_equilibrium_and_identity() {
        let mut p = ewh();
        assert_eq!(ewh_step(p.ambient, &p, 0.0, false, 60.0).unwrap(), p.ambient);
        assert_eq!(ewh_step(47.3, &p, 2.0, true, 0.0).unwrap(), 47.3);
        p.thermal_resistance = 1e12;
        let t = ewh_step(50.0, &p, 4.0, false, 60.0).unwrap();
        assert_abs_diff_eq!(t, 50.0 - (4.0 / 200.0) * 35.0, epsilon = 1e-6);
        assert_abs_diff_eq!(t, 49.30, epsilon = 1e-6);
    }

    #[test]
    fn ewh_heating_raises_temperature() {
        let p = ewh();
        let off = ewh_step(49.0, &p, 0.5, false, 10.0).unwrap();
        let on = ewh_step(49.0, &p, 0.5, true, 10.0).unwrap();
        assert!(on > off);
    }

    proptest! {
        #[test]
        fn ac_on_is_strictly_colder(t in 15.0f64..35.0, dt in 0.1f64..3600.0) {
            let p = ac();
            prop_assert!(ac_step(t, &p, true, dt).unwrap() < ac_step(t, &p, false, dt).unwrap());
        }

        #[test]
        fn ac_step_contracts(t1 in 15.0f64..35.0, t2 in 15.0f64..35.0, dt in 0.1f64..3600.0, on: bool) {
            let p = ac();
            let decay = (-(dt / 3600.0) / p.time_constant_h()).exp();
            let gap = (ac_step(t1, &p, on, dt).unwrap() - ac_step(t2, &p, on, dt).unwrap()).abs();
            prop_assert!((gap - decay * (t1 - t2).abs()).abs() <= 1e-12);
        }
    }

    fn single_ac_ensemble(p: AcParams, temp: f64, on: bool) -> Ensemble {
        Ensemble::new(
            vec![p],
            vec![],
            vec![],
            EnsembleState { ac_temps: vec![temp], ewh_temps: vec![], statuses: vec![on], time: 0.0 },
        )
        .unwrap()
    }

    #[test]
    fn thermostat_hysteresis() {
        let p = ac();
        let (lo, hi) = p.band();
        let e = single_ac_ensemble(p, hi + 0.1, false);
        assert!(thermostat_step(&e, &e.initial).statuses[0]);
        let e = single_ac_ensemble(p, 22.1, false);
        assert!(!thermostat_step(&e, &e.initial).statuses[0]);
        let e = single_ac_ensemble(p, 22.1, true);
        assert!(thermostat_step(&e, &e.initial).statuses[0]);
        let e = single_ac_ensemble(p, lo - 0.01, true);
        assert!(!thermostat_step(&e, &e.initial).statuses[0]);

        let w = ewh();
        let (wlo, whi) = w.band();
        let mk = |t: f64, on: bool| {
            Ensemble::new(
                vec![],
                vec![w],
                vec![WaterDrawProfile::none()],
                EnsembleState { ac_temps: vec![], ewh_temps: vec![t], statuses: vec![on], time: 0.0 },
            )
            .unwrap()
        };
        let e = mk(wlo - 0.1, false);
        assert!(thermostat_step(&e, &e.initial).statuses[0]);
        let e = mk(whi + 0.1, true);
        assert!(!thermostat_step(&e, &e.initial).statuses[0]);
        let e = mk(50.0, false);
        assert!(!thermostat_step(&e, &e.initial).statuses[0]);
    }

    #[test]
    fn baseline_without_switching_is_zero() {
        // Starts at the band centre; the upper edge is 0.5 °C away at 2.5 °C/h.
        let e = single_ac_ensemble(ac(), 22.0, false);
        let b = compute_baseline(&e, 300.0, 10.0).unwrap();
        assert!(b.power_kw.iter().all(|&p| p == 0.0));
        assert_eq!(b.trajectory.len(), 31);
    }

    #[test]
    fn baseline_held_on() {
        // ON and far above the lower edge: stays ON the whole horizon.
        let mut p = ac();
        p.deadband = 4.0;
        let e = single_ac_ensemble(p, 23.9, true);
        let b = compute_baseline(&e, 600.0, 10.0).unwrap();
        assert!(b.power_kw.iter().all(|&x| x == p.rated_power));
    }

    #[test]
    fn baseline_switch_time_matches_closed_form() {
        let p1 = ac();
        let mut p2 = ac();
        p2.rated_power = 3.0;
        let (_, hi) = p1.band();
        let t0 = 22.3;
        // Crossing time of T(t) = T_a + (T0 - T_a)e^{-t/RC} through the upper edge.
        let crossing_s =
            p1.time_constant_h() * ((p1.ambient - t0) / (p1.ambient - hi)).ln() * SECONDS_PER_HOUR;
        let e = Ensemble::new(
            vec![p1, p2],
            vec![],
            vec![],
            EnsembleState { ac_temps: vec![t0, 21.7], ewh_temps: vec![], statuses: vec![false, true], time: 0.0 },
        )
        .unwrap();
        let dt = 10.0;
        let b = compute_baseline(&e, 900.0, dt).unwrap();
        let k = b.power_kw.iter().position(|&x| x > 3.5).unwrap();
        let switch_s = k as f64 * dt;
        assert!((switch_s - crossing_s).abs() <= dt, "switch at {switch_s}, closed form {crossing_s}");
        assert!(b.power_kw[..k].iter().all(|&x| x == 3.0));
    }

    #[test]
    fn baseline_energy_matches_on_time() {
        let spec = EnsembleSpec { n_ac: 20, n_ewh: 10, seed: 7, ..Default::default() };
        let e = sample_ensemble(&spec).unwrap();
        let b = compute_baseline(&e, 3600.0, 10.0).unwrap();
        let energy: f64 = b.power_kw.iter().map(|p| p * b.dt_s).sum();
        let by_device: f64 = b.on_time_s.iter().enumerate().map(|(i, t)| e.rated_power(i) * t).sum();
        assert_abs_diff_eq!(energy, by_device, epsilon = 1e-6);
    }

    #[test]
    fn thermostat_keeps_band_after_entry() {
        let spec = EnsembleSpec { n_ac: 30, n_ewh: 20, seed: 3, ..Default::default() };
        let e = sample_ensemble(&spec).unwrap();
        let dt = 10.0;
        let b = compute_baseline(&e, 7200.0, dt).unwrap();
        for (i, p) in e.acs.iter().enumerate() {
            let (lo, hi) = p.band();
            // Largest one-step drift in either direction.
            let drift = (ac_step(lo, p, true, dt).unwrap() - lo).abs().max((ac_step(hi, p, false, dt).unwrap() - hi).abs());
            for row in &b.trajectory.ac {
                assert!(row[i] >= lo - drift - 1e-9 && row[i] <= hi + drift + 1e-9);
            }
        }
        for (j, p) in e.ewhs.iter().enumerate() {
            let (lo, hi) = p.band();
            let drift = (ewh_step(hi, p, 0.0, true, dt).unwrap() - hi)
                .abs()
                .max((ewh_step(lo, p, spec.draw.rate_lpm, false, dt).unwrap() - lo).abs());
            for row in &b.trajectory.ewh {
                assert!(row[j] >= lo - drift - 1e-9 && row[j] <= hi + drift + 1e-9);
            }
        }
    }

    #[test]
    fn collapsed_ranges_give_nominal_ensemble() {
        let nominal = ac();
        let ranges = AcRanges {
            thermal_resistance: Range::fixed(nominal.thermal_resistance),
            thermal_capacitance: Range::fixed(nominal.thermal_capacitance),
            cop: Range::fixed(nominal.cop),
            rated_power: Range::fixed(nominal.rated_power),
            setpoint: Range::fixed(nominal.setpoint),
            deadband: Range::fixed(nominal.deadband),
            ambient: Range::fixed(nominal.ambient),
        };
        let spec = EnsembleSpec { n_ac: 5, ac: ranges, heterogeneous: false, ..Default::default() };
        let e = sample_ensemble(&spec).unwrap();
        assert!(e.acs.iter().all(|p| *p == nominal));
        assert_eq!(ranges.nominal(), nominal);

        let strict = EnsembleSpec { heterogeneous: true, ..spec };
        assert!(matches!(sample_ensemble(&strict), Err(Error::DegenerateRange { .. })));
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = EnsembleSpec { n_ac: 10, n_ewh: 10, seed: 42, ..Default::default() };
        assert_eq!(sample_ensemble(&spec).unwrap(), sample_ensemble(&spec).unwrap());
        let other = EnsembleSpec { seed: 43, ..spec.clone() };
        assert_ne!(sample_ensemble(&spec).unwrap(), sample_ensemble(&other).unwrap());
    }

    #[test]
    fn hundred_acs_are_pairwise_distinct() {
        let e = sample_ensemble(&EnsembleSpec::default()).unwrap();
        assert_eq!(e.acs.len(), 100);
        for i in 0..e.acs.len() {
            for j in (i + 1)..e.acs.len() {
                assert_ne!(e.acs[i], e.acs[j]);
            }
        }
        for p in &e.acs {
            p.validate().unwrap();
        }
    }

    #[test]
    fn initial_state_inside_bands() {
        let spec = EnsembleSpec { n_ac: 50, n_ewh: 50, initial_status: InitialStatus::Off, ..Default::default() };
        let e = sample_ensemble(&spec).unwrap();
        assert!(e.initial.statuses.iter().all(|s| !s));
        for i in 0..e.len() {
            let (lo, hi) = e.band(i);
            let t = e.initial.temp(i);
            assert!(t >= lo && t <= hi);
        }
    }

    #[test]
    fn draw_profile_shape_and_csv() {
        let spec = DrawSpec::default();
        let prof = spec.profile(600.0).unwrap();
        assert_eq!(prof.lpm.len(), 120);
        let active = prof.lpm.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(active, 20);
        assert_eq!(prof.rate_at(599.0), 0.0);
        assert_eq!(prof.rate_at(600.0), spec.rate_lpm);
        assert_eq!(prof.rate_at(600.0 + 7200.0), spec.rate_lpm);

        let mut buf = Vec::new();
        prof.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("time_s,lpm\n"));
        let back = WaterDrawProfile::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, prof);

        let bad = "time_s,lpm\n0,1\n60,1\n150,1\n";
        assert!(matches!(WaterDrawProfile::read_csv(bad.as_bytes()), Err(Error::NonUniformSpacing { row: 2 })));
        let neg = "time_s,lpm\n0,1\n60,-1\n";
        assert!(WaterDrawProfile::read_csv(neg.as_bytes()).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = ac();
        p.ambient = 20.0;
        assert!(p.validate().is_err());
        let mut w = ewh();
        w.inlet_temp = 49.0;
        assert!(w.validate().is_err());
    }
}
