//! Per-step ON/OFF dispatch of an ensemble tracking a power target.
//!
//! Each step solves
//!
//! ```text
//! minimize   W_ac·Σ(T'ᵢ − T_setᵢ)² + λ·Σ sᵢ(1 − sᵢ) + W_ewh·Σ(T'ⱼ − T_setⱼ)²
//! subject to T'ᵢ inside its deadband, |target − sᵀP| ≤ ε, 0 ≤ s ≤ 1
//! ```
//!
//! where `T'` is the next-step temperature. Because `T'` is affine in the
//! device's own status, the temperature constraints decouple into per-device
//! restrictions: a device is free, forced ON, forced OFF, or in conflict.
//! The relaxed problem over the free devices is solved by projected gradient
//! onto the box ∩ power-slab set, rounded, and repaired.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::devices::{DeviceKind, Ensemble, EnsembleState, TemperatureTrajectory};
use crate::signals::RegulationSignal;
use crate::series::steps_for;
use crate::{Error, Result};

/// Slack on temperature bounds absorbing floating-point noise, °C.
const BOUND_TOL: f64 = 1e-9;

/// Repair tries three-device moves only below this many free devices.
const TRIPLE_MOVE_LIMIT: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispatchConfig {
    /// Tracking tolerance ε, kW.
    pub epsilon_kw: f64,
    /// Weight on AC setpoint deviation.
    pub w_ac: f64,
    /// Weight on EWH setpoint deviation.
    pub w_ewh: f64,
    /// Weight on the Σ s(1 − s) integrality penalty.
    pub penalty: f64,
    pub max_iters: usize,
    pub rounding_threshold: f64,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        Self { epsilon_kw: 1.0, w_ac: 0.1, w_ewh: 0.1, penalty: 1.0, max_iters: 200, rounding_threshold: 0.5 }
    }
}

impl DispatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_kw > 0.0) || !(self.w_ac >= 0.0) || !(self.w_ewh >= 0.0) || !(self.penalty >= 0.0) {
            return Err(Error::InvalidParams(format!("invalid dispatch configuration {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.rounding_threshold) {
            return Err(Error::InvalidParams("rounding threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-device consequence of the next-step temperature bounds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Classification {
    pub must_on: Vec<usize>,
    pub must_off: Vec<usize>,
    pub free: Vec<usize>,
    /// Devices violating their bound whichever status they take.
    pub conflicts: Vec<usize>,
}

/// Next-step temperatures of every device as affine functions of status.
#[derive(Debug, Clone)]
struct StepModel {
    off: Vec<f64>,
    delta: Vec<f64>,
    low: Vec<f64>,
    high: Vec<f64>,
    setpoint: Vec<f64>,
    weight: Vec<f64>,
    power: Vec<f64>,
}

impl StepModel {
    fn new(ensemble: &Ensemble, state: &EnsembleState, cfg: &DispatchConfig, dt_s: f64) -> Result<Self> {
        let n = ensemble.len();
        let mut m = StepModel {
            off: Vec::with_capacity(n),
            delta: Vec::with_capacity(n),
            low: Vec::with_capacity(n),
            high: Vec::with_capacity(n),
            setpoint: Vec::with_capacity(n),
            weight: Vec::with_capacity(n),
            power: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (off, delta) = ensemble.next_temp_affine(state, i, dt_s)?;
            let (low, high) = ensemble.band(i);
            m.off.push(off);
            m.delta.push(delta);
            m.low.push(low);
            m.high.push(high);
            m.setpoint.push(ensemble.setpoint(i));
            m.weight.push(match ensemble.kind(i) {
                DeviceKind::Ac => cfg.w_ac,
                DeviceKind::Ewh => cfg.w_ewh,
            });
            m.power.push(ensemble.rated_power(i));
        }
        Ok(m)
    }

    fn temp(&self, i: usize, s: f64) -> f64 {
        self.off[i] + self.delta[i] * s
    }

    fn in_band(&self, i: usize, on: bool) -> bool {
        let t = self.temp(i, if on { 1.0 } else { 0.0 });
        t >= self.low[i] - BOUND_TOL && t <= self.high[i] + BOUND_TOL
    }

    /// Distance from the nearest band edge after taking status `on`.
    fn slack(&self, i: usize, on: bool) -> f64 {
        let t = self.temp(i, if on { 1.0 } else { 0.0 });
        (t - self.low[i]).min(self.high[i] - t)
    }

    fn classify(&self) -> Classification {
        let mut c = Classification::default();
        for i in 0..self.off.len() {
            match (self.in_band(i, false), self.in_band(i, true)) {
                (true, true) => c.free.push(i),
                (false, true) => c.must_on.push(i),
                (true, false) => c.must_off.push(i),
                (false, false) => c.conflicts.push(i),
            }
        }
        c
    }

    fn objective(&self, s: &[f64], penalty: f64) -> f64 {
        s.iter()
            .enumerate()
            .map(|(i, &si)| {
                let dev = self.temp(i, si) - self.setpoint[i];
                self.weight[i] * dev * dev + penalty * si * (1.0 - si)
            })
            .sum()
    }
}

/// Sorts devices into forced and free sets from the one-step temperature bounds.
pub fn classify_devices(ensemble: &Ensemble, state: &EnsembleState, dt_s: f64) -> Result<Classification> {
    ensemble.check_state(state)?;
    Ok(StepModel::new(ensemble, state, &DispatchConfig::default(), dt_s)?.classify())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchStatus {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    /// Relaxed statuses in `[0, 1]`, one per device (forced devices at 0 or 1).
    pub relaxed: Vec<f64>,
    pub statuses: Vec<bool>,
    pub achieved_kw: f64,
    /// Objective at the binary statuses.
    pub objective: f64,
    pub status: DispatchStatus,
}

impl DispatchSolution {
    pub fn is_feasible(&self) -> bool {
        self.status == DispatchStatus::Feasible
    }
}

/// Euclidean projection of `y` onto `{0 ≤ x ≤ 1, lo ≤ pᵀx ≤ hi}`.
///
/// The multiplier of the power constraint is located on the sorted
/// breakpoints of the piecewise-linear map `μ ↦ pᵀ clamp(y − μp)`.
/// Returns `false` if the set is empty.
fn project_box_slab(y: &[f64], p: &[f64], lo: f64, hi: f64, out: &mut [f64], breakpoints: &mut Vec<f64>) -> bool {
    let total: f64 = p.iter().sum();
    if lo > total + 1e-12 || hi < -1e-12 {
        return false;
    }
    let shifted = |mu: f64| -> f64 { y.iter().zip(p).map(|(yi, pi)| pi * (yi - mu * pi).clamp(0.0, 1.0)).sum() };
    let at_zero = shifted(0.0);
    let goal = if at_zero > hi {
        hi
    } else if at_zero < lo {
        lo
    } else {
        for (o, yi) in out.iter_mut().zip(y) {
            *o = yi.clamp(0.0, 1.0);
        }
        return true;
    };

    breakpoints.clear();
    for (yi, pi) in y.iter().zip(p) {
        breakpoints.push((yi - 1.0) / pi);
        breakpoints.push(yi / pi);
    }
    breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));

    // First breakpoint whose value has dropped to the goal.
    let (mut left, mut right) = (0usize, breakpoints.len());
    while left < right {
        let mid = (left + right) / 2;
        if shifted(breakpoints[mid]) <= goal {
            right = mid;
        } else {
            left = mid + 1;
        }
    }
    let mu = if left == 0 {
        breakpoints[0]
    } else if left == breakpoints.len() {
        breakpoints[left - 1]
    } else {
        let (m0, m1) = (breakpoints[left - 1], breakpoints[left]);
        let (g0, g1) = (shifted(m0), shifted(m1));
        if g0 - g1 > 0.0 {
            m0 + (g0 - goal) / (g0 - g1) * (m1 - m0)
        } else {
            m1
        }
    };
    for ((o, yi), pi) in out.iter_mut().zip(y).zip(p) {
        *o = (yi - mu * pi).clamp(0.0, 1.0);
    }
    true
}

/// Solves one dispatch step: relaxed projected gradient, rounding, repair.
pub fn solve_dispatch(
    ensemble: &Ensemble,
    state: &EnsembleState,
    target_kw: f64,
    cfg: &DispatchConfig,
    dt_s: f64,
) -> Result<DispatchSolution> {
    if !target_kw.is_finite() {
        return Err(Error::InvalidState(format!("non-finite target {target_kw}")));
    }
    ensemble.check_state(state)?;
    let model = StepModel::new(ensemble, state, cfg, dt_s)?;
    let class = model.classify();
    let n = ensemble.len();

    let mut relaxed: Vec<f64> = state.statuses.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    for &i in &class.must_on {
        relaxed[i] = 1.0;
    }
    for &i in &class.must_off {
        relaxed[i] = 0.0;
    }
    let infeasible = |relaxed: Vec<f64>| -> DispatchSolution {
        let statuses: Vec<bool> = relaxed.iter().map(|&s| s >= cfg.rounding_threshold).collect();
        let binary: Vec<f64> = statuses.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        DispatchSolution {
            achieved_kw: ensemble.power(&statuses),
            objective: model.objective(&binary, cfg.penalty),
            relaxed,
            statuses,
            status: DispatchStatus::Infeasible,
        }
    };
    if !class.conflicts.is_empty() {
        return Ok(infeasible(relaxed));
    }

    let forced_kw: f64 = class.must_on.iter().map(|&i| model.power[i]).sum();
    let free = &class.free;
    let free_power: Vec<f64> = free.iter().map(|&i| model.power[i]).collect();
    let lo = target_kw - cfg.epsilon_kw - forced_kw;
    let hi = target_kw + cfg.epsilon_kw - forced_kw;

    let mut x: Vec<f64> = free.iter().map(|&i| relaxed[i]).collect();
    let mut y = vec![0.0; free.len()];
    let mut next = vec![0.0; free.len()];
    let mut scratch = Vec::with_capacity(2 * free.len());
    if !project_box_slab(&x, &free_power, lo, hi, &mut next, &mut scratch) {
        return Ok(infeasible(relaxed));
    }
    x.copy_from_slice(&next);

    // Unpenalized phase first, then the penalized phase warm-started from
    // it. Each phase is a descent method, so the penalty term can only
    // shrink relative to the unpenalized optimum.
    let temp_curvature = free
        .iter()
        .map(|&i| 2.0 * model.weight[i] * model.delta[i] * model.delta[i])
        .fold(0.0f64, f64::max);
    let phases: &[f64] = if cfg.penalty > 0.0 { &[0.0, cfg.penalty] } else { &[0.0] };
    for &penalty in phases {
        let curvature = temp_curvature + 2.0 * penalty;
        if curvature <= 0.0 {
            continue;
        }
        let step = 1.0 / curvature;
        for _ in 0..cfg.max_iters {
            for (k, &i) in free.iter().enumerate() {
                let grad = 2.0 * model.weight[i] * model.delta[i] * (model.temp(i, x[k]) - model.setpoint[i])
                    + penalty * (1.0 - 2.0 * x[k]);
                y[k] = x[k] - step * grad;
            }
            project_box_slab(&y, &free_power, lo, hi, &mut next, &mut scratch);
            let change = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
            x.copy_from_slice(&next);
            if change < 1e-10 {
                break;
            }
        }
    }
    for (k, &i) in free.iter().enumerate() {
        relaxed[i] = x[k];
    }

    let mut statuses: Vec<bool> = relaxed.iter().map(|&s| s >= cfg.rounding_threshold).collect();
    let mut achieved = ensemble.power(&statuses);
    if (target_kw - achieved).abs() > cfg.epsilon_kw {
        achieved = repair(&model, free, &mut statuses, target_kw, cfg.epsilon_kw);
    }

    // Re-verify from scratch rather than trusting the solver's bookkeeping.
    let power_ok = (target_kw - ensemble.power(&statuses)).abs() <= cfg.epsilon_kw;
    let bounds_ok = (0..n).all(|i| model.in_band(i, statuses[i]));
    let binary: Vec<f64> = statuses.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    Ok(DispatchSolution {
        relaxed,
        objective: model.objective(&binary, cfg.penalty),
        achieved_kw: achieved,
        statuses,
        status: if power_ok && bounds_ok { DispatchStatus::Feasible } else { DispatchStatus::Infeasible },
    })
}

/// Restores `|target − sᵀP| ≤ ε` after rounding by flipping free devices.
///
/// First a greedy pass in slack order (largest post-flip slack, then
/// lowest index), then a best-improvement local search over flips of one,
/// two or (for small free sets) three devices. Returns the achieved power.
fn repair(model: &StepModel, free: &[usize], statuses: &mut [bool], target: f64, eps: f64) -> f64 {
    let power_of = |s: &[bool]| -> f64 { s.iter().zip(&model.power).filter(|(on, _)| **on).map(|(_, p)| p).sum() };
    let mut achieved = power_of(statuses);
    let mut flipped = vec![false; statuses.len()];

    loop {
        let err = target - achieved;
        if err.abs() <= eps {
            return achieved;
        }
        let turn_on = err > 0.0;
        let mut candidates: Vec<usize> = free.iter().copied().filter(|&i| statuses[i] != turn_on && !flipped[i]).collect();
        candidates.sort_by(|&a, &b| {
            model
                .slack(b, turn_on)
                .partial_cmp(&model.slack(a, turn_on))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let pick = candidates.into_iter().find(|&i| {
            let change = if turn_on { model.power[i] } else { -model.power[i] };
            (err - change).abs() < err.abs()
        });
        match pick {
            Some(i) => {
                statuses[i] = turn_on;
                flipped[i] = true;
                achieved += if turn_on { model.power[i] } else { -model.power[i] };
            }
            None => break,
        }
    }

    for _ in 0..free.len().max(1) {
        let err = target - achieved;
        if err.abs() <= eps {
            break;
        }
        let change_of = |i: usize, s: &[bool]| if s[i] { -model.power[i] } else { model.power[i] };
        let mut best: Option<(f64, [Option<usize>; 3])> = None;
        let mut consider = |residual: f64, moves: [Option<usize>; 3]| {
            if residual.abs() < err.abs() - 1e-12 && best.is_none_or(|(r, _)| residual.abs() < r.abs()) {
                best = Some((residual, moves));
            }
        };
        for (ka, &a) in free.iter().enumerate() {
            let ca = change_of(a, statuses);
            consider(err - ca, [Some(a), None, None]);
            for (kb, &b) in free.iter().enumerate().skip(ka + 1) {
                let cab = ca + change_of(b, statuses);
                consider(err - cab, [Some(a), Some(b), None]);
                if free.len() <= TRIPLE_MOVE_LIMIT {
                    for &c in &free[kb + 1..] {
                        consider(err - cab - change_of(c, statuses), [Some(a), Some(b), Some(c)]);
                    }
                }
            }
        }
        match best {
            Some((_, moves)) => {
                for i in moves.into_iter().flatten() {
                    statuses[i] = !statuses[i];
                }
                achieved = power_of(statuses);
            }
            None => break,
        }
    }
    achieved
}

/// Exhaustive search over the free devices (forced devices fixed).
///
/// Returns the feasible binary statuses minimizing the dispatch objective,
/// `None` if no binary vector is feasible. Refuses ensembles above 20 devices.
pub fn enumerate_oracle(
    ensemble: &Ensemble,
    state: &EnsembleState,
    target_kw: f64,
    cfg: &DispatchConfig,
    dt_s: f64,
) -> Result<Option<Vec<bool>>> {
    if ensemble.len() > 20 {
        return Err(Error::OracleTooLarge(ensemble.len()));
    }
    ensemble.check_state(state)?;
    let model = StepModel::new(ensemble, state, cfg, dt_s)?;
    let class = model.classify();
    if !class.conflicts.is_empty() {
        return Ok(None);
    }
    let mut base = vec![false; ensemble.len()];
    for &i in &class.must_on {
        base[i] = true;
    }
    let mut best: Option<(f64, Vec<bool>)> = None;
    for mask in 0u32..(1u32 << class.free.len()) {
        let mut s = base.clone();
        for (bit, &i) in class.free.iter().enumerate() {
            s[i] = mask & (1 << bit) != 0;
        }
        if (target_kw - ensemble.power(&s)).abs() > cfg.epsilon_kw {
            continue;
        }
        let binary: Vec<f64> = s.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let obj = model.objective(&binary, cfg.penalty);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, s));
        }
    }
    Ok(best.map(|(_, s)| s))
}

/// Outcome of tracking one regulation signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    /// Ensemble violation time `f`, s; equals the horizon if never violated.
    pub violation_time_s: f64,
    pub dt_s: f64,
    pub target_kw: Vec<f64>,
    /// Power realized at each successfully dispatched step.
    pub achieved_kw: Vec<f64>,
    pub rel_err_pct: Vec<f64>,
    /// Temperatures at `k·dt` for every tracked step plus the initial instant.
    pub trajectory: TemperatureTrajectory,
}

impl TrackResult {
    pub fn tracked_fully(&self, horizon_s: f64) -> bool {
        self.violation_time_s >= horizon_s - 1e-9
    }

    pub fn max_rel_err_pct(&self) -> f64 {
        self.rel_err_pct.iter().copied().fold(0.0, f64::max)
    }

    /// Writes `time_s,target_kw,achieved_kw,rel_err_pct` for tracked steps.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time_s", "target_kw", "achieved_kw", "rel_err_pct"])?;
        for k in 0..self.achieved_kw.len() {
            w.write_record([
                (k as f64 * self.dt_s).to_string(),
                self.target_kw[k].to_string(),
                self.achieved_kw[k].to_string(),
                self.rel_err_pct[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn relative_error_pct(target: f64, achieved: f64) -> f64 {
    let err = (target - achieved).abs();
    if err == 0.0 {
        0.0
    } else {
        100.0 * err / target.abs().max(f64::MIN_POSITIVE)
    }
}

/// Dispatches every step of `signal` from the ensemble's initial state.
pub fn track_signal(
    ensemble: &Ensemble,
    signal: &RegulationSignal,
    cfg: &DispatchConfig,
    horizon_s: f64,
) -> Result<TrackResult> {
    cfg.validate()?;
    let dt = signal.dt_s;
    let steps = steps_for(horizon_s, dt)?;
    if signal.samples.len() < steps {
        return Err(Error::GridMismatch {
            expected: format!("{steps} samples"),
            found: format!("{} samples", signal.samples.len()),
        });
    }
    let mut state = ensemble.initial.clone();
    let mut trajectory = TemperatureTrajectory::new(dt);
    trajectory.push(&state);
    let mut achieved_kw = Vec::with_capacity(steps);
    let mut rel_err_pct = Vec::with_capacity(steps);
    let mut violation_time_s = steps as f64 * dt;
    for k in 0..steps {
        let target = signal.samples[k];
        let sol = solve_dispatch(ensemble, &state, target, cfg, dt)?;
        if !sol.is_feasible() {
            violation_time_s = (k + 1) as f64 * dt;
            break;
        }
        achieved_kw.push(sol.achieved_kw);
        rel_err_pct.push(relative_error_pct(target, sol.achieved_kw));
        state = ensemble.advance(&state, &sol.statuses, dt)?;
        trajectory.push(&state);
    }
    Ok(TrackResult {
        violation_time_s,
        dt_s: dt,
        target_kw: signal.samples[..steps].to_vec(),
        achieved_kw,
        rel_err_pct,
        trajectory,
    })
}

/// Index of the first step whose dispatch fails, tracking `target(k)` for
/// `k < steps`; `None` if all steps succeed.
pub fn first_failure(
    ensemble: &Ensemble,
    cfg: &DispatchConfig,
    dt_s: f64,
    steps: usize,
    target: impl Fn(usize) -> f64,
) -> Result<Option<usize>> {
    let mut state = ensemble.initial.clone();
    for k in 0..steps {
        let sol = solve_dispatch(ensemble, &state, target(k), cfg, dt_s)?;
        if !sol.is_feasible() {
            return Ok(Some(k));
        }
        state = ensemble.advance(&state, &sol.statuses, dt_s)?;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{ac_step, AcParams, EwhParams, WaterDrawProfile};
    use proptest::prelude::*;

    fn ac(power: f64) -> AcParams {
        AcParams {
            thermal_resistance: 2.0,
            thermal_capacitance: 2.0,
            cop: 2.5,
            rated_power: power,
            setpoint: 22.0,
            deadband: 1.0,
            ambient: 32.0,
        }
    }

    fn ac_ensemble(powers: &[f64], temps: &[f64], statuses: &[bool]) -> Ensemble {
        Ensemble::new(
            powers.iter().map(|&p| ac(p)).collect(),
            vec![],
            vec![],
            EnsembleState { ac_temps: temps.to_vec(), ewh_temps: vec![], statuses: statuses.to_vec(), time: 0.0 },
        )
        .unwrap()
    }

    fn cfg(eps: f64) -> DispatchConfig {
        DispatchConfig { epsilon_kw: eps, ..Default::default() }
    }

    #[test]
    fn centred_ac_is_free() {
        let e = ac_ensemble(&[2.0], &[22.0], &[false]);
        let c = classify_devices(&e, &e.initial, 10.0).unwrap();
        assert_eq!(c.free, vec![0]);
    }

    #[test]
    fn ac_near_upper_edge_is_forced_on() {
        // OFF drift over 60 s from 22.49: 32 - 9.51·e^{-1/240} ≈ 22.5296 > 22.5.
        let p = ac(2.0);
        let t = 22.49;
        let decay = (-(60.0 / 3600.0) / p.time_constant_h()).exp();
        assert!(p.ambient + (t - p.ambient) * decay > p.band().1);
        let e = ac_ensemble(&[2.0], &[t], &[false]);
        let c = classify_devices(&e, &e.initial, 60.0).unwrap();
        assert_eq!(c.must_on, vec![0]);
    }

    #[test]
    fn ewh_near_upper_edge_is_forced_off() {
        let w = EwhParams {
            thermal_resistance: 300.0,
            thermal_capacitance: 0.4,
            efficiency: 1.0,
            rated_power: 4.5,
            setpoint: 50.0,
            deadband: 4.0,
            inlet_temp: 15.0,
            ambient: 20.0,
            tank_volume: 200.0,
        };
        let t = 51.9;
        // ON heating over 60 s: equilibrium 20 + 1350, time constant 120 h.
        let decay = (-(60.0 / 3600.0) / 120.0f64).exp();
        let eq = 20.0 + 1350.0;
        assert!(eq + (t - eq) * decay > 52.0);
        let e = Ensemble::new(
            vec![],
            vec![w],
            vec![WaterDrawProfile::none()],
            EnsembleState { ac_temps: vec![], ewh_temps: vec![t], statuses: vec![true], time: 0.0 },
        )
        .unwrap();
        let c = classify_devices(&e, &e.initial, 60.0).unwrap();
        assert_eq!(c.must_off, vec![0]);
    }

    #[test]
    fn conflict_drives_infeasibility() {
        // Far above the band: even ON cannot pull it back in one step.
        let e = ac_ensemble(&[2.0, 2.0], &[25.0, 22.0], &[true, false]);
        let c = classify_devices(&e, &e.initial, 10.0).unwrap();
        assert_eq!(c.conflicts, vec![0]);
        let sol = solve_dispatch(&e, &e.initial, 2.0, &cfg(0.5), 10.0).unwrap();
        assert!(!sol.is_feasible());
    }

    #[test]
    fn all_forced_off_zero_target() {
        let e = ac_ensemble(&[3.0, 4.0], &[21.5, 21.5], &[true, true]);
        let c = classify_devices(&e, &e.initial, 10.0).unwrap();
        assert_eq!(c.must_off, vec![0, 1]);
        let sol = solve_dispatch(&e, &e.initial, 0.0, &cfg(0.3), 10.0).unwrap();
        assert!(sol.is_feasible());
        assert_eq!(sol.statuses, vec![false, false]);
    }

    #[test]
    fn small_subset_sum_instances() {
        let e = ac_ensemble(&[1.0, 2.0, 4.0], &[22.0, 22.1, 21.9], &[false, false, false]);
        let sol = solve_dispatch(&e, &e.initial, 5.0, &cfg(0.1), 10.0).unwrap();
        assert!(sol.is_feasible());
        assert_eq!(sol.statuses, vec![true, false, true]);

        let sol = solve_dispatch(&e, &e.initial, 3.4, &cfg(0.5), 10.0).unwrap();
        assert!(sol.is_feasible());
        assert_eq!(sol.statuses, vec![true, true, false]);
        assert_eq!(sol.achieved_kw, 3.0);

        assert_eq!(enumerate_oracle(&e, &e.initial, 5.0, &cfg(0.1), 10.0).unwrap(), Some(vec![true, false, true]));
        assert_eq!(enumerate_oracle(&e, &e.initial, 3.4, &cfg(0.5), 10.0).unwrap(), Some(vec![true, true, false]));
    }

    #[test]
    fn target_beyond_capacity_is_infeasible() {
        let powers = [5.0; 10];
        let e = ac_ensemble(&powers, &[22.0; 10], &[false; 10]);
        let sol = solve_dispatch(&e, &e.initial, 100.0, &cfg(1.0), 10.0).unwrap();
        assert!(!sol.is_feasible());
        assert_eq!(enumerate_oracle(&e, &e.initial, 100.0, &cfg(1.0), 10.0).unwrap(), None);
    }

    #[test]
    fn oracle_trivial_cases() {
        let e = ac_ensemble(&[3.0], &[22.0], &[false]);
        assert_eq!(enumerate_oracle(&e, &e.initial, 3.0, &cfg(0.01), 10.0).unwrap(), Some(vec![true]));
        // Forced ON at 3 kW with target 0: nothing free to adjust.
        let e = ac_ensemble(&[3.0], &[22.499], &[false]);
        let c = classify_devices(&e, &e.initial, 60.0).unwrap();
        assert_eq!(c.must_on, vec![0]);
        assert_eq!(enumerate_oracle(&e, &e.initial, 0.0, &cfg(0.5), 60.0).unwrap(), None);
    }

    #[test]
    fn oracle_refuses_large_ensembles() {
        let e = ac_ensemble(&[1.0; 21], &[22.0; 21], &[false; 21]);
        assert!(matches!(enumerate_oracle(&e, &e.initial, 1.0, &cfg(0.5), 10.0), Err(Error::OracleTooLarge(21))));
    }

    #[test]
    fn projection_lands_in_slab() {
        let y = [0.9, 0.2, 0.7, 1.4, -0.3];
        let p = [1.0, 2.0, 3.0, 4.0, 5.0];
        let mut out = [0.0; 5];
        let mut scratch = Vec::new();
        for (lo, hi) in [(2.0, 3.0), (9.0, 10.0), (0.0, 0.5), (14.5, 15.0)] {
            assert!(project_box_slab(&y, &p, lo, hi, &mut out, &mut scratch));
            let v: f64 = out.iter().zip(&p).map(|(a, b)| a * b).sum();
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{v} not in [{lo}, {hi}]");
            assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        assert!(!project_box_slab(&y, &p, 16.0, 17.0, &mut out, &mut scratch));
    }

    #[test]
    fn penalty_reduces_fractional_mass() {
        let powers = [3.0, 3.5, 4.0, 4.5, 5.0, 5.5];
        let temps = [21.8, 22.2, 22.0, 22.3, 21.7, 22.1];
        let e = ac_ensemble(&powers, &temps, &[false; 6]);
        let fractional = |penalty: f64| {
            let c = DispatchConfig { epsilon_kw: 0.2, penalty, ..Default::default() };
            let sol = solve_dispatch(&e, &e.initial, 12.7, &c, 10.0).unwrap();
            sol.relaxed.iter().map(|s| s.min(1.0 - s)).sum::<f64>()
        };
        assert!(fractional(1.0) <= fractional(0.0));
    }

    #[test]
    fn zero_step_tracking_examples() {
        let e = ac_ensemble(&[2.0, 3.0], &[22.0, 22.0], &[false, false]);
        let signal = RegulationSignal { id: "x".into(), samples: vec![20.0; 5], dt_s: 10.0, gamma: 0.0 };
        let r = track_signal(&e, &signal, &cfg(0.5), 50.0).unwrap();
        assert_eq!(r.violation_time_s, 10.0);
        assert!(r.achieved_kw.is_empty());
    }

    fn instance() -> impl Strategy<Value = (Ensemble, f64, f64, f64)> {
        (1usize..=10)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec((1.0f64..8.0, 21.5f64..22.5, any::<bool>()), n),
                    0.0f64..1.0,
                    0.2f64..1.5,
                    prop_oneof![Just(10.0), Just(60.0), Just(300.0)],
                )
            })
            .prop_map(|(devices, frac, eps, dt)| {
                let powers: Vec<f64> = devices.iter().map(|d| d.0).collect();
                let temps: Vec<f64> = devices.iter().map(|d| d.1).collect();
                let statuses: Vec<bool> = devices.iter().map(|d| d.2).collect();
                let e = ac_ensemble(&powers, &temps, &statuses);
                let target = frac * e.total_rated_power();
                (e, target, eps, dt)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn classes_partition_devices((e, _, _, dt) in instance()) {
            let c = classify_devices(&e, &e.initial, dt).unwrap();
            let mut all: Vec<usize> =
                c.must_on.iter().chain(&c.must_off).chain(&c.free).chain(&c.conflicts).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..e.len()).collect::<Vec<_>>());
        }

        #[test]
        fn feasible_answers_are_sound_and_agree_with_oracle((e, target, eps, dt) in instance()) {
            let c = cfg(eps);
            let sol = solve_dispatch(&e, &e.initial, target, &c, dt).unwrap();
            if sol.is_feasible() {
                let power: f64 = sol.statuses.iter().zip(e.rated_powers()).filter(|(s, _)| **s).map(|(_, p)| p).sum();
                prop_assert!((target - power).abs() <= eps);
                for (i, &on) in sol.statuses.iter().enumerate() {
                    let t = ac_step(e.initial.ac_temps[i], &e.acs[i], on, dt).unwrap();
                    let (lo, hi) = e.band(i);
                    prop_assert!(t >= lo - 1e-9 && t <= hi + 1e-9);
                }
                prop_assert!(enumerate_oracle(&e, &e.initial, target, &c, dt).unwrap().is_some());
            }
        }

        #[test]
        fn penalty_never_raises_integrality_gap((e, target, eps, dt) in instance()) {
            let relaxed = |penalty: f64| {
                let c = DispatchConfig { epsilon_kw: eps, penalty, ..Default::default() };
                solve_dispatch(&e, &e.initial, target, &c, dt).unwrap().relaxed
            };
            let quad = |s: &[f64]| s.iter().map(|v| v * (1.0 - v)).sum::<f64>();
            let (with, without) = (relaxed(1.0), relaxed(0.0));
            prop_assert!(quad(&with) <= quad(&without) + 1e-9);
        }
    }
}
