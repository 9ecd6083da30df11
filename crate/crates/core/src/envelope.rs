//! Time-varying power limits by doubling and bisection over offsets.
//!
//! An offset `δ` is trackable at `t` when the ensemble, under the dispatch
//! controller, follows `P_base + δ` for every step ending at or before `t`
//! (sustained semantics) or follows the baseline up to `t` and `P_base + δ`
//! on the step ending at `t` (instantaneous semantics).

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::devices::{Ensemble, EnsembleState};
use crate::dispatch::{solve_dispatch, DispatchConfig};
use crate::series::steps_for;
use crate::{Error, Result};

/// Doubling stops with an error once the bracket passes this many kW.
pub const DEFAULT_SEARCH_CAP_KW: f64 = 1e9;

/// Answers whether a constant offset can be followed through time `t`.
pub trait TrackingOracle {
    fn trackable(&mut self, offset_kw: f64, t_s: f64) -> Result<bool>;
}

impl<F: FnMut(f64, f64) -> bool> TrackingOracle for F {
    fn trackable(&mut self, offset_kw: f64, t_s: f64) -> Result<bool> {
        Ok(self(offset_kw, t_s))
    }
}

/// Largest trackable offset at `t`, to within `tol_kw`.
///
/// Starts from `β = initial_kw`, doubles while trackable, then bisects the
/// last bracket. The returned value is always a trackable offset.
pub fn upper_limit<O: TrackingOracle + ?Sized>(
    oracle: &mut O,
    t_s: f64,
    tol_kw: f64,
    initial_kw: f64,
    cap_kw: f64,
) -> Result<f64> {
    search(oracle, t_s, tol_kw, initial_kw, cap_kw, 1.0)
}

/// Most negative trackable offset at `t` (returned as a value `≤ 0`).
pub fn lower_limit<O: TrackingOracle + ?Sized>(
    oracle: &mut O,
    t_s: f64,
    tol_kw: f64,
    initial_kw: f64,
    cap_kw: f64,
) -> Result<f64> {
    search(oracle, t_s, tol_kw, initial_kw, cap_kw, -1.0).map(|v| if v == 0.0 { 0.0 } else { v })
}

fn search<O: TrackingOracle + ?Sized>(
    oracle: &mut O,
    t_s: f64,
    tol_kw: f64,
    initial_kw: f64,
    cap_kw: f64,
    sign: f64,
) -> Result<f64> {
    if !(tol_kw > 0.0) || !(initial_kw > 0.0) {
        return Err(Error::InvalidParams(format!("search needs tol > 0 and β > 0, got {tol_kw}, {initial_kw}")));
    }
    if !oracle.trackable(0.0, t_s)? {
        return Err(Error::BaselineUntrackable { failed_at_s: t_s });
    }
    let mut alpha = 0.0;
    let mut beta = initial_kw;
    let mut doublings = 0usize;
    while oracle.trackable(sign * beta, t_s)? {
        alpha = beta;
        beta *= 2.0;
        doublings += 1;
        if beta > cap_kw {
            return Err(Error::UnboundedSearch(doublings));
        }
    }
    while beta - alpha > tol_kw {
        let mid = 0.5 * (alpha + beta);
        if oracle.trackable(sign * mid, t_s)? {
            alpha = mid;
        } else {
            beta = mid;
        }
    }
    Ok(sign * alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    /// Offset held from time 0 through `t`.
    #[default]
    Sustained,
    /// Baseline up to `t`, offset only on the step ending at `t`.
    Instantaneous,
}

/// Trackability probe running the dispatch controller on an ensemble.
///
/// Sustained probes are run once per distinct offset over the full horizon
/// and their first failure is memoized, so probes at different grid times
/// share work. Instantaneous probes reuse the dispatched baseline run.
pub struct EnsembleProbe<'a> {
    ensemble: &'a Ensemble,
    baseline_kw: &'a [f64],
    dt_s: f64,
    cfg: DispatchConfig,
    semantics: Semantics,
    first_failure: HashMap<u64, Option<usize>>,
    /// States reached while dispatching the unmodified baseline.
    baseline_states: Option<(Vec<EnsembleState>, Option<usize>)>,
    probes_run: usize,
}

impl<'a> EnsembleProbe<'a> {
    pub fn new(
        ensemble: &'a Ensemble,
        baseline_kw: &'a [f64],
        dt_s: f64,
        cfg: DispatchConfig,
        semantics: Semantics,
    ) -> Result<Self> {
        cfg.validate()?;
        ensemble.check_state(&ensemble.initial)?;
        Ok(Self {
            ensemble,
            baseline_kw,
            dt_s,
            cfg,
            semantics,
            first_failure: HashMap::new(),
            baseline_states: None,
            probes_run: 0,
        })
    }

    /// Number of full dispatch runs performed so far.
    pub fn probes_run(&self) -> usize {
        self.probes_run
    }

    fn steps_through(&self, t_s: f64) -> Result<usize> {
        let k = steps_for(t_s, self.dt_s)?;
        if k > self.baseline_kw.len() {
            return Err(Error::GridMismatch {
                expected: format!("t ≤ {} s", self.baseline_kw.len() as f64 * self.dt_s),
                found: format!("t = {t_s} s"),
            });
        }
        Ok(k)
    }

    fn sustained_failure(&mut self, offset_kw: f64) -> Result<Option<usize>> {
        let key = offset_kw.to_bits();
        if let Some(&hit) = self.first_failure.get(&key) {
            return Ok(hit);
        }
        self.probes_run += 1;
        let mut state = self.ensemble.initial.clone();
        let mut failure = None;
        for (k, &base) in self.baseline_kw.iter().enumerate() {
            let sol = solve_dispatch(self.ensemble, &state, base + offset_kw, &self.cfg, self.dt_s)?;
            if !sol.is_feasible() {
                failure = Some(k);
                break;
            }
            state = self.ensemble.advance(&state, &sol.statuses, self.dt_s)?;
        }
        self.first_failure.insert(key, failure);
        Ok(failure)
    }

    fn baseline_run(&mut self) -> Result<&(Vec<EnsembleState>, Option<usize>)> {
        if self.baseline_states.is_none() {
            self.probes_run += 1;
            let mut states = vec![self.ensemble.initial.clone()];
            let mut failure = None;
            for (k, &base) in self.baseline_kw.iter().enumerate() {
                let state = states.last().expect("non-empty");
                let sol = solve_dispatch(self.ensemble, state, base, &self.cfg, self.dt_s)?;
                if !sol.is_feasible() {
                    failure = Some(k);
                    break;
                }
                let next = self.ensemble.advance(state, &sol.statuses, self.dt_s)?;
                states.push(next);
            }
            self.baseline_states = Some((states, failure));
        }
        Ok(self.baseline_states.as_ref().expect("just set"))
    }
}

impl TrackingOracle for EnsembleProbe<'_> {
    fn trackable(&mut self, offset_kw: f64, t_s: f64) -> Result<bool> {
        let k = self.steps_through(t_s)?;
        if k == 0 {
            return Ok(true);
        }
        match self.semantics {
            Semantics::Sustained => Ok(self.sustained_failure(offset_kw)?.is_none_or(|f| f >= k)),
            Semantics::Instantaneous => {
                let (ensemble, cfg, dt) = (self.ensemble, self.cfg, self.dt_s);
                let target = self.baseline_kw[k - 1] + offset_kw;
                let (states, failure) = self.baseline_run()?;
                if failure.is_some_and(|f| f < k - 1) {
                    return Ok(false);
                }
                if offset_kw == 0.0 {
                    return Ok(failure.is_none_or(|f| f >= k));
                }
                Ok(solve_dispatch(ensemble, &states[k - 1], target, &cfg, dt)?.is_feasible())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvelopeConfig {
    pub stride_s: f64,
    pub tolerance_kw: f64,
    pub initial_kw: f64,
    pub semantics: Semantics,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self { stride_s: 300.0, tolerance_kw: 0.1, initial_kw: 1.0, semantics: Semantics::Sustained }
    }
}

/// Limits on the deviation from baseline, per probe time and per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEnvelope {
    /// Probe times `j·stride`, `j = 1..`.
    pub grid_times_s: Vec<f64>,
    pub grid_plus: Vec<f64>,
    pub grid_minus: Vec<f64>,
    pub dt_s: f64,
    /// Upper limit for each step `[k·dt, (k+1)·dt)`, kW.
    pub p_plus: Vec<f64>,
    pub p_minus: Vec<f64>,
    pub tolerance: f64,
}

impl PowerEnvelope {
    /// Same limits on every step, with a single probe at the horizon.
    pub fn constant(dt_s: f64, steps: usize, p_minus: f64, p_plus: f64, tolerance: f64) -> Self {
        Self {
            grid_times_s: vec![steps as f64 * dt_s],
            grid_plus: vec![p_plus],
            grid_minus: vec![p_minus],
            dt_s,
            p_plus: vec![p_plus; steps],
            p_minus: vec![p_minus; steps],
            tolerance,
        }
    }

    /// Expands grid values to steps: step `k` takes the value probed at the
    /// first grid time at or after its end `(k+1)·dt`.
    pub fn from_grid(
        grid_times_s: Vec<f64>,
        grid_minus: Vec<f64>,
        grid_plus: Vec<f64>,
        dt_s: f64,
        steps: usize,
        tolerance: f64,
    ) -> Result<Self> {
        if grid_times_s.is_empty() || grid_times_s.len() != grid_plus.len() || grid_plus.len() != grid_minus.len() {
            return Err(Error::InvalidParams("envelope grid vectors must be non-empty and equal length".into()));
        }
        let mut p_plus = Vec::with_capacity(steps);
        let mut p_minus = Vec::with_capacity(steps);
        let mut j = 0;
        for k in 0..steps {
            let end = (k + 1) as f64 * dt_s;
            while j + 1 < grid_times_s.len() && grid_times_s[j] < end - 1e-9 {
                j += 1;
            }
            p_plus.push(grid_plus[j]);
            p_minus.push(grid_minus[j]);
        }
        Ok(Self { grid_times_s, grid_plus, grid_minus, dt_s, p_plus, p_minus, tolerance })
    }

    pub fn steps(&self) -> usize {
        self.p_plus.len()
    }

    /// Writes the per-step envelope as `time_s,p_minus_kw,p_plus_kw`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time_s", "p_minus_kw", "p_plus_kw"])?;
        for k in 0..self.steps() {
            w.write_record([
                (k as f64 * self.dt_s).to_string(),
                self.p_minus[k].to_string(),
                self.p_plus[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a per-step envelope written by [`PowerEnvelope::write_csv`].
    pub fn read_csv<R: Read>(reader: R, tolerance: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let (mut times, mut minus, mut plus) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Parse(format!("row {}: missing column {i}", row + 1)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", row + 1)))
            };
            times.push(field(0)?);
            minus.push(field(1)?);
            plus.push(field(2)?);
        }
        let dt_s = crate::devices::uniform_spacing(&times)?
            .ok_or_else(|| Error::Parse("envelope needs at least two rows".into()))?;
        let steps = plus.len();
        let grid_times_s = (1..=steps).map(|k| k as f64 * dt_s).collect();
        Ok(Self {
            grid_times_s,
            grid_plus: plus.clone(),
            grid_minus: minus.clone(),
            dt_s,
            p_plus: plus,
            p_minus: minus,
            tolerance,
        })
    }
}

/// Probes upper and lower limits on the grid `stride, 2·stride, …, horizon`.
pub fn compute_envelope(
    ensemble: &Ensemble,
    baseline_kw: &[f64],
    dt_s: f64,
    dispatch: &DispatchConfig,
    cfg: &EnvelopeConfig,
) -> Result<PowerEnvelope> {
    let steps = baseline_kw.len();
    let horizon_s = steps as f64 * dt_s;
    let points = steps_for(horizon_s, cfg.stride_s)?;
    steps_for(cfg.stride_s, dt_s)?;
    let mut probe = EnsembleProbe::new(ensemble, baseline_kw, dt_s, *dispatch, cfg.semantics)?;
    // No offset beyond the full rated power can ever be followed.
    let cap = 4.0 * ensemble.total_rated_power().max(cfg.initial_kw) + cfg.initial_kw;
    let mut grid_times_s = Vec::with_capacity(points);
    let mut grid_plus = Vec::with_capacity(points);
    let mut grid_minus = Vec::with_capacity(points);
    for j in 1..=points {
        let t = j as f64 * cfg.stride_s;
        grid_times_s.push(t);
        grid_plus.push(upper_limit(&mut probe, t, cfg.tolerance_kw, cfg.initial_kw, cap)?);
        grid_minus.push(lower_limit(&mut probe, t, cfg.tolerance_kw, cfg.initial_kw, cap)?);
    }
    PowerEnvelope::from_grid(grid_times_s, grid_minus, grid_plus, dt_s, steps, cfg.tolerance_kw)
}
