//! Identification of `(a, C)` from ensemble violation times.
//!
//! Minimizes `√Σ log²(max(Fᵢ − Bᵢ, 1 s))` subject to `Bᵢ ≤ Fᵢ`, where `B`
//! are the battery's violation times under bounds `±C`. At fixed `a`, each
//! `Bᵢ` is non-decreasing in `C`, so the constraint is an upper bound on `C`
//! and the cost is non-increasing in `C`: the best `C` for a given `a` is
//! that bound. The search is then one-dimensional in `a`.

use serde::{Deserialize, Serialize};

use crate::envelope::PowerEnvelope;
use crate::vb::{vb_simulate, vb_violation_time, VbParams, CAPACITY_TOL};
use crate::{Error, Result};

/// Gaps below this many seconds cost nothing.
pub const LOG_FLOOR_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    /// Ensemble violation times `F`, s.
    pub violation_times_s: Vec<f64>,
    /// Deviation series `u` per signal, kW, one value per step.
    pub deviations: Vec<Vec<f64>>,
    pub dt_s: f64,
    pub x0_kwh: f64,
    pub horizon_s: f64,
    pub envelope: Option<PowerEnvelope>,
    /// Only `C₂ = −C₁` is supported.
    pub symmetric: bool,
}

impl FitProblem {
    pub fn validate(&self) -> Result<()> {
        if !self.symmetric {
            return Err(Error::InvalidParams("only symmetric capacity bounds can be fitted".into()));
        }
        if self.violation_times_s.is_empty() || self.violation_times_s.len() != self.deviations.len() {
            return Err(Error::InvalidParams(format!(
                "{} violation times for {} signals",
                self.violation_times_s.len(),
                self.deviations.len()
            )));
        }
        let steps = crate::series::steps_for(self.horizon_s, self.dt_s)?;
        for (i, (f, u)) in self.violation_times_s.iter().zip(&self.deviations).enumerate() {
            if !(*f > 0.0 && *f <= self.horizon_s + 1e-9) {
                return Err(Error::InvalidParams(format!("signal {i}: violation time {f} outside (0, horizon]")));
            }
            if u.len() != steps {
                return Err(Error::GridMismatch { expected: format!("{steps} steps"), found: format!("{}", u.len()) });
            }
        }
        if !self.x0_kwh.is_finite() {
            return Err(Error::InvalidParams("initial state must be finite".into()));
        }
        Ok(())
    }

    /// The first `n` signals (all of them if `n` is larger).
    pub fn prefix(&self, n: usize) -> FitProblem {
        let n = n.min(self.deviations.len());
        FitProblem {
            violation_times_s: self.violation_times_s[..n].to_vec(),
            deviations: self.deviations[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn with_x0(&self, x0_kwh: f64) -> FitProblem {
        FitProblem { x0_kwh, ..self.clone() }
    }

    fn is_full(&self, f: f64) -> bool {
        f >= self.horizon_s - 1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub a_min: f64,
    pub a_max: f64,
    pub c_min: f64,
    pub c_max: f64,
    /// Log-spaced points on the coarse `a` grid.
    pub a_points: usize,
    pub refine_rounds: usize,
    pub refine_points: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { a_min: 1e-3, a_max: 10.0, c_min: 0.1, c_max: 1e4, a_points: 61, refine_rounds: 3, refine_points: 11 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcMode {
    Zero,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a_per_h: f64,
    pub c_kwh: f64,
    pub x0_kwh: f64,
    pub objective: f64,
    /// Battery violation times at the fitted parameters, s.
    pub b_s: Vec<f64>,
    /// Set when the optimum sits on a search boundary.
    pub saturated: bool,
    pub n_signals: usize,
}

impl FitResult {
    pub fn params(&self) -> VbParams {
        VbParams::symmetric(self.a_per_h, self.c_kwh, self.x0_kwh)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub cost: f64,
    pub b_s: Vec<f64>,
    pub feasible: bool,
}

fn cost_of(f: &[f64], b: &[f64]) -> f64 {
    f.iter()
        .zip(b)
        .map(|(f, b)| {
            let l = (f - b).max(LOG_FLOOR_S).ln();
            l * l
        })
        .sum::<f64>()
        .sqrt()
}

/// Evaluates the fit objective by simulating the battery on every signal.
pub fn fit_objective(a_per_h: f64, c_kwh: f64, problem: &FitProblem) -> Result<ObjectiveValue> {
    let params = VbParams::symmetric(a_per_h, c_kwh, problem.x0_kwh);
    let b_s = problem
        .deviations
        .iter()
        .map(|u| vb_violation_time(&params, problem.envelope.as_ref(), u, problem.dt_s))
        .collect::<Result<Vec<_>>>()?;
    let feasible = b_s.iter().zip(&problem.violation_times_s).all(|(b, f)| b <= f);
    Ok(ObjectiveValue { cost: cost_of(&problem.violation_times_s, &b_s), b_s, feasible })
}

/// Per-signal battery trajectories at one dissipation rate.
struct Profile {
    /// `|x_k|` for `k = 0..=steps`.
    magnitudes: Vec<Vec<f64>>,
    /// Largest `C` keeping `B ≤ F`, capped by the grid.
    c_bound: f64,
}

struct Evaluator<'a> {
    problem: &'a FitProblem,
    cfg: FitConfig,
    /// Step index at which the input first leaves the envelope, if ever.
    envelope_exit: Vec<Option<usize>>,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a FitProblem, cfg: FitConfig) -> Self {
        let envelope_exit = problem
            .deviations
            .iter()
            .map(|u| {
                problem.envelope.as_ref().and_then(|env| {
                    u.iter().enumerate().position(|(k, &v)| v > env.p_plus[k] || v < env.p_minus[k])
                })
            })
            .collect();
        Self { problem, cfg, envelope_exit }
    }

    fn profile(&self, a: f64) -> Profile {
        let p = self.problem;
        let mut c_bound = self.cfg.c_max;
        let mut magnitudes = Vec::with_capacity(p.deviations.len());
        for (i, u) in p.deviations.iter().enumerate() {
            let mags: Vec<f64> = vb_simulate(p.x0_kwh, a, u, p.dt_s).into_iter().map(f64::abs).collect();
            let f = p.violation_times_s[i];
            if !p.is_full(f) {
                let last = ((f + 1e-9) / p.dt_s).floor() as usize;
                let exits_in_time = self.envelope_exit[i].is_some_and(|k| k < last);
                if !exits_in_time {
                    let peak = mags[..=last.min(mags.len() - 1)].iter().copied().fold(0.0, f64::max);
                    c_bound = c_bound.min(peak + CAPACITY_TOL);
                }
            }
            magnitudes.push(mags);
        }
        Profile { magnitudes, c_bound }
    }

    /// Violation times from stored trajectories at capacity `c`.
    fn breach_times(&self, profile: &Profile, c: f64) -> Vec<f64> {
        let dt = self.problem.dt_s;
        profile
            .magnitudes
            .iter()
            .zip(&self.envelope_exit)
            .map(|(mags, exit)| {
                let cap = mags.iter().position(|&m| m >= c - CAPACITY_TOL);
                let env = exit.map(|k| k + 1);
                match (cap, env) {
                    (Some(a), Some(b)) => a.min(b) as f64 * dt,
                    (Some(a), None) => a as f64 * dt,
                    (None, Some(b)) => b as f64 * dt,
                    (None, None) => (mags.len() - 1) as f64 * dt,
                }
            })
            .collect()
    }

    /// Cost at the best capacity for `a`, or `None` if no capacity is feasible.
    fn cost_at(&self, a: f64) -> Option<(f64, Profile)> {
        let profile = self.profile(a);
        if profile.c_bound < self.cfg.c_min {
            return None;
        }
        let b = self.breach_times(&profile, profile.c_bound);
        Some((cost_of(&self.problem.violation_times_s, &b), profile))
    }

    /// Smallest capacity giving the same violation times as `profile.c_bound`.
    fn lowest_equivalent_c(&self, profile: &Profile) -> f64 {
        let target = self.breach_times(profile, profile.c_bound);
        let (mut lo, mut hi) = (self.cfg.c_min, profile.c_bound);
        if self.breach_times(profile, lo) == target {
            return lo;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.breach_times(profile, mid) == target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || lo == hi {
        return vec![lo];
    }
    let (l0, l1) = (lo.ln(), hi.ln());
    (0..n).map(|i| (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Lexicographic `(cost, a)` comparison used for every argmin.
fn better(cost: f64, a: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((bc, ba)) => cost < bc || (cost == bc && a < ba),
    }
}

/// Fits `(a, C)` with `C₂ = −C₁ = C` and the problem's fixed `x₀`.
pub fn fit_vb(problem: &FitProblem) -> Result<FitResult> {
    fit_vb_with(problem, &FitConfig::default())
}

pub fn fit_vb_with(problem: &FitProblem, cfg: &FitConfig) -> Result<FitResult> {
    problem.validate()?;
    if !(cfg.a_min > 0.0 && cfg.a_max >= cfg.a_min && cfg.c_min > 0.0 && cfg.c_max >= cfg.c_min && cfg.a_points >= 2) {
        return Err(Error::InvalidParams(format!("invalid fit configuration {cfg:?}")));
    }
    let eval = Evaluator::new(problem, *cfg);

    let mut grid = log_grid(cfg.a_min, cfg.a_max, cfg.a_points);
    let mut best: Option<(f64, f64)> = None;
    let mut best_idx = 0;
    for (i, &a) in grid.iter().enumerate() {
        if let Some((cost, _)) = eval.cost_at(a) {
            if better(cost, a, best) {
                best = Some((cost, a));
                best_idx = i;
            }
        }
    }
    let Some(_) = best else {
        return Err(Error::NoFeasibleFit);
    };
    let on_a_boundary = best_idx == 0 || best_idx == grid.len() - 1;

    for _ in 0..cfg.refine_rounds {
        let lo = grid[best_idx.saturating_sub(1)];
        let hi = grid[(best_idx + 1).min(grid.len() - 1)];
        grid = log_grid(lo, hi, cfg.refine_points.max(3));
        for &a in &grid {
            if let Some((cost, _)) = eval.cost_at(a) {
                if better(cost, a, best) {
                    best = Some((cost, a));
                }
            }
        }
        let a_best = best.expect("set above").1.ln();
        best_idx = (0..grid.len())
            .min_by(|&i, &j| (grid[i].ln() - a_best).abs().total_cmp(&(grid[j].ln() - a_best).abs()))
            .expect("non-empty grid");
    }

    let (_, a) = best.expect("set above");
    let (_, profile) = eval.cost_at(a).expect("best point is feasible");
    let c = eval.lowest_equivalent_c(&profile);

    // Re-check through the public simulator rather than the cached profile.
    let check = fit_objective(a, c, problem)?;
    if !check.feasible {
        return Err(Error::InvalidState(format!("fitted point a={a}, C={c} violates B ≤ F")));
    }
    let saturated = on_a_boundary || profile.c_bound >= cfg.c_max || c <= cfg.c_min;
    Ok(FitResult {
        a_per_h: a,
        c_kwh: c,
        x0_kwh: problem.x0_kwh,
        objective: check.cost,
        b_s: check.b_s,
        saturated,
        n_signals: problem.deviations.len(),
    })
}

/// Fits on nested prefixes of the signal set, one result per size.
pub fn parameter_evolution(problem: &FitProblem, sizes: &[usize]) -> Result<Vec<(usize, FitResult)>> {
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParams("subset sizes must be strictly increasing".into()));
    }
    sizes
        .iter()
        .map(|&n| {
            let n = n.min(problem.deviations.len());
            fit_vb(&problem.prefix(n)).map(|r| (n, r))
        })
        .collect()
}

/// Fits with `x₀ = 0` and with the given analytic `x₀`.
pub fn compare_ic_modes(problem: &FitProblem, analytic_x0_kwh: f64) -> Result<(FitResult, FitResult)> {
    Ok((fit_vb(&problem.with_x0(0.0))?, fit_vb(&problem.with_x0(analytic_x0_kwh))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(f: Vec<f64>, u: Vec<Vec<f64>>, dt: f64, x0: f64) -> FitProblem {
        let horizon = u[0].len() as f64 * dt;
        FitProblem {
            violation_times_s: f,
            deviations: u,
            dt_s: dt,
            x0_kwh: x0,
            horizon_s: horizon,
            envelope: None,
            symmetric: true,
        }
    }

    #[test]
    fn objective_fixed_points() {
        // a = 0, x₀ = 0, u = 1 kW: |x| = t/3600 kWh, so C = 1 breaches at 3600 s.
        let u = vec![1.0; 720];
        let p = problem(vec![3601.0], vec![u.clone()], 10.0, 0.0);
        let o = fit_objective(0.0, 1.0, &p).unwrap();
        assert_eq!(o.b_s, vec![3600.0]);
        assert_eq!(o.cost, 0.0);
        assert!(o.feasible);

        let p = problem(vec![3600.0 + std::f64::consts::E], vec![u.clone()], 10.0, 0.0);
        assert!((fit_objective(0.0, 1.0, &p).unwrap().cost - 1.0).abs() < 1e-12);

        let p = problem(vec![3000.0], vec![u], 10.0, 0.0);
        assert!(!fit_objective(0.0, 1.0, &p).unwrap().feasible);
    }

    fn random_signals(seed: u64, n: usize, steps: usize, scale: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let level: f64 = rng.random_range(-1.0..1.0) * scale;
                let mut v = 0.0;
                (0..steps)
                    .map(|_| {
                        v = 0.98 * v + 0.2 * rng.random_range(-1.0..1.0) * scale;
                        level + v
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn recovers_known_battery() {
        let (a_true, c_true, x0) = (0.05, 60.0, 40.0);
        let dt = 10.0;
        let steps = 720;
        let signals = random_signals(7, 20, steps, 40.0);
        let truth = VbParams::symmetric(a_true, c_true, x0);
        let f: Vec<f64> = signals
            .iter()
            .map(|u| {
                let b = vb_violation_time(&truth, None, u, dt).unwrap();
                if b < steps as f64 * dt {
                    b + 1.0
                } else {
                    b
                }
            })
            .collect();
        assert!(f.iter().filter(|&&v| v < 7200.0).count() >= 5);
        let p = problem(f.clone(), signals, dt, x0);
        let fit = fit_vb(&p).unwrap();
        assert!((fit.a_per_h - a_true).abs() <= 0.2 * a_true, "{fit:?}");
        assert!((fit.c_kwh - c_true).abs() <= 0.1 * c_true, "{fit:?}");
        assert!(fit.b_s.iter().zip(&f).all(|(b, f)| b <= f));
    }

    #[test]
    fn never_violated_is_saturated() {
        let u = vec![vec![0.5; 72], vec![-0.5; 72]];
        let p = problem(vec![720.0, 720.0], u, 10.0, 0.0);
        let fit = fit_vb(&p).unwrap();
        assert!(fit.saturated);
    }

    #[test]
    fn unattainable_times_are_reported() {
        // Fails after one step with zero input: no battery breaches that fast
        // unless C ≤ |x₀|, and x₀ = 0 forces C below the grid.
        let p = problem(vec![10.0], vec![vec![0.0; 72]], 10.0, 0.0);
        assert!(matches!(fit_vb(&p), Err(Error::NoFeasibleFit)));
    }

    #[test]
    fn duplicate_signal_changes_nothing() {
        let signals = random_signals(3, 6, 360, 30.0);
        let truth = VbParams::symmetric(0.1, 20.0, 5.0);
        let f: Vec<f64> = signals.iter().map(|u| vb_violation_time(&truth, None, u, 10.0).unwrap()).collect();
        let p = problem(f.clone(), signals.clone(), 10.0, 5.0);
        let mut f2 = f;
        f2.push(f2[0]);
        let mut s2 = signals;
        s2.push(s2[0].clone());
        let p2 = problem(f2, s2, 10.0, 5.0);
        let (r1, r2) = (fit_vb(&p).unwrap(), fit_vb(&p2).unwrap());
        assert_eq!((r1.a_per_h, r1.c_kwh), (r2.a_per_h, r2.c_kwh));
        let evo = parameter_evolution(&p, &[1, 3, 6]).unwrap();
        assert_eq!(evo.len(), 3);
        assert_eq!(evo[2].1, r1);
    }

    #[test]
    fn fit_is_deterministic() {
        let signals = random_signals(11, 8, 360, 30.0);
        let truth = VbParams::symmetric(0.2, 15.0, 0.0);
        let f: Vec<f64> = signals.iter().map(|u| vb_violation_time(&truth, None, u, 10.0).unwrap()).collect();
        let p = problem(f, signals, 10.0, 0.0);
        assert_eq!(fit_vb(&p).unwrap(), fit_vb(&p).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn larger_capacity_never_breaches_earlier(
            seed in 0u64..1000, a in 0.0f64..2.0, c in 1.0f64..50.0, extra in 0.0f64..50.0,
        ) {
            let u = &random_signals(seed, 1, 200, 30.0)[0];
            let small = vb_violation_time(&VbParams::symmetric(a, c, 0.0), None, u, 10.0).unwrap();
            let large = vb_violation_time(&VbParams::symmetric(a, c + extra, 0.0), None, u, 10.0).unwrap();
            prop_assert!(large >= small);
        }
    }
}
