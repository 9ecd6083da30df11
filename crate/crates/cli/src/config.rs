use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tclvb_core::devices::EnsembleSpec;
use tclvb_core::dispatch::DispatchConfig;
use tclvb_core::envelope::EnvelopeConfig;
use tclvb_core::fitting::{FitConfig, IcMode};
use tclvb_core::series::steps_for;
use tclvb_core::signals::SynthOptions;

/// Where normalized regulation signals come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSource {
    /// Signal `i` is synthesized from seed `seed + i`.
    Synth {
        seed: u64,
        #[serde(default)]
        options: SynthOptions,
    },
    /// Normalized `time_s,value` CSV files, used in order.
    Files { paths: Vec<PathBuf> },
}

impl Default for SignalSource {
    fn default() -> Self {
        SignalSource::Synth { seed: 1000, options: SynthOptions::default() }
    }
}

/// Dispatch settings with the tolerance optionally left to the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispatchSettings {
    /// Absolute tracking tolerance, kW. Overrides `epsilon_fraction`.
    pub epsilon_kw: Option<f64>,
    /// Tolerance as a fraction of mean baseline power.
    pub epsilon_fraction: f64,
    pub w_ac: f64,
    pub w_ewh: f64,
    pub penalty: f64,
    pub max_iters: usize,
    pub rounding_threshold: f64,
}

impl Default for DispatchSettings {
    fn default() -> Self {
        let d = DispatchConfig::default();
        Self {
            epsilon_kw: None,
            epsilon_fraction: 0.01,
            w_ac: d.w_ac,
            w_ewh: d.w_ewh,
            penalty: d.penalty,
            max_iters: d.max_iters,
            rounding_threshold: d.rounding_threshold,
        }
    }
}

impl DispatchSettings {
    pub fn resolve(&self, baseline_mean_kw: f64) -> DispatchConfig {
        DispatchConfig {
            epsilon_kw: self.epsilon_kw.unwrap_or(self.epsilon_fraction * baseline_mean_kw),
            w_ac: self.w_ac,
            w_ewh: self.w_ewh,
            penalty: self.penalty,
            max_iters: self.max_iters,
            rounding_threshold: self.rounding_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub ensemble: EnsembleSpec,
    pub horizon_s: f64,
    pub dt_s: f64,
    pub gamma: f64,
    pub n_signals: usize,
    pub signal_source: SignalSource,
    pub dispatch: DispatchSettings,
    pub envelope: EnvelopeConfig,
    pub fit: FitConfig,
    /// Initial condition used for the primary fit and the SOC validation.
    pub ic_mode: IcMode,
    /// Parameter evolution is fitted on the first `n` generated signals
    /// (rejected ones dropped) for each `n` here.
    pub evolution_sizes: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleSpec::default(),
            horizon_s: 7200.0,
            dt_s: 10.0,
            gamma: 0.1,
            n_signals: 200,
            signal_source: SignalSource::default(),
            dispatch: DispatchSettings::default(),
            envelope: EnvelopeConfig::default(),
            fit: FitConfig::default(),
            ic_mode: IcMode::Analytic,
            evolution_sizes: vec![50, 100, 150, 200],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ScenarioConfig {
    /// 100 ACs, the reference scenario.
    pub fn ac_default() -> Self {
        Self::default()
    }

    /// 120 EWHs and no ACs. The heaters are few and large relative to the
    /// baseline, so 1% of the mean is below the smallest achievable power step;
    /// the tolerance is widened to 5%.
    pub fn ewh_default() -> Self {
        let mut c = Self::default();
        c.ensemble.n_ac = 0;
        c.ensemble.n_ewh = 120;
        c.dispatch.epsilon_fraction = 0.05;
        c
    }

    /// Same scenario at the 1 s reference resolution.
    pub fn full_resolution(mut self) -> Self {
        self.dt_s = 1.0;
        self
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        steps_for(self.horizon_s, self.dt_s)?;
        steps_for(self.horizon_s, self.envelope.stride_s)?;
        steps_for(self.envelope.stride_s, self.dt_s)?;
        anyhow::ensure!(self.gamma.is_finite() && self.gamma >= 0.0, "gamma must be finite and ≥ 0");
        anyhow::ensure!(self.envelope.tolerance_kw > 0.0, "envelope tolerance must be positive");
        anyhow::ensure!(
            self.dispatch.epsilon_kw.is_none_or(|e| e > 0.0) && self.dispatch.epsilon_fraction > 0.0,
            "tracking tolerance must be positive"
        );
        anyhow::ensure!(
            self.evolution_sizes.windows(2).all(|w| w[0] < w[1]),
            "evolution sizes must be strictly increasing"
        );
        if let SignalSource::Files { paths } = &self.signal_source {
            anyhow::ensure!(
                paths.len() >= self.n_signals,
                "{} signal files listed but n_signals = {}",
                paths.len(),
                self.n_signals
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = ScenarioConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ScenarioConfig = serde_json::from_str(r#"{"gamma": 0.2, "ensemble": {"n_ac": 10}}"#).unwrap();
        assert_eq!(c.gamma, 0.2);
        assert_eq!(c.ensemble.n_ac, 10);
        assert_eq!(c.horizon_s, 7200.0);
    }

    #[test]
    fn rejects_misaligned_grid() {
        let c = ScenarioConfig { dt_s: 7.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
