//! Stage-by-stage scenario pipeline with a content-addressed cache.
//!
//! Every stage result is stored under `<output_dir>/cache/<stage>-<hash>.json`
//! where the hash covers exactly the configuration the stage depends on, so
//! changing e.g. `gamma` reuses the cached baseline and envelope.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tclvb_core::devices::{compute_baseline, sample_ensemble, Baseline, Ensemble};
use tclvb_core::dispatch::{track_signal, DispatchConfig};
use tclvb_core::envelope::{compute_envelope, PowerEnvelope};
use tclvb_core::fitting::{fit_vb_with, FitProblem, FitResult, IcMode};
use tclvb_core::signals::{build_regulation, filter_by_envelope, load_normalized, synth_normalized_with, RegulationSignal};
use tclvb_core::vb::{analytic_soc_trace, band_energy, initial_soc, vb_soc_trace, SocSource, SocTrace};

use crate::config::{ScenarioConfig, SignalSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Baseline,
    Envelope,
    Signals,
    Track,
    Fit,
    Validate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Baseline => "baseline",
            Stage::Envelope => "envelope",
            Stage::Signals => "signals",
            Stage::Track => "track",
            Stage::Fit => "fit",
            Stage::Validate => "validate",
            Stage::Report => "report",
        }
    }

    /// Process exit code reported when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Baseline => 10,
            Stage::Envelope => 11,
            Stage::Signals => 12,
            Stage::Track => 13,
            Stage::Fit => 14,
            Stage::Validate => 15,
            Stage::Report => 16,
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {:#}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageError {}

trait InStage<T> {
    fn stage(self, stage: Stage) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> InStage<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, source: e.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStage {
    pub ensemble: Ensemble,
    pub baseline: Baseline,
    pub x0_analytic_kwh: f64,
    pub band_energy_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeStage {
    pub dispatch: DispatchConfig,
    pub envelope: PowerEnvelope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalsStage {
    /// Every generated signal, in generation order.
    pub signals: Vec<RegulationSignal>,
    /// Ids of the signals inside the envelope, in generation order.
    pub accepted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: String,
    pub violation_time_s: f64,
    pub achieved_kw: Vec<f64>,
    pub rel_err_pct: Vec<f64>,
    /// Analytic SOC at every tracked instant, starting at t = 0.
    pub analytic_soc_kwh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionPoint {
    pub n_generated: usize,
    pub n_accepted: usize,
    pub fit: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStage {
    pub zero: FitResult,
    pub analytic: FitResult,
    /// Fits on generated-signal prefixes, with the configured initial condition.
    pub evolution: Vec<EvolutionPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocComparison {
    pub id: String,
    pub rms_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateStage {
    /// One entry per tracked signal, in acceptance order.
    pub comparisons: Vec<SocComparison>,
    /// Traces of the first accepted signal.
    pub vb_trace: SocTrace,
    pub analytic_trace: SocTrace,
}

/// Structured fit record as written to `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub a_per_h: f64,
    pub c_kwh: f64,
    pub x0_kwh: f64,
    pub objective: f64,
    pub n_signals: usize,
    pub ic_mode: IcMode,
    pub saturated: bool,
}

impl FitRecord {
    fn new(fit: &FitResult, ic_mode: IcMode) -> Self {
        Self {
            a_per_h: fit.a_per_h,
            c_kwh: fit.c_kwh,
            x0_kwh: fit.x0_kwh,
            objective: fit.objective,
            n_signals: fit.n_signals,
            ic_mode,
            saturated: fit.saturated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRow {
    pub n_generated: usize,
    pub n_accepted: usize,
    pub a_per_h: f64,
    pub c_kwh: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    /// Emitted files, relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub baseline_mean_kw: f64,
    pub epsilon_kw: Option<f64>,
    pub x0_analytic_kwh: f64,
    pub band_energy_kwh: f64,
    pub n_generated: usize,
    pub n_accepted: usize,
    pub n_violated: usize,
    /// Largest per-step relative error over the signals tracked to the horizon.
    pub max_rel_err_pct: Option<f64>,
    pub fit: Option<FitRecord>,
    pub fit_zero: Option<FitRecord>,
    pub fit_analytic: Option<FitRecord>,
    pub evolution: Vec<EvolutionRow>,
    /// SOC trace RMS error on the first accepted signal, kWh.
    pub soc_rms_kwh: Option<f64>,
    pub soc_rms_max_kwh: Option<f64>,
}

/// RMS difference between two SOC traces on the same grid.
pub fn validate_soc(vb: &SocTrace, analytic: &SocTrace) -> tclvb_core::Result<f64> {
    tclvb_core::series::check_same_grid(vb.dt_s, vb.soc_kwh.len(), analytic.dt_s, analytic.soc_kwh.len())?;
    if vb.soc_kwh.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = vb.soc_kwh.iter().zip(&analytic.soc_kwh).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sum / vb.soc_kwh.len() as f64).sqrt())
}

fn digest(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("JSON values serialize");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

struct Cache {
    dir: PathBuf,
}

impl Cache {
    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{key}.json"))
    }

    fn load<T: DeserializeOwned>(&self, stage: &str, key: &str) -> Option<T> {
        let text = fs::read(self.path(stage, key)).ok()?;
        serde_json::from_slice(&text).ok()
    }

    fn store<T: Serialize>(&self, stage: &str, key: &str, value: &T) -> anyhow::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!(".{stage}-{key}.tmp"));
        serde_json::to_writer(BufWriter::new(fs::File::create(&tmp)?), value)?;
        fs::rename(&tmp, self.path(stage, key))?;
        Ok(())
    }
}

/// Runs stages on demand, loading from and saving to the cache.
pub struct Pipeline {
    cfg: ScenarioConfig,
    out: PathBuf,
    cache: Cache,
    keys: StageKeys,
    artifacts: BTreeSet<PathBuf>,
    baseline: Option<BaselineStage>,
    envelope: Option<EnvelopeStage>,
    signals: Option<SignalsStage>,
    tracks: Option<Vec<TrackRecord>>,
    fit: Option<Option<FitStage>>,
    validation: Option<Option<ValidateStage>>,
}

struct StageKeys {
    config: String,
    baseline: String,
    envelope: String,
    signals: String,
    fit: String,
}

impl StageKeys {
    fn new(c: &ScenarioConfig) -> Self {
        let base = json!({ "ensemble": c.ensemble, "horizon_s": c.horizon_s, "dt_s": c.dt_s });
        let env = json!({ "base": base, "dispatch": c.dispatch, "envelope": c.envelope });
        let sig = json!({
            "env": env, "gamma": c.gamma, "n_signals": c.n_signals, "source": c.signal_source,
        });
        let fit = json!({
            "sig": sig, "fit": c.fit, "ic_mode": c.ic_mode, "evolution_sizes": c.evolution_sizes,
        });
        let mut all = serde_json::to_value(c).expect("config serializes");
        all.as_object_mut().expect("config is an object").remove("output_dir");
        Self { config: digest(&all), baseline: digest(&base), envelope: digest(&env), signals: digest(&sig), fit: digest(&fit) }
    }
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[tclvb] {}", msg.as_ref());
}

impl Pipeline {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, StageError> {
        cfg.validate().stage(Stage::Config)?;
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).stage(Stage::Config)?;
        let keys = StageKeys::new(&cfg);
        Ok(Self {
            cache: Cache { dir: out.join("cache") },
            out,
            cfg,
            keys,
            artifacts: BTreeSet::new(),
            baseline: None,
            envelope: None,
            signals: None,
            tracks: None,
            fit: None,
            validation: None,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    fn write_artifact(
        &mut self,
        rel: impl AsRef<Path>,
        stage: Stage,
        write: impl FnOnce(&mut dyn std::io::Write) -> anyhow::Result<()>,
    ) -> Result<(), StageError> {
        let rel = rel.as_ref().to_path_buf();
        let path = self.out.join(&rel);
        let run = || -> anyhow::Result<()> {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut w = BufWriter::new(fs::File::create(&path)?);
            write(&mut w)?;
            std::io::Write::flush(&mut w)?;
            Ok(())
        };
        run().with_context(|| format!("writing {}", path.display())).stage(stage)?;
        self.artifacts.insert(rel);
        Ok(())
    }

    pub fn baseline(&mut self) -> Result<&BaselineStage, StageError> {
        if self.baseline.is_none() {
            let key = self.keys.baseline.clone();
            let stage = match self.cache.load::<BaselineStage>("baseline", &key) {
                Some(s) => s,
                None => {
                    progress("sampling ensemble and computing baseline");
                    let ensemble = sample_ensemble(&self.cfg.ensemble).stage(Stage::Baseline)?;
                    let baseline = compute_baseline(&ensemble, self.cfg.horizon_s, self.cfg.dt_s).stage(Stage::Baseline)?;
                    let s = BaselineStage {
                        x0_analytic_kwh: initial_soc(&ensemble),
                        band_energy_kwh: band_energy(&ensemble),
                        ensemble,
                        baseline,
                    };
                    self.cache.store("baseline", &key, &s).stage(Stage::Baseline)?;
                    s
                }
            };
            let (ensemble, baseline) = (stage.ensemble.clone(), stage.baseline.clone());
            self.write_artifact("ensemble.json", Stage::Baseline, |w| Ok(serde_json::to_writer_pretty(w, &ensemble)?))?;
            self.write_artifact("baseline.csv", Stage::Baseline, |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["time_s", "power_kw"])?;
                for (k, p) in baseline.power_kw.iter().enumerate() {
                    c.write_record([(k as f64 * baseline.dt_s).to_string(), p.to_string()])?;
                }
                c.flush()?;
                Ok(())
            })?;
            self.baseline = Some(stage);
        }
        Ok(self.baseline.as_ref().expect("set above"))
    }

    pub fn envelope(&mut self) -> Result<&EnvelopeStage, StageError> {
        if self.envelope.is_none() {
            self.baseline()?;
            let key = self.keys.envelope.clone();
            let stage = match self.cache.load::<EnvelopeStage>("envelope", &key) {
                Some(s) => s,
                None => {
                    let b = self.baseline.as_ref().expect("computed above");
                    let dispatch = self.cfg.dispatch.resolve(b.baseline.mean_kw());
                    progress(format!(
                        "probing power envelope (stride {} s, ε = {:.3} kW)",
                        self.cfg.envelope.stride_s, dispatch.epsilon_kw
                    ));
                    let envelope = compute_envelope(&b.ensemble, &b.baseline.power_kw, self.cfg.dt_s, &dispatch, &self.cfg.envelope)
                        .stage(Stage::Envelope)?;
                    let s = EnvelopeStage { dispatch, envelope };
                    self.cache.store("envelope", &key, &s).stage(Stage::Envelope)?;
                    s
                }
            };
            let env = stage.envelope.clone();
            self.write_artifact("envelope.csv", Stage::Envelope, |w| Ok(env.write_csv(w)?))?;
            self.envelope = Some(stage);
        }
        Ok(self.envelope.as_ref().expect("set above"))
    }

    fn generate_signals(&self) -> anyhow::Result<Vec<RegulationSignal>> {
        let b = &self.baseline.as_ref().expect("baseline computed").baseline;
        let (horizon, dt) = (self.cfg.horizon_s, self.cfg.dt_s);
        (0..self.cfg.n_signals)
            .map(|i| {
                let normalized = match &self.cfg.signal_source {
                    SignalSource::Synth { seed, options } => synth_normalized_with(seed + i as u64, horizon, dt, options)?,
                    SignalSource::Files { paths } => {
                        let path = &paths[i];
                        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                        let mut s = load_normalized(file, dt, &path.display().to_string())
                            .with_context(|| format!("loading {}", path.display()))?;
                        anyhow::ensure!(
                            s.samples.len() >= b.power_kw.len(),
                            "{} covers {} s, horizon is {} s",
                            path.display(),
                            s.horizon_s(),
                            horizon
                        );
                        s.samples.truncate(b.power_kw.len());
                        s
                    }
                };
                Ok(build_regulation(&b.power_kw, dt, &normalized, self.cfg.gamma, &format!("sig{i:04}"))?)
            })
            .collect()
    }

    pub fn signals(&mut self) -> Result<&SignalsStage, StageError> {
        if self.signals.is_none() {
            self.envelope()?;
            let key = self.keys.signals.clone();
            let stage = match self.cache.load::<SignalsStage>("signals", &key) {
                Some(s) => s,
                None => {
                    progress(format!("generating {} regulation signals", self.cfg.n_signals));
                    let signals = self.generate_signals().stage(Stage::Signals)?;
                    let b = &self.baseline.as_ref().expect("computed above").baseline;
                    let env = &self.envelope.as_ref().expect("computed above").envelope;
                    let accepted = filter_by_envelope(&signals, env, &b.power_kw)
                        .stage(Stage::Signals)?
                        .into_iter()
                        .map(|s| s.id)
                        .collect();
                    let s = SignalsStage { signals, accepted };
                    self.cache.store("signals", &key, &s).stage(Stage::Signals)?;
                    s
                }
            };
            let accepted: BTreeSet<String> = stage.accepted.iter().cloned().collect();
            let ids: Vec<(String, bool)> = stage.signals.iter().map(|s| (s.id.clone(), accepted.contains(&s.id))).collect();
            self.write_artifact("signals.csv", Stage::Signals, |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["id", "accepted"])?;
                for (id, ok) in &ids {
                    c.write_record([id.as_str(), if *ok { "true" } else { "false" }])?;
                }
                c.flush()?;
                Ok(())
            })?;
            for s in &stage.signals {
                let s = s.clone();
                self.write_artifact(format!("signals/{}.csv", s.id), Stage::Signals, |w| Ok(s.write_csv(w)?))?;
            }
            progress(format!("{} of {} signals inside the envelope", stage.accepted.len(), stage.signals.len()));
            self.signals = Some(stage);
        }
        Ok(self.signals.as_ref().expect("set above"))
    }

    fn track_one(&self, signal: &RegulationSignal) -> anyhow::Result<TrackRecord> {
        let b = self.baseline.as_ref().expect("baseline computed");
        let dispatch = &self.envelope.as_ref().expect("envelope computed").dispatch;
        let r = track_signal(&b.ensemble, signal, dispatch, self.cfg.horizon_s)?;
        let soc = analytic_soc_trace(&r.trajectory, &b.ensemble);
        Ok(TrackRecord {
            id: signal.id.clone(),
            violation_time_s: r.violation_time_s,
            achieved_kw: r.achieved_kw,
            rel_err_pct: r.rel_err_pct,
            analytic_soc_kwh: soc.soc_kwh,
        })
    }

    fn write_track(&mut self, rec: &TrackRecord) -> Result<(), StageError> {
        let signal = self.signal(&rec.id).stage(Stage::Track)?.clone();
        let rec = rec.clone();
        let dt = self.cfg.dt_s;
        self.write_artifact(format!("tracks/{}.csv", rec.id), Stage::Track, |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["time_s", "target_kw", "achieved_kw", "rel_err_pct"])?;
            for k in 0..rec.achieved_kw.len() {
                c.write_record([
                    (k as f64 * dt).to_string(),
                    signal.samples[k].to_string(),
                    rec.achieved_kw[k].to_string(),
                    rec.rel_err_pct[k].to_string(),
                ])?;
            }
            c.flush()?;
            Ok(())
        })
    }

    fn signal(&self, id: &str) -> anyhow::Result<&RegulationSignal> {
        self.signals
            .as_ref()
            .expect("signals computed")
            .signals
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| anyhow!("unknown signal `{id}`"))
    }

    /// Tracks every accepted signal.
    pub fn tracks(&mut self) -> Result<&[TrackRecord], StageError> {
        if self.tracks.is_none() {
            self.signals()?;
            let key = self.keys.signals.clone();
            let records = match self.cache.load::<Vec<TrackRecord>>("track", &key) {
                Some(r) => r,
                None => {
                    let accepted = self.signals.as_ref().expect("computed above").accepted.clone();
                    let mut records = Vec::with_capacity(accepted.len());
                    for (n, id) in accepted.iter().enumerate() {
                        if n % 20 == 0 {
                            progress(format!("tracking signal {} of {}", n + 1, accepted.len()));
                        }
                        let signal = self.signal(id).stage(Stage::Track)?;
                        records.push(self.track_one(signal).with_context(|| format!("signal {id}")).stage(Stage::Track)?);
                    }
                    self.cache.store("track", &key, &records).stage(Stage::Track)?;
                    records
                }
            };
            for rec in &records {
                self.write_track(rec)?;
            }
            self.tracks = Some(records);
        }
        Ok(self.tracks.as_deref().expect("set above"))
    }

    /// Tracks selected signals; each must be on the acceptance list.
    pub fn track_ids(&mut self, ids: &[String]) -> Result<Vec<TrackRecord>, StageError> {
        self.signals()?;
        let accepted = &self.signals.as_ref().expect("computed above").accepted;
        for id in ids {
            if !accepted.contains(id) {
                return Err(StageError {
                    stage: Stage::Track,
                    source: anyhow!("signal `{id}` is not on the acceptance list (see signals.csv)"),
                });
            }
        }
        let cached = self.tracks.clone().or_else(|| self.cache.load::<Vec<TrackRecord>>("track", &self.keys.signals));
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let rec = match cached.as_ref().and_then(|c| c.iter().find(|r| &r.id == id)) {
                Some(r) => r.clone(),
                None => {
                    let signal = self.signal(id).stage(Stage::Track)?;
                    self.track_one(signal).with_context(|| format!("signal {id}")).stage(Stage::Track)?
                }
            };
            self.write_track(&rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    fn fit_problem(&self) -> anyhow::Result<Option<FitProblem>> {
        let b = self.baseline.as_ref().expect("baseline computed");
        let env = &self.envelope.as_ref().expect("envelope computed").envelope;
        let tracks = self.tracks.as_ref().expect("tracks computed");
        if tracks.is_empty() {
            return Ok(None);
        }
        let mut deviations = Vec::with_capacity(tracks.len());
        for rec in tracks {
            deviations.push(self.signal(&rec.id)?.deviation(&b.baseline.power_kw)?);
        }
        Ok(Some(FitProblem {
            violation_times_s: tracks.iter().map(|r| r.violation_time_s).collect(),
            deviations,
            dt_s: self.cfg.dt_s,
            x0_kwh: b.x0_analytic_kwh,
            horizon_s: self.cfg.horizon_s,
            envelope: Some(env.clone()),
            symmetric: true,
        }))
    }

    /// Fits both initial-condition modes plus the parameter evolution.
    /// `None` when no signal was accepted.
    pub fn fit(&mut self) -> Result<Option<&FitStage>, StageError> {
        if self.fit.is_none() {
            self.tracks()?;
            let key = self.keys.fit.clone();
            let stage = match self.cache.load::<Option<FitStage>>("fit", &key) {
                Some(s) => s,
                None => {
                    let s = self.compute_fit().stage(Stage::Fit)?;
                    self.cache.store("fit", &key, &s).stage(Stage::Fit)?;
                    s
                }
            };
            if let Some(s) = &stage {
                let records = [FitRecord::new(&s.zero, IcMode::Zero), FitRecord::new(&s.analytic, IcMode::Analytic)];
                self.write_artifact("fit.json", Stage::Fit, |w| Ok(serde_json::to_writer_pretty(w, &records)?))?;
                let tracks = self.tracks.clone().expect("computed above");
                let (zero, analytic) = (s.zero.b_s.clone(), s.analytic.b_s.clone());
                self.write_artifact("violation_times.csv", Stage::Fit, |w| {
                    let mut c = csv::Writer::from_writer(w);
                    c.write_record(["id", "f_s", "b_zero_s", "b_analytic_s"])?;
                    for (k, rec) in tracks.iter().enumerate() {
                        c.write_record([
                            rec.id.clone(),
                            rec.violation_time_s.to_string(),
                            zero[k].to_string(),
                            analytic[k].to_string(),
                        ])?;
                    }
                    c.flush()?;
                    Ok(())
                })?;
                let evolution = s.evolution.clone();
                self.write_artifact("parameter_evolution.csv", Stage::Fit, |w| {
                    let mut c = csv::Writer::from_writer(w);
                    c.write_record(["n_generated", "n_accepted", "a_per_h", "c_kwh", "objective", "saturated"])?;
                    for p in &evolution {
                        c.write_record([
                            p.n_generated.to_string(),
                            p.n_accepted.to_string(),
                            p.fit.a_per_h.to_string(),
                            p.fit.c_kwh.to_string(),
                            p.fit.objective.to_string(),
                            p.fit.saturated.to_string(),
                        ])?;
                    }
                    c.flush()?;
                    Ok(())
                })?;
            }
            self.fit = Some(stage);
        }
        Ok(self.fit.as_ref().expect("set above").as_ref())
    }

    fn compute_fit(&self) -> anyhow::Result<Option<FitStage>> {
        let Some(problem) = self.fit_problem()? else {
            return Ok(None);
        };
        progress(format!("fitting on {} signals", problem.deviations.len()));
        let zero = fit_vb_with(&problem.with_x0(0.0), &self.cfg.fit).context("fit with x0 = 0")?;
        let analytic = fit_vb_with(&problem, &self.cfg.fit).context("fit with analytic x0")?;

        // Position of each accepted signal in the generated sequence.
        let sig = self.signals.as_ref().expect("signals computed");
        let generated_index: Vec<usize> = sig
            .accepted
            .iter()
            .map(|id| sig.signals.iter().position(|s| &s.id == id).expect("accepted ids come from the signal set"))
            .collect();
        let primary = match self.cfg.ic_mode {
            IcMode::Zero => problem.with_x0(0.0),
            IcMode::Analytic => problem.clone(),
        };
        let mut evolution = Vec::new();
        for &n in &self.cfg.evolution_sizes {
            let n_generated = n.min(sig.signals.len());
            let n_accepted = generated_index.iter().filter(|&&g| g < n_generated).count();
            if n_accepted == 0 {
                continue;
            }
            let fit = fit_vb_with(&primary.prefix(n_accepted), &self.cfg.fit)
                .with_context(|| format!("evolution fit on {n_generated} generated signals"))?;
            evolution.push(EvolutionPoint { n_generated, n_accepted, fit });
        }
        Ok(Some(FitStage { zero, analytic, evolution }))
    }

    pub fn primary_fit(&mut self) -> Result<Option<FitResult>, StageError> {
        let mode = self.cfg.ic_mode;
        Ok(self.fit()?.map(|s| match mode {
            IcMode::Zero => s.zero.clone(),
            IcMode::Analytic => s.analytic.clone(),
        }))
    }

    /// Compares battery and analytic SOC traces for every tracked signal.
    pub fn validate(&mut self) -> Result<Option<&ValidateStage>, StageError> {
        if self.validation.is_none() {
            let Some(fit) = self.primary_fit()? else {
                self.validation = Some(None);
                return Ok(None);
            };
            let b = self.baseline.as_ref().expect("computed above");
            let tracks = self.tracks.as_ref().expect("computed above");
            let dt = self.cfg.dt_s;
            let mut comparisons = Vec::with_capacity(tracks.len());
            let mut first = None;
            for rec in tracks {
                let u: Vec<f64> = rec.achieved_kw.iter().zip(&b.baseline.power_kw).map(|(a, p)| a - p).collect();
                let vb = vb_soc_trace(fit.x0_kwh, fit.a_per_h, &u, dt);
                let analytic = SocTrace { soc_kwh: rec.analytic_soc_kwh.clone(), dt_s: dt, source: SocSource::Analytic };
                let rms_kwh = validate_soc(&vb, &analytic).stage(Stage::Validate)?;
                comparisons.push(SocComparison { id: rec.id.clone(), rms_kwh });
                if first.is_none() {
                    first = Some((vb, analytic));
                }
            }
            let (vb_trace, analytic_trace) = first.expect("fit implies at least one track");
            let stage = ValidateStage { comparisons, vb_trace, analytic_trace };
            let (vb, an) = (stage.vb_trace.clone(), stage.analytic_trace.clone());
            self.write_artifact("soc_traces.csv", Stage::Validate, |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["time_s", "soc_kwh", "source"])?;
                for t in [&vb, &an] {
                    for (k, x) in t.soc_kwh.iter().enumerate() {
                        c.write_record([(k as f64 * t.dt_s).to_string(), x.to_string(), t.source.label().to_string()])?;
                    }
                }
                c.flush()?;
                Ok(())
            })?;
            let comps = stage.comparisons.clone();
            self.write_artifact("soc_rms.csv", Stage::Validate, |w| {
                let mut c = csv::Writer::from_writer(w);
                c.write_record(["id", "rms_kwh"])?;
                for s in &comps {
                    c.write_record([s.id.clone(), s.rms_kwh.to_string()])?;
                }
                c.flush()?;
                Ok(())
            })?;
            self.validation = Some(Some(stage));
        }
        Ok(self.validation.as_ref().expect("set above").as_ref())
    }

    /// Runs every stage, writes the error histogram and `report.json`.
    pub fn report(&mut self) -> Result<RunReport, StageError> {
        self.validate()?;
        let b = self.baseline.as_ref().expect("computed above");
        let (baseline_mean_kw, x0_analytic_kwh, band_energy_kwh) =
            (b.baseline.mean_kw(), b.x0_analytic_kwh, b.band_energy_kwh);
        let epsilon_kw = self.envelope.as_ref().map(|e| e.dispatch.epsilon_kw);
        let horizon = self.cfg.horizon_s;
        let tracks = self.tracks.clone().unwrap_or_default();
        let full: Vec<&TrackRecord> = tracks.iter().filter(|r| r.violation_time_s >= horizon - 1e-9).collect();
        let max_rel_err_pct = full
            .iter()
            .flat_map(|r| r.rel_err_pct.iter().copied())
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));

        let errors: Vec<f64> = full.iter().flat_map(|r| r.rel_err_pct.iter().copied()).collect();
        self.write_artifact("error_histogram.csv", Stage::Report, |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["bin_low_pct", "bin_high_pct", "count"])?;
            let width = 0.1;
            let bins = 20;
            let mut counts = vec![0usize; bins + 1];
            for e in &errors {
                counts[((e / width).floor() as usize).min(bins)] += 1;
            }
            for (i, n) in counts.iter().enumerate() {
                let lo = i as f64 * width;
                let hi = if i == bins { f64::INFINITY } else { (i + 1) as f64 * width };
                c.write_record([format!("{lo:.1}"), if hi.is_finite() { format!("{hi:.1}") } else { "inf".into() }, n.to_string()])?;
            }
            c.flush()?;
            Ok(())
        })?;

        let fit_stage = self.fit.clone().flatten();
        let validation = self.validation.clone().flatten();
        let ic_mode = self.cfg.ic_mode;
        let mut report = RunReport {
            config_hash: self.keys.config.clone(),
            artifacts: Vec::new(),
            baseline_mean_kw,
            epsilon_kw,
            x0_analytic_kwh,
            band_energy_kwh,
            n_generated: self.signals.as_ref().map_or(0, |s| s.signals.len()),
            n_accepted: self.signals.as_ref().map_or(0, |s| s.accepted.len()),
            n_violated: tracks.len() - full.len(),
            max_rel_err_pct,
            fit: fit_stage.as_ref().map(|s| match ic_mode {
                IcMode::Zero => FitRecord::new(&s.zero, IcMode::Zero),
                IcMode::Analytic => FitRecord::new(&s.analytic, IcMode::Analytic),
            }),
            fit_zero: fit_stage.as_ref().map(|s| FitRecord::new(&s.zero, IcMode::Zero)),
            fit_analytic: fit_stage.as_ref().map(|s| FitRecord::new(&s.analytic, IcMode::Analytic)),
            evolution: fit_stage
                .as_ref()
                .map(|s| {
                    s.evolution
                        .iter()
                        .map(|p| EvolutionRow {
                            n_generated: p.n_generated,
                            n_accepted: p.n_accepted,
                            a_per_h: p.fit.a_per_h,
                            c_kwh: p.fit.c_kwh,
                            objective: p.fit.objective,
                        })
                        .collect()
                })
                .unwrap_or_default(),
            soc_rms_kwh: validation.as_ref().and_then(|v| v.comparisons.first().map(|c| c.rms_kwh)),
            soc_rms_max_kwh: validation.as_ref().and_then(|v| v.comparisons.iter().map(|c| c.rms_kwh).reduce(f64::max)),
        };
        self.artifacts.insert(PathBuf::from("report.json"));
        report.artifacts = self.artifacts.iter().cloned().collect();
        let text = serde_json::to_string_pretty(&report).stage(Stage::Report)?;
        fs::write(self.out.join("report.json"), text).stage(Stage::Report)?;
        Ok(report)
    }
}

/// Runs the whole pipeline for one scenario.
pub fn run_pipeline(config: &ScenarioConfig) -> Result<RunReport, StageError> {
    Pipeline::new(config.clone())?.report()
}
