//! Monte-Carlo experiment driver and result emission.
//!
//! Every trial draws its realization and noise from a ChaCha8 stream keyed by
//! `(seed, trial)`. The key does not include the sweep point, so all points of
//! a sweep see the same channels and noise seeds; only the swept quantity
//! changes between them.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{omp_estimate, BeamspaceDictionary, OmpOptions};
use crate::beam_design::{build_designs, SoundingDesign, DEFAULT_SEARCH_SAMPLES};
use crate::channel::{generate_realization_with, ChannelRealization, SystemConfig};
use crate::ems::{estimate_ems, EmsOptions};
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::metrics::{nmse, spectral_efficiency};
use crate::sounding::{pilot_slots, sound, MeasurementSet, NoiseLevel, SoundingMode};
use crate::tde::{estimate_tde, ChannelEstimate};

pub const DEFAULT_TRIALS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Tde,
    Ems,
    Omp,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Tde, Scheme::Ems, Scheme::Omp];

    /// Sounding whose measurements the scheme consumes.
    pub fn sounding_mode(self) -> SoundingMode {
        match self {
            Scheme::Tde => SoundingMode::Tde,
            Scheme::Ems | Scheme::Omp => SoundingMode::Ems,
        }
    }

    pub fn pilot_slots(self, cfg: &SystemConfig) -> usize {
        pilot_slots(self.sounding_mode(), cfg)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Tde => "tde",
            Scheme::Ems => "ems",
            Scheme::Omp => "omp",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tde" => Ok(Scheme::Tde),
            "ems" => Ok(Scheme::Ems),
            "omp" => Ok(Scheme::Omp),
            other => Err(Error::InvalidConfig(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    Snr { values_db: Vec<f64> },
    /// Sets `t1 = t2 = value` at every point.
    PilotBudget { values: Vec<usize>, snr_db: f64 },
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep::Snr {
            values_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
        }
    }
}

/// One point of a sweep: the configuration to simulate and its SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub system: SystemConfig,
    pub snr_db: f64,
}

impl Sweep {
    pub fn points(&self, base: &SystemConfig) -> Vec<SweepPoint> {
        match self {
            Sweep::Snr { values_db } => values_db
                .iter()
                .map(|&db| SweepPoint {
                    value: db,
                    system: base.clone(),
                    snr_db: db,
                })
                .collect(),
            Sweep::PilotBudget { values, snr_db } => values
                .iter()
                .map(|&t| SweepPoint {
                    value: t as f64,
                    system: SystemConfig {
                        t1: t,
                        t2: t,
                        ..base.clone()
                    },
                    snr_db: *snr_db,
                })
                .collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Sweep::Snr { values_db } => values_db.is_empty(),
            Sweep::PilotBudget { values, .. } => values.is_empty(),
        }
    }
}

fn default_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

fn default_search_samples() -> usize {
    DEFAULT_SEARCH_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// CSV path; the JSON twin goes next to it with a `.json` extension.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Worker threads, `0` for one per core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_search_samples")]
    pub search_samples: usize,
    /// Fill `wall_ms`; off by default so result files are reproducible.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub ems: EmsOptions,
    #[serde(default)]
    pub omp: OmpOptions,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            sweep: Sweep::default(),
            schemes: default_schemes(),
            trials: DEFAULT_TRIALS,
            seed: 0,
            output: None,
            threads: 0,
            search_samples: DEFAULT_SEARCH_SAMPLES,
            record_timing: false,
            ems: EmsOptions::default(),
            omp: OmpOptions::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.sweep.is_empty() {
            return Err(Error::InvalidConfig("sweep has no values".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("no schemes selected".into()));
        }
        for point in self.sweep.points(&self.system) {
            point.system.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub scheme: Scheme,
    pub sweep_value: f64,
    pub nmse: f64,
    pub se: f64,
    pub pilot_slots: usize,
    pub wall_ms: f64,
    pub trials_ok: usize,
    pub trials_failed: usize,
}

/// Score of one scheme on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeScore {
    pub nmse: f64,
    pub se: f64,
    pub elapsed_ms: f64,
}

/// Everything a trial needs that does not change between trials.
pub struct TrialContext {
    pub system: SystemConfig,
    pub design: SoundingDesign,
    pub dictionary: Option<BeamspaceDictionary>,
    pub ems: EmsOptions,
    pub snr_db: f64,
}

impl TrialContext {
    pub fn new(
        system: SystemConfig,
        snr_db: f64,
        schemes: &[Scheme],
        search_samples: usize,
        ems: EmsOptions,
        omp: &OmpOptions,
    ) -> Result<Self> {
        let design = build_designs(&system, search_samples)?;
        let dictionary = if schemes.contains(&Scheme::Omp) {
            Some(BeamspaceDictionary::for_design(&design, SoundingMode::Ems, omp)?)
        } else {
            None
        };
        Ok(Self {
            system,
            design,
            dictionary,
            ems,
            snr_db,
        })
    }

    /// Estimates for every user with one scheme.
    pub fn estimate(
        &self,
        scheme: Scheme,
        meas: &MeasurementSet,
        gamma: f64,
    ) -> Result<Vec<ChannelEstimate>> {
        let l = self.system.num_paths;
        (0..meas.num_users())
            .map(|u| match scheme {
                Scheme::Tde => estimate_tde(meas, &self.design, u, l, gamma),
                Scheme::Ems => estimate_ems(meas, &self.design, u, l, gamma, &self.ems),
                Scheme::Omp => {
                    let dict = self
                        .dictionary
                        .as_ref()
                        .ok_or_else(|| Error::InvalidConfig("OMP dictionary not built".into()))?;
                    omp_estimate(meas, &self.design, dict, u, l, gamma)
                }
            })
            .collect()
    }

    pub fn score(
        &self,
        estimates: &[ChannelEstimate],
        realization: &ChannelRealization,
    ) -> Result<(f64, f64)> {
        let est: Vec<Vec<CMat>> = estimates.iter().map(|e| e.channels.clone()).collect();
        let truth = &realization.subcarrier_matrices;
        let streams = self.system.num_bs_rf.min(self.system.num_paths);
        Ok((
            nmse(&est, truth)?,
            spectral_efficiency(&est, truth, streams, self.snr_db)?,
        ))
    }
}

/// Realization and per-mode noise seeds of trial `trial` under `seed`.
pub fn trial_inputs(
    system: &SystemConfig,
    seed: u64,
    trial: u64,
) -> Result<(ChannelRealization, u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let realization = generate_realization_with(system, &mut rng)?;
    let tde_seed = rng.next_u64();
    let ems_seed = rng.next_u64();
    Ok((realization, tde_seed, ems_seed))
}

/// Runs one trial for each scheme. Failures are returned per scheme.
pub fn run_trial(
    ctx: &TrialContext,
    schemes: &[Scheme],
    seed: u64,
    trial: u64,
) -> Result<Vec<(Scheme, Result<SchemeScore>)>> {
    let (realization, tde_seed, ems_seed) = trial_inputs(&ctx.system, seed, trial)?;
    let noise = NoiseLevel::SnrDb(ctx.snr_db);
    let mut tde_meas = None;
    let mut ems_meas = None;
    let mut out = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let mode = scheme.sounding_mode();
        let slot = match mode {
            SoundingMode::Tde => &mut tde_meas,
            SoundingMode::Ems => &mut ems_meas,
        };
        if slot.is_none() {
            let s = match mode {
                SoundingMode::Tde => tde_seed,
                SoundingMode::Ems => ems_seed,
            };
            *slot = Some(sound(&ctx.design, &realization, mode, noise, s)?);
        }
        let meas = slot.as_ref().expect("sounding filled above");
        let start = Instant::now();
        let result = ctx
            .estimate(scheme, meas, realization.gamma)
            .and_then(|est| {
                let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
                let (nmse, se) = ctx.score(&est, &realization)?;
                Ok(SchemeScore { nmse, se, elapsed_ms })
            });
        out.push((scheme, result));
    }
    Ok(out)
}

fn aggregate(
    scheme: Scheme,
    value: f64,
    slots: usize,
    scores: &[&Result<SchemeScore>],
    record_timing: bool,
) -> ResultRecord {
    let ok: Vec<&SchemeScore> = scores.iter().filter_map(|r| r.as_ref().ok()).collect();
    let n = ok.len() as f64;
    let mean = |f: fn(&SchemeScore) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|s| f(s)).sum::<f64>() / n
        }
    };
    ResultRecord {
        scheme,
        sweep_value: value,
        nmse: mean(|s| s.nmse),
        se: mean(|s| s.se),
        pilot_slots: slots,
        wall_ms: if record_timing { mean(|s| s.elapsed_ms) } else { 0.0 },
        trials_ok: ok.len(),
        trials_failed: scores.len() - ok.len(),
    }
}

/// Runs the sweep, calling `emit` with each sweep point's records as soon as
/// the point completes.
pub fn run_experiment_with<F>(spec: &ExperimentSpec, mut emit: F) -> Result<Vec<ResultRecord>>
where
    F: FnMut(&[ResultRecord]) -> Result<()>,
{
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut records = Vec::new();
    for point in spec.sweep.points(&spec.system) {
        let ctx = TrialContext::new(
            point.system.clone(),
            point.snr_db,
            &spec.schemes,
            spec.search_samples,
            spec.ems,
            &spec.omp,
        )?;
        let trials: Vec<Vec<(Scheme, Result<SchemeScore>)>> = pool.install(|| {
            (0..spec.trials as u64)
                .into_par_iter()
                .map(|t| {
                    run_trial(&ctx, &spec.schemes, spec.seed, t).unwrap_or_else(|e| {
                        let msg = e.to_string();
                        spec.schemes
                            .iter()
                            .map(|&s| (s, Err(Error::InvalidConfig(msg.clone()))))
                            .collect()
                    })
                })
                .collect()
        });
        let point_records: Vec<ResultRecord> = spec
            .schemes
            .iter()
            .enumerate()
            .map(|(i, &scheme)| {
                let scores: Vec<&Result<SchemeScore>> = trials.iter().map(|t| &t[i].1).collect();
                aggregate(
                    scheme,
                    point.value,
                    scheme.pilot_slots(&point.system),
                    &scores,
                    spec.record_timing,
                )
            })
            .collect();
        emit(&point_records)?;
        records.extend(point_records);
    }
    Ok(records)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRecord>> {
    run_experiment_with(spec, |_| Ok(()))
}

pub const CSV_HEADER: &str = "scheme,sweep_value,nmse,se,pilot_slots,wall_ms";

pub fn csv_row(r: &ResultRecord) -> String {
    format!(
        "{},{},{:e},{},{},{}",
        r.scheme, r.sweep_value, r.nmse, r.se, r.pilot_slots, r.wall_ms
    )
}

pub fn write_csv<W: Write>(out: &mut W, records: &[ResultRecord]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", csv_row(r))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct JsonResults<'a> {
    spec: &'a ExperimentSpec,
    records: &'a [ResultRecord],
}

pub fn write_json<W: Write>(out: W, spec: &ExperimentSpec, records: &[ResultRecord]) -> Result<()> {
    serde_json::to_writer_pretty(out, &JsonResults { spec, records })?;
    Ok(())
}

pub fn json_twin(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the CSV at `path` and the JSON twin next to it.
pub fn write_results(path: &Path, spec: &ExperimentSpec, records: &[ResultRecord]) -> Result<()> {
    let mut csv = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(&mut csv, records)?;
    csv.flush()?;
    let mut json = std::io::BufWriter::new(std::fs::File::create(json_twin(path))?);
    write_json(&mut json, spec, records)?;
    writeln!(json)?;
    json.flush()?;
    Ok(())
}

/// Ground truth plus measurements, for estimator-only reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementDump {
    pub system: SystemConfig,
    pub search_samples: usize,
    pub realization: ChannelRealization,
    pub tde: Option<MeasurementSet>,
    pub ems: Option<MeasurementSet>,
}

impl MeasurementDump {
    pub fn simulate(
        system: &SystemConfig,
        search_samples: usize,
        snr_db: Option<f64>,
        seed: u64,
        schemes: &[Scheme],
    ) -> Result<Self> {
        let design = build_designs(system, search_samples)?;
        let (realization, tde_seed, ems_seed) = trial_inputs(system, seed, 0)?;
        let noise = snr_db.map_or(NoiseLevel::Variance(0.0), NoiseLevel::SnrDb);
        let wants = |mode| schemes.iter().any(|s| s.sounding_mode() == mode);
        let tde = wants(SoundingMode::Tde)
            .then(|| sound(&design, &realization, SoundingMode::Tde, noise, tde_seed))
            .transpose()?;
        let ems = wants(SoundingMode::Ems)
            .then(|| sound(&design, &realization, SoundingMode::Ems, noise, ems_seed))
            .transpose()?;
        Ok(Self {
            system: system.clone(),
            search_samples,
            realization,
            tde,
            ems,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayResult {
    pub scheme: Scheme,
    pub nmse: f64,
    pub se: f64,
    pub estimates: Vec<ChannelEstimate>,
}

/// Runs the requested estimators on a dump and scores them against its truth.
pub fn replay(
    dump: &MeasurementDump,
    schemes: &[Scheme],
    ems: EmsOptions,
    omp: &OmpOptions,
) -> Result<Vec<ReplayResult>> {
    let mut out = Vec::new();
    for &scheme in schemes {
        let meas = match scheme.sounding_mode() {
            SoundingMode::Tde => dump.tde.as_ref(),
            SoundingMode::Ems => dump.ems.as_ref(),
        }
        .ok_or(Error::MissingStage("measurements for the requested scheme"))?;
        let snr_db = meas.snr_db.unwrap_or(f64::INFINITY);
        let ctx = TrialContext::new(
            dump.system.clone(),
            snr_db,
            &[scheme],
            dump.search_samples,
            ems,
            omp,
        )?;
        let estimates = ctx.estimate(scheme, meas, dump.realization.gamma)?;
        let (nmse, se) = ctx.score(&estimates, &dump.realization)?;
        out.push(ReplayResult {
            scheme,
            nmse,
            se,
            estimates,
        });
    }
    Ok(out)
}
