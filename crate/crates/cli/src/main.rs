use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmwave_chest::beam_design::{build_designs, flatness, write_matrix_csv, BeamDesignParams, FlatnessReport};
use mmwave_chest::harness::{
    csv_row, json_twin, replay, run_experiment_with, write_results, ExperimentSpec,
    MeasurementDump, Scheme, Sweep, CSV_HEADER,
};
use mmwave_chest::tde::{AngleEstimates, EstimateFlags};

const FLATNESS_GRID: usize = 512;

#[derive(Parser)]
#[command(name = "mmwave-chest", version, about = "Subspace channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo sweep and write CSV plus JSON results.
    Run(Common),
    /// Build the sounding codebooks and report their angular flatness.
    Design(Common),
    /// Draw one realization and write its measurements to a JSON dump.
    Simulate(Common),
    /// Rerun estimators on a measurement dump and score them.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Measurement dump written by `simulate`.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment spec; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated SNR values in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr_db: Option<Vec<f64>>,
    /// Comma-separated subset of tde, ems, omp.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<Scheme>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(values) = &self.snr_db {
            spec.sweep = match (&spec.sweep, values.as_slice()) {
                (Sweep::PilotBudget { values, .. }, [db]) => Sweep::PilotBudget {
                    values: values.clone(),
                    snr_db: *db,
                },
                (Sweep::PilotBudget { .. }, _) => {
                    bail!("a pilot-budget sweep takes exactly one --snr-db value")
                }
                (Sweep::Snr { .. }, _) => Sweep::Snr {
                    values_db: values.clone(),
                },
            };
        }
        if let Some(schemes) = &self.schemes {
            spec.schemes = schemes.clone();
        }
        if let Some(trials) = self.trials {
            spec.trials = trials;
        }
        if let Some(out) = &self.out {
            spec.output = Some(out.clone());
        }
        if let Some(threads) = self.threads {
            spec.threads = threads;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(common) => run(&common),
        Command::Design(common) => design(&common),
        Command::Simulate(common) => simulate(&common),
        Command::Estimate { common, input } => estimate(&common, &input),
    }
}

fn run(common: &Common) -> Result<()> {
    let spec = common.spec()?;
    let stdout = std::io::stdout();
    println!("{CSV_HEADER}");
    let records = run_experiment_with(&spec, |point| {
        let mut lock = stdout.lock();
        for r in point {
            writeln!(lock, "{}", csv_row(r))?;
            if r.trials_failed > 0 {
                eprintln!(
                    "warning: {} at {}: {} of {} trials failed",
                    r.scheme,
                    r.sweep_value,
                    r.trials_failed,
                    r.trials_ok + r.trials_failed
                );
            }
        }
        Ok(())
    })?;
    if let Some(path) = &spec.output {
        write_results(path, &spec, &records)?;
        eprintln!("wrote {} and {}", path.display(), json_twin(path).display());
    }
    Ok(())
}

#[derive(Serialize)]
struct DesignReport {
    combiner: MatrixReport,
    combiner_masked: MatrixReport,
    precoder: MatrixReport,
    precoder_masked: MatrixReport,
}

#[derive(Serialize)]
struct MatrixReport {
    file: String,
    rows: usize,
    cols: usize,
    params: BeamDesignParams,
    flatness: FlatnessReport,
}

fn design(common: &Common) -> Result<()> {
    let spec = common.spec()?;
    let dir = spec.output.clone().unwrap_or_else(|| PathBuf::from("design"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let d = build_designs(&spec.system, spec.search_samples)?;

    let export = |name: &str, m: &mmwave_chest::linalg::CMat, rows, params| -> Result<MatrixReport> {
        let file = format!("{name}.csv");
        let mut out = BufWriter::new(File::create(dir.join(&file))?);
        write_matrix_csv(&mut out, m)?;
        out.flush()?;
        Ok(MatrixReport {
            file,
            rows: m.nrows(),
            cols: m.ncols(),
            params,
            flatness: flatness(rows, FLATNESS_GRID),
        })
    };
    let report = DesignReport {
        combiner: export("combiner", &d.combiner, &d.combiner, d.combiner_params)?,
        combiner_masked: export(
            "combiner_masked",
            &d.combiner_masked,
            &d.combiner_masked,
            d.combiner_masked_params,
        )?,
        precoder: export("precoder", &d.precoder, &d.precoder.adjoint(), d.precoder_params)?,
        precoder_masked: export(
            "precoder_masked",
            &d.precoder_masked,
            &d.precoder_masked.adjoint(),
            d.precoder_masked_params,
        )?,
    };
    let json = dir.join("design.json");
    serde_json::to_writer_pretty(BufWriter::new(File::create(&json)?), &report)?;
    for (name, r) in [
        ("combiner", &report.combiner),
        ("combiner_masked", &report.combiner_masked),
        ("precoder", &report.precoder),
        ("precoder_masked", &report.precoder_masked),
    ] {
        println!(
            "{name}: {}x{}, a = {:.6}, S(a) = {:.6}, gain max/min = {:.4}",
            r.rows, r.cols, r.params.phase_slope, r.params.power_ratio, r.flatness.max_over_min
        );
    }
    eprintln!("wrote codebooks and {}", json.display());
    Ok(())
}

fn simulate(common: &Common) -> Result<()> {
    let spec = common.spec()?;
    let snr_db = match (&common.snr_db, &spec.sweep) {
        (Some(v), _) if v.len() > 1 => bail!("simulate takes a single --snr-db value"),
        (Some(v), _) => Some(v[0]),
        (None, _) if common.config.is_none() => None,
        (None, Sweep::Snr { values_db }) => values_db.first().copied(),
        (None, Sweep::PilotBudget { snr_db, .. }) => Some(*snr_db),
    };
    let out = spec.output.clone().unwrap_or_else(|| PathBuf::from("measurements.json"));
    let dump = MeasurementDump::simulate(&spec.system, spec.search_samples, snr_db, spec.seed, &spec.schemes)?;
    dump.save(&out)?;
    match snr_db {
        Some(db) => eprintln!("wrote {} at {db} dB", out.display()),
        None => eprintln!("wrote {} (noise-free)", out.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateReport {
    scheme: Scheme,
    nmse: f64,
    se: f64,
    users: Vec<UserReport>,
}

#[derive(Serialize)]
struct UserReport {
    user: usize,
    angles: AngleEstimates,
    flags: EstimateFlags,
    true_aoa_sins: Vec<f64>,
    true_aod_sins: Vec<f64>,
}

fn estimate(common: &Common, input: &Path) -> Result<()> {
    let spec = common.spec()?;
    let dump = MeasurementDump::load(input).with_context(|| format!("reading {}", input.display()))?;
    let schemes: Vec<Scheme> = match &common.schemes {
        Some(s) => s.clone(),
        None => spec
            .schemes
            .iter()
            .copied()
            .filter(|s| match s.sounding_mode() {
                mmwave_chest::sounding::SoundingMode::Tde => dump.tde.is_some(),
                mmwave_chest::sounding::SoundingMode::Ems => dump.ems.is_some(),
            })
            .collect(),
    };
    let results = replay(&dump, &schemes, spec.ems, &spec.omp)?;
    let reports: Vec<EstimateReport> = results
        .into_iter()
        .map(|r| EstimateReport {
            scheme: r.scheme,
            nmse: r.nmse,
            se: r.se,
            users: r
                .estimates
                .into_iter()
                .map(|e| UserReport {
                    user: e.user,
                    true_aoa_sins: dump.realization.aoa_sins(e.user),
                    true_aod_sins: dump.realization.aod_sins(e.user),
                    angles: e.angles,
                    flags: e.flags,
                })
                .collect(),
        })
        .collect();
    println!("scheme,nmse,se");
    for r in &reports {
        println!("{},{:e},{}", r.scheme, r.nmse, r.se);
    }
    if let Some(path) = &spec.output {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &reports)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
