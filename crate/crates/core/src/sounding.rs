//! Staged pilot transmission and measurement stacking.
//!
//! Every stage switches off one BS antenna and (in the three-stage scheme) one
//! user antenna, then sweeps `T1` precoders against `T2` combiner blocks of
//! `N_R` rows. The despread measurement for one user and subcarrier is
//! `R = W_stage H^k F_stage + N~`, where column `t1` of `N~` stacks
//! `W^{t2} n^{t1,t2}` over the blocks with independent `n ~ CN(0, sigma^2 I)`.
//!
//! SNR convention: `SNR = E||W H F||_F^2 / E||N~||_F^2`, evaluated over the
//! stage-1 measurements of all users and subcarriers of one realization;
//! `sigma^2` is solved from it per realization.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam_design::{AntennaMask, SoundingDesign};
use crate::channel::{ChannelRealization, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian_matrix, CMat, CVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageId {
    Stage1,
    Stage2,
    Stage3,
}

/// Three-stage (both sides masked) or two-stage (BS masked only) sounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoundingMode {
    Tde,
    Ems,
}

impl StageId {
    /// `(BS mask, user mask)` for this stage.
    pub fn masks(self, mode: SoundingMode) -> Result<(AntennaMask, AntennaMask)> {
        use AntennaMask::*;
        match (mode, self) {
            (SoundingMode::Tde, StageId::Stage1) => Ok((Last, Last)),
            (SoundingMode::Tde, StageId::Stage2) => Ok((First, Last)),
            (SoundingMode::Tde, StageId::Stage3) => Ok((Last, First)),
            (SoundingMode::Ems, StageId::Stage1) => Ok((Last, None)),
            (SoundingMode::Ems, StageId::Stage2) => Ok((First, None)),
            (SoundingMode::Ems, StageId::Stage3) => Err(Error::InvalidConfig(
                "two-stage sounding has no third stage".into(),
            )),
        }
    }
}

/// Stage combiner (`T3 x N_A`) and precoder (`M_A x T1`).
pub fn stage_matrices(
    design: &SoundingDesign,
    stage: StageId,
    mode: SoundingMode,
) -> Result<(CMat, CMat)> {
    let (bs, user) = stage.masks(mode)?;
    Ok((design.combiner_stage(bs), design.precoder_stage(user)))
}

/// Despread per-user measurements. Stage 1 covers every subcarrier, the
/// later stages only `k = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub mode: SoundingMode,
    /// `[user][k]`, each `T3 x T1`.
    pub stage1: Vec<Vec<CMat>>,
    /// `[user]` at `k = 0`.
    pub stage2: Vec<CMat>,
    /// `[user]` at `k = 0`; present only for three-stage sounding.
    pub stage3: Option<Vec<CMat>>,
    pub noise_variance: f64,
    pub snr_db: Option<f64>,
    pub rng_seed: u64,
}

impl MeasurementSet {
    pub fn num_users(&self) -> usize {
        self.stage1.len()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.stage1.first().map_or(0, Vec::len)
    }

    pub fn stage3(&self) -> Result<&[CMat]> {
        self.stage3.as_deref().ok_or(Error::MissingStage("stage 3"))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Variance(f64),
    SnrDb(f64),
}

fn check_shapes(design: &SoundingDesign, realization: &ChannelRealization) -> Result<()> {
    let h = realization
        .subcarrier_matrices
        .first()
        .and_then(|u| u.first())
        .ok_or_else(|| Error::DimensionMismatch("empty realization".into()))?;
    if h.nrows() != design.num_bs_antennas() || h.ncols() != design.num_user_antennas() {
        return Err(Error::DimensionMismatch(format!(
            "channel is {}x{} but design expects {}x{}",
            h.nrows(),
            h.ncols(),
            design.num_bs_antennas(),
            design.num_user_antennas()
        )));
    }
    if design.t3() % design.num_bs_rf != 0 {
        return Err(Error::DimensionMismatch(format!(
            "T3 = {} is not a multiple of N_R = {}",
            design.t3(),
            design.num_bs_rf
        )));
    }
    Ok(())
}

/// Adds per-block combined noise `W^{t2} n^{t1,t2}` to `r` in place.
fn add_block_noise<R: Rng + ?Sized>(
    r: &mut CMat,
    combiner: &CMat,
    n_rf: usize,
    noise_variance: f64,
    rng: &mut R,
) {
    if noise_variance <= 0.0 {
        return;
    }
    let (t3, n_a) = combiner.shape();
    let t1 = r.ncols();
    for block in 0..t3 / n_rf {
        let raw = complex_gaussian_matrix(rng, n_a, t1, noise_variance);
        let w = combiner.rows(block * n_rf, n_rf);
        let mut rows = r.rows_mut(block * n_rf, n_rf);
        rows += w * raw;
    }
}

/// Measurements `[user][i]` for `subcarriers[i]` in one stage.
pub fn simulate_stage<R: Rng + ?Sized>(
    design: &SoundingDesign,
    realization: &ChannelRealization,
    stage: StageId,
    mode: SoundingMode,
    subcarriers: &[usize],
    noise_variance: f64,
    rng: &mut R,
) -> Result<Vec<Vec<CMat>>> {
    check_shapes(design, realization)?;
    let (w, f) = stage_matrices(design, stage, mode)?;
    let mut out = Vec::with_capacity(realization.num_users());
    for user_channels in &realization.subcarrier_matrices {
        let mut per_k = Vec::with_capacity(subcarriers.len());
        for &k in subcarriers {
            let h = user_channels.get(k).ok_or_else(|| {
                Error::DimensionMismatch(format!("subcarrier {k} out of range"))
            })?;
            let mut r = &w * h * &f;
            add_block_noise(&mut r, &w, design.num_bs_rf, noise_variance, rng);
            per_k.push(r);
        }
        out.push(per_k);
    }
    Ok(out)
}

/// Noise variance giving the requested SNR for this realization under the
/// stage-1 matrices of `mode`.
pub fn noise_variance_for_snr(
    design: &SoundingDesign,
    realization: &ChannelRealization,
    mode: SoundingMode,
    snr_db: f64,
) -> Result<f64> {
    check_shapes(design, realization)?;
    let (w, f) = stage_matrices(design, StageId::Stage1, mode)?;
    let mut signal = 0.0;
    let mut count = 0usize;
    for user_channels in &realization.subcarrier_matrices {
        for h in user_channels {
            signal += (&w * h * &f).norm_squared();
            count += 1;
        }
    }
    signal /= count as f64;
    let noise_per_unit = f.ncols() as f64 * w.norm_squared();
    Ok(signal / (10f64.powf(snr_db / 10.0) * noise_per_unit))
}

/// Runs every stage of `mode` and collects the measurement set.
pub fn sound(
    design: &SoundingDesign,
    realization: &ChannelRealization,
    mode: SoundingMode,
    noise: NoiseLevel,
    rng_seed: u64,
) -> Result<MeasurementSet> {
    let (noise_variance, snr_db) = match noise {
        NoiseLevel::Variance(v) => (v, None),
        NoiseLevel::SnrDb(db) => (
            noise_variance_for_snr(design, realization, mode, db)?,
            Some(db),
        ),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let k_all: Vec<usize> = (0..realization.subcarrier_matrices[0].len()).collect();
    let stage1 = simulate_stage(
        design,
        realization,
        StageId::Stage1,
        mode,
        &k_all,
        noise_variance,
        &mut rng,
    )?;
    let take_k0 = |v: Vec<Vec<CMat>>| v.into_iter().map(|mut u| u.swap_remove(0)).collect();
    let stage2 = take_k0(simulate_stage(
        design,
        realization,
        StageId::Stage2,
        mode,
        &[0],
        noise_variance,
        &mut rng,
    )?);
    let stage3 = match mode {
        SoundingMode::Tde => Some(take_k0(simulate_stage(
            design,
            realization,
            StageId::Stage3,
            mode,
            &[0],
            noise_variance,
            &mut rng,
        )?)),
        SoundingMode::Ems => None,
    };
    Ok(MeasurementSet {
        mode,
        stage1,
        stage2,
        stage3,
        noise_variance,
        snr_db,
        rng_seed,
    })
}

/// Total training slots: `(K+2) U T1 T2` for three stages, `(K+1) U T1 T2` for two.
pub fn pilot_slots(mode: SoundingMode, cfg: &SystemConfig) -> usize {
    let extra = match mode {
        SoundingMode::Tde => 2,
        SoundingMode::Ems => 1,
    };
    (cfg.num_subcarriers + extra) * cfg.num_users * cfg.t1 * cfg.t2
}

/// Columns of the unitary `U x U` DFT matrix.
pub fn dft_pilots(num_users: usize) -> Vec<CVec> {
    let scale = 1.0 / (num_users as f64).sqrt();
    (0..num_users)
        .map(|u| {
            CVec::from_fn(num_users, |i, _| {
                Complex64::from_polar(scale, -2.0 * PI * (u * i) as f64 / num_users as f64)
            })
        })
        .collect()
}

/// Received `N_R x U` pilot block `sum_u (W H_u f_u) p_u^H + W N` for one slot.
pub fn received_pilot_matrix(
    combiner_block: &CMat,
    channels: &[&CMat],
    precoder_columns: &[CVec],
    pilots: &[CVec],
    noise: Option<&CMat>,
) -> Result<CMat> {
    if channels.len() != precoder_columns.len() || channels.len() != pilots.len() {
        return Err(Error::DimensionMismatch(
            "need one channel, precoder and pilot per user".into(),
        ));
    }
    let u = pilots.len();
    let mut y = CMat::zeros(combiner_block.nrows(), u);
    for ((h, f), p) in channels.iter().zip(precoder_columns).zip(pilots) {
        let r = combiner_block * (*h * f);
        y += r * p.adjoint();
    }
    if let Some(n) = noise {
        y += combiner_block * n;
    }
    Ok(y)
}

/// `Y p_u`; the pilot must have unit norm.
pub fn despread(received: &CMat, pilot: &CVec) -> Result<CVec> {
    let norm = pilot.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::PilotNorm(norm));
    }
    if received.ncols() != pilot.len() {
        return Err(Error::DimensionMismatch(format!(
            "pilot length {} vs {} received columns",
            pilot.len(),
            received.ncols()
        )));
    }
    Ok(received * pilot)
}

/// Slot-by-slot multiuser protocol for one stage and subcarrier: builds every
/// received pilot block, despreads it with the DFT pilot set and stacks the
/// result into per-user `T3 x T1` measurements.
pub fn simulate_stage_multiuser<R: Rng + ?Sized>(
    design: &SoundingDesign,
    realization: &ChannelRealization,
    stage: StageId,
    mode: SoundingMode,
    k: usize,
    noise_variance: f64,
    rng: &mut R,
) -> Result<Vec<CMat>> {
    check_shapes(design, realization)?;
    let (w, f) = stage_matrices(design, stage, mode)?;
    let n_users = realization.num_users();
    let n_rf = design.num_bs_rf;
    let pilots = dft_pilots(n_users);
    let channels: Vec<&CMat> = realization
        .subcarrier_matrices
        .iter()
        .map(|u| &u[k])
        .collect();
    let (t3, t1) = (w.nrows(), f.ncols());
    let mut out = vec![CMat::zeros(t3, t1); n_users];
    for col in 0..t1 {
        let f_col: CVec = f.column(col).into_owned();
        let precoders = vec![f_col; n_users];
        for block in 0..t3 / n_rf {
            let w_block = w.rows(block * n_rf, n_rf).into_owned();
            let noise = (noise_variance > 0.0).then(|| {
                complex_gaussian_matrix(rng, w.ncols(), n_users, noise_variance)
            });
            let y = received_pilot_matrix(&w_block, &channels, &precoders, &pilots, noise.as_ref())?;
            for (u, pilot) in pilots.iter().enumerate() {
                let r = despread(&y, pilot)?;
                out[u].view_mut((block * n_rf, col), (n_rf, 1)).copy_from(&r);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam_design::build_designs;
    use crate::channel::generate_realization;

    fn small_cfg() -> SystemConfig {
        SystemConfig {
            num_bs_antennas: 12,
            num_user_antennas: 6,
            num_bs_rf: 2,
            num_users: 2,
            num_subcarriers: 4,
            num_taps: 2,
            num_paths: 2,
            t1: 4,
            t2: 3,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn identity_rows_select_channel_entries() {
        let cfg = small_cfg();
        let mut design = build_designs(&cfg, 50).unwrap();
        let t3 = cfg.t3();
        design.combiner_masked = CMat::identity(t3, cfg.num_bs_antennas - 1);
        design.precoder = CMat::zeros(cfg.num_user_antennas, cfg.t1);
        design.precoder[(0, 0)] = Complex64::new(1.0, 0.0);
        let real = generate_realization(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = simulate_stage(&design, &real, StageId::Stage1, SoundingMode::Ems, &[1], 0.0, &mut rng)
            .unwrap();
        let h = &real.subcarrier_matrices[1][1];
        for row in 0..t3 {
            assert_eq!(r[1][0][(row, 0)], h[(row, 0)]);
            for col in 1..cfg.t1 {
                assert_eq!(r[1][0][(row, col)], Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn shift_invariance_between_stages() {
        let cfg = SystemConfig {
            num_paths: 1,
            ..small_cfg()
        };
        let design = build_designs(&cfg, 50).unwrap();
        let real = generate_realization(&cfg).unwrap();
        let meas = sound(&design, &real, SoundingMode::Tde, NoiseLevel::Variance(0.0), 3).unwrap();
        for u in 0..cfg.num_users {
            let p = real.paths[u][0];
            let rot = Complex64::from_polar(1.0, PI * p.aoa_sin);
            let r1 = &meas.stage1[u][0];
            assert!((&meas.stage2[u] - r1 * rot).norm() < 1e-12 * r1.norm());
            // user-side shift rotates the conjugate AoD phase
            let rot = Complex64::from_polar(1.0, -PI * p.aod_sin);
            assert!((&meas.stage3.as_ref().unwrap()[u] - r1 * rot).norm() < 1e-12 * r1.norm());
        }
    }

    #[test]
    fn noise_free_matches_factored_model() {
        let cfg = small_cfg();
        let design = build_designs(&cfg, 50).unwrap();
        let real = generate_realization(&cfg).unwrap();
        let meas = sound(&design, &real, SoundingMode::Tde, NoiseLevel::Variance(0.0), 0).unwrap();
        let (w, f) = stage_matrices(&design, StageId::Stage1, SoundingMode::Tde).unwrap();
        for u in 0..cfg.num_users {
            for k in 0..cfg.num_subcarriers {
                let rebuilt = &w * real.rebuild_subcarrier(u, k) * &f;
                let r = &meas.stage1[u][k];
                assert!((r - rebuilt).norm() < 1e-10 * r.norm());
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = small_cfg();
        let design = build_designs(&cfg, 50).unwrap();
        let real = generate_realization(&cfg).unwrap();
        let a = sound(&design, &real, SoundingMode::Ems, NoiseLevel::SnrDb(5.0), 9).unwrap();
        let b = sound(&design, &real, SoundingMode::Ems, NoiseLevel::SnrDb(5.0), 9).unwrap();
        assert_eq!(a, b);
        assert!(a.stage3.is_none());
        assert_eq!(a.stage1[0].len(), cfg.num_subcarriers);
    }

    #[test]
    fn snr_convention_hits_target() {
        let cfg = small_cfg();
        let design = build_designs(&cfg, 50).unwrap();
        let real = generate_realization(&cfg).unwrap();
        let var = noise_variance_for_snr(&design, &real, SoundingMode::Tde, 10.0).unwrap();
        let (w, f) = stage_matrices(&design, StageId::Stage1, SoundingMode::Tde).unwrap();
        let mut sig = 0.0;
        for u in 0..cfg.num_users {
            for k in 0..cfg.num_subcarriers {
                sig += (&w * &real.subcarrier_matrices[u][k] * &f).norm_squared();
            }
        }
        sig /= (cfg.num_users * cfg.num_subcarriers) as f64;
        let noise = var * cfg.t1 as f64 * w.norm_squared();
        assert!((sig / noise - 10.0).abs() < 1e-9);
    }

    #[test]
    fn combined_noise_power_matches_prediction() {
        let cfg = SystemConfig {
            num_users: 1,
            num_subcarriers: 1,
            num_taps: 1,
            ..small_cfg()
        };
        let design = build_designs(&cfg, 50).unwrap();
        let real = generate_realization(&cfg).unwrap();
        let (w, f) = stage_matrices(&design, StageId::Stage1, SoundingMode::Tde).unwrap();
        let clean = &w * &real.subcarrier_matrices[0][0] * &f;
        let sigma2 = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 10_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let r = simulate_stage(&design, &real, StageId::Stage1, SoundingMode::Tde, &[0], sigma2, &mut rng)
                .unwrap();
            acc += (&r[0][0] - &clean).norm_squared();
        }
        let per_entry = acc / (trials * cfg.t3() * cfg.t1) as f64;
        let predicted = w.norm_squared() * sigma2 / cfg.t3() as f64;
        assert!((per_entry / predicted - 1.0).abs() < 0.02, "{per_entry} vs {predicted}");
    }

    #[test]
    fn despread_identity_pilots_returns_column() {
        let y = CMat::from_fn(3, 4, |r, c| Complex64::new(r as f64, c as f64));
        let mut e = CVec::zeros(4);
        e[2] = Complex64::new(1.0, 0.0);
        assert_eq!(despread(&y, &e).unwrap(), y.column(2).into_owned());
        let bad = e * Complex64::new(2.0, 0.0);
        assert!(matches!(despread(&y, &bad), Err(Error::PilotNorm(_))));
    }

    #[test]
    fn multiuser_protocol_separates_users() {
        let cfg = small_cfg();
        let design = build_designs(&cfg, 50).unwrap();
        let real = generate_realization(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for stage in [StageId::Stage1, StageId::Stage2, StageId::Stage3] {
            let joint = simulate_stage_multiuser(&design, &real, stage, SoundingMode::Tde, 0, 0.0, &mut rng)
                .unwrap();
            let isolated =
                simulate_stage(&design, &real, stage, SoundingMode::Tde, &[0], 0.0, &mut rng).unwrap();
            for u in 0..cfg.num_users {
                assert!((&joint[u] - &isolated[u][0]).norm() < 1e-12 * joint[u].norm());
            }
        }
    }

    #[test]
    fn despread_preserves_noise_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pilots = dft_pilots(4);
        let trials = 10_000;
        let sigma2 = 2.0;
        let mut acc = 0.0;
        for _ in 0..trials {
            let y = complex_gaussian_matrix(&mut rng, 3, 4, sigma2);
            acc += despread(&y, &pilots[1]).unwrap().norm_squared();
        }
        let per_entry = acc / (trials * 3) as f64;
        assert!((per_entry / sigma2 - 1.0).abs() < 0.02, "{per_entry}");
    }

    #[test]
    fn dft_pilots_are_orthonormal() {
        let p = dft_pilots(5);
        for i in 0..5 {
            for j in 0..5 {
                let ip = p[i].dotc(&p[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip - Complex64::new(expect, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn pilot_slot_accounting() {
        let cfg = SystemConfig::default();
        assert_eq!(pilot_slots(SoundingMode::Tde, &cfg), 6912);
        assert_eq!(pilot_slots(SoundingMode::Ems, &cfg), 17 * 4 * 12 * 8);
        let cfg = SystemConfig { t1: 10, t2: 10, ..cfg };
        assert_eq!(pilot_slots(SoundingMode::Tde, &cfg), 7200);
    }

    #[test]
    fn json_round_trip() {
        let cfg = small_cfg();
        let design = build_designs(&cfg, 50).unwrap();
        let real = generate_realization(&cfg).unwrap();
        let meas = sound(&design, &real, SoundingMode::Tde, NoiseLevel::SnrDb(3.0), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        meas.save_json(&path).unwrap();
        assert_eq!(MeasurementSet::load_json(&path).unwrap(), meas);
    }
}
