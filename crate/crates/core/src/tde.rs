//! Three-stage estimator: ESPRIT for the angles of arrival and departure,
//! greedy pairing, least-squares path gains and reconstruction.
//!
//! The shared estimate types live here as well because the two-stage and
//! on-grid estimators reuse the gain solve and the reconstruction.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beam_design::SoundingDesign;
use crate::error::{Error, Result};
use crate::linalg::{
    eigenvalues, hermitian_eigen_desc, lstsq, min_separation, steering_matrix, wrap_sin, CMat,
    CVec, RANK_RCOND,
};
use crate::sounding::{stage_matrices, MeasurementSet, SoundingMode, StageId};

/// Relative eigenvalue gap of `B = R R^H` under which the signal subspace is
/// reported as rank deficient.
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-12;

/// Angle pairs closer than this (sine domain) are flagged as coincident.
pub const COINCIDENT_ANGLE_SEPARATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleEstimates {
    pub aoa_sins: Vec<f64>,
    pub aod_sins: Vec<f64>,
    pub paired: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    /// The dominant-subspace eigenvalue gap fell under the rank threshold.
    pub low_rank: bool,
    /// Two estimated AoAs or AoDs are closer than [`COINCIDENT_ANGLE_SEPARATION`].
    pub coincident_angles: bool,
    /// Two AoDs share one mainlobe (closer than `4 / M_A`); two-stage only.
    pub mainlobe_collision: bool,
}

/// Per-path record of the two-stage AoD search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AodSearch {
    /// Zero-based coarse grid index of the selected sector.
    pub coarse_index: usize,
    /// Search interval, unwrapped (may extend past `[-1, 1)` at the edges).
    pub interval: (f64, f64),
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEstimate {
    pub user: usize,
    pub angles: AngleEstimates,
    /// `[k]`, length `L` each.
    pub gains: Vec<CVec>,
    /// `[k]`, each `N_A x M_A`.
    pub channels: Vec<CMat>,
    pub flags: EstimateFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aod_search: Option<Vec<AodSearch>>,
}

#[derive(Debug, Clone)]
pub struct EspritOutput {
    /// Sorted ascending, each in `[-1, 1)`.
    pub angles: Vec<f64>,
    /// Eigenvalues of the rotation operator, in the same order as `angles`.
    pub rotations: Vec<Complex64>,
    /// Eigenvalues of `B`, descending.
    pub subspace_spectrum: Vec<f64>,
    pub low_rank: bool,
}

/// Shift-invariance estimate of `L` rotation angles between `r1` and `r2`.
pub fn esprit_shift_invariance(r1: &CMat, r2: &CMat, num_paths: usize) -> Result<EspritOutput> {
    esprit_with_threshold(r1, r2, num_paths, DEFAULT_RANK_THRESHOLD)
}

pub fn esprit_with_threshold(
    r1: &CMat,
    r2: &CMat,
    num_paths: usize,
    rank_threshold: f64,
) -> Result<EspritOutput> {
    if r1.shape() != r2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "ESPRIT inputs are {:?} and {:?}",
            r1.shape(),
            r2.shape()
        )));
    }
    let t_a = r1.nrows();
    if num_paths == 0 || num_paths > t_a {
        return Err(Error::TooManyPaths {
            paths: num_paths,
            available: t_a,
        });
    }
    let mut stacked = CMat::zeros(2 * t_a, r1.ncols());
    stacked.rows_mut(0, t_a).copy_from(r1);
    stacked.rows_mut(t_a, t_a).copy_from(r2);
    let b = &stacked * stacked.adjoint();
    let (spectrum, vectors) = hermitian_eigen_desc(&b);
    let low_rank = !(spectrum[num_paths - 1] > rank_threshold * spectrum[0]);
    let us = vectors.columns(0, num_paths);
    let us1 = us.rows(0, t_a).into_owned();
    let us2 = us.rows(t_a, t_a).into_owned();
    let psi = lstsq(&us1, &us2).ok_or(Error::RankDeficient {
        user: None,
        context: "ESPRIT signal subspace".into(),
    })?;
    let mut pairs: Vec<(f64, Complex64)> = eigenvalues(&psi)
        .into_iter()
        .map(|z| (wrap_sin(z.arg() / std::f64::consts::PI), z))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(EspritOutput {
        angles: pairs.iter().map(|p| p.0).collect(),
        rotations: pairs.iter().map(|p| p.1).collect(),
        subspace_spectrum: spectrum,
        low_rank,
    })
}

/// AoAs from the first two stages at `k = 0`.
pub fn estimate_aoa(meas: &MeasurementSet, user: usize, num_paths: usize) -> Result<EspritOutput> {
    let r1 = first_stage_k0(meas, user)?;
    let r2 = meas
        .stage2
        .get(user)
        .ok_or(Error::MissingStage("stage 2"))?;
    esprit_shift_invariance(r1, r2, num_paths)
}

/// AoDs from stages one and three, by running ESPRIT on the adjoints.
pub fn estimate_aod_tde(
    meas: &MeasurementSet,
    user: usize,
    num_paths: usize,
) -> Result<EspritOutput> {
    let r1 = first_stage_k0(meas, user)?;
    let r3 = meas
        .stage3()?
        .get(user)
        .ok_or(Error::MissingStage("stage 3"))?;
    esprit_shift_invariance(&r1.adjoint(), &r3.adjoint(), num_paths)
}

fn first_stage_k0(meas: &MeasurementSet, user: usize) -> Result<&CMat> {
    meas.stage1
        .get(user)
        .and_then(|u| u.first())
        .ok_or(Error::MissingStage("stage 1"))
}

/// `(1/gamma) (W A_R)^+ R (A_T^H F)^+` for unpaired angle lists.
pub fn coupling_matrix(
    r1: &CMat,
    combiner: &CMat,
    precoder: &CMat,
    aoa: &[f64],
    aod: &[f64],
    gamma: f64,
) -> Result<CMat> {
    let a_r = steering_matrix(combiner.ncols(), aoa);
    let a_t = steering_matrix(precoder.nrows(), aod);
    let left = combiner * a_r;
    let right = a_t.adjoint() * precoder;
    let rank_err = |what: &str| Error::RankDeficient {
        user: None,
        context: what.to_string(),
    };
    let tmp = lstsq(&left, r1).ok_or_else(|| rank_err("combined AoA steering matrix"))?;
    // X (A_T^H F) = tmp  <=>  (A_T^H F)^H X^H = tmp^H
    let x_h = lstsq(&right.adjoint(), &tmp.adjoint())
        .ok_or_else(|| rank_err("combined AoD steering matrix"))?;
    Ok(x_h.adjoint() / Complex64::new(gamma, 0.0))
}

/// Greedy pairing: row `i` (AoA `i`) takes the largest-magnitude entry among
/// the columns not yet claimed. Returns `q` with `q[i]` the AoD column of path `i`.
pub fn greedy_pairing(coupling: &CMat) -> Vec<usize> {
    let l = coupling.nrows();
    let mut free: Vec<usize> = (0..coupling.ncols()).collect();
    let mut q = Vec::with_capacity(l);
    for i in 0..l {
        let (pos, _) = free
            .iter()
            .enumerate()
            .map(|(pos, &d)| (pos, coupling[(i, d)].norm()))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        q.push(free.remove(pos));
    }
    q
}

/// Keeps `aoa` and permutes `aod` so that index `i` names one path.
pub fn pair_angles(aoa: &[f64], aod: &[f64], coupling: &CMat) -> AngleEstimates {
    let q = greedy_pairing(coupling);
    AngleEstimates {
        aoa_sins: aoa.to_vec(),
        aod_sins: q.iter().map(|&d| aod[d]).collect(),
        paired: true,
    }
}

/// Columns `vec(p_i q_i^T)` with `p_i = W a_R,i` and `q_i = F^T conj(a_T,i)`.
pub fn gain_system(combiner: &CMat, precoder: &CMat, angles: &AngleEstimates) -> CMat {
    let a_r = steering_matrix(combiner.ncols(), &angles.aoa_sins);
    let a_t = steering_matrix(precoder.nrows(), &angles.aod_sins);
    let p = combiner * a_r;
    let q = precoder.transpose() * a_t.map(|z| z.conj());
    let (t3, t1) = (combiner.nrows(), precoder.ncols());
    let mut m = CMat::zeros(t3 * t1, angles.aoa_sins.len());
    for i in 0..angles.aoa_sins.len() {
        for c in 0..t1 {
            for r in 0..t3 {
                m[(c * t3 + r, i)] = p[(r, i)] * q[(c, i)];
            }
        }
    }
    m
}

/// Least-squares gains for every measurement in `measurements` (one per
/// subcarrier), sharing one factorization of the system matrix.
pub fn estimate_gains(
    measurements: &[CMat],
    combiner: &CMat,
    precoder: &CMat,
    angles: &AngleEstimates,
    gamma: f64,
    user: usize,
) -> Result<Vec<CVec>> {
    let system = gain_system(combiner, precoder, angles);
    let rows = system.nrows();
    let mut rhs = CMat::zeros(rows, measurements.len());
    for (k, r) in measurements.iter().enumerate() {
        if r.len() != rows {
            return Err(Error::DimensionMismatch(format!(
                "measurement {k} has {} entries, expected {rows}",
                r.len()
            )));
        }
        rhs.set_column(k, &CVec::from_column_slice(r.as_slice()));
    }
    let sol = lstsq(&system, &rhs).ok_or(Error::RankDeficient {
        user: Some(user),
        context: format!("gain system (rcond {RANK_RCOND:e})"),
    })?;
    let inv_gamma = Complex64::new(1.0 / gamma, 0.0);
    Ok((0..measurements.len())
        .map(|k| sol.column(k) * inv_gamma)
        .collect())
}

/// `gamma * A_R diag(v) A_T^H` for every subcarrier.
pub fn reconstruct(
    n_bs: usize,
    n_user: usize,
    angles: &AngleEstimates,
    gains: &[CVec],
    gamma: f64,
) -> Vec<CMat> {
    let a_r = steering_matrix(n_bs, &angles.aoa_sins);
    let a_t_h = steering_matrix(n_user, &angles.aod_sins).adjoint();
    gains
        .iter()
        .map(|v| {
            let mut scaled = a_r.clone();
            for (i, mut col) in scaled.column_iter_mut().enumerate() {
                col *= v[i] * gamma;
            }
            scaled * &a_t_h
        })
        .collect()
}

pub(crate) fn coincident(angles: &AngleEstimates) -> bool {
    min_separation(&angles.aoa_sins) < COINCIDENT_ANGLE_SEPARATION
        || min_separation(&angles.aod_sins) < COINCIDENT_ANGLE_SEPARATION
}

/// Full three-stage estimate for one user.
pub fn estimate_tde(
    meas: &MeasurementSet,
    design: &SoundingDesign,
    user: usize,
    num_paths: usize,
    gamma: f64,
) -> Result<ChannelEstimate> {
    if meas.mode != SoundingMode::Tde {
        return Err(Error::MissingStage("stage 3 (measurements are two-stage)"));
    }
    let aoa = estimate_aoa(meas, user, num_paths)?;
    let aod = estimate_aod_tde(meas, user, num_paths)?;
    let (w, f) = stage_matrices(design, StageId::Stage1, SoundingMode::Tde)?;
    let r1 = first_stage_k0(meas, user)?;
    let coupling = coupling_matrix(r1, &w, &f, &aoa.angles, &aod.angles, gamma)
        .map_err(|e| e.with_user(user))?;
    let angles = pair_angles(&aoa.angles, &aod.angles, &coupling);
    let gains = estimate_gains(&meas.stage1[user], &w, &f, &angles, gamma, user)?;
    let channels = reconstruct(w.ncols(), f.nrows(), &angles, &gains, gamma);
    let flags = EstimateFlags {
        low_rank: aoa.low_rank || aod.low_rank,
        coincident_angles: coincident(&angles),
        mainlobe_collision: false,
    };
    Ok(ChannelEstimate {
        user,
        angles,
        gains,
        channels,
        flags,
        aod_search: None,
    })
}
