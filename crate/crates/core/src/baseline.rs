//! On-grid orthogonal matching pursuit over a separable beamspace dictionary.

use serde::{Deserialize, Serialize};

use crate::beam_design::SoundingDesign;
use crate::error::{Error, Result};
use crate::linalg::{lstsq, steering_matrix, CMat};
use crate::sounding::{stage_matrices, MeasurementSet, SoundingMode, StageId};
use crate::tde::{
    coincident, estimate_gains, gain_system, reconstruct, AngleEstimates, ChannelEstimate,
    EstimateFlags,
};

pub const DEFAULT_GRID: usize = 90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmpOptions {
    pub grid_rx: usize,
    pub grid_tx: usize,
}

impl Default for OmpOptions {
    fn default() -> Self {
        Self {
            grid_rx: DEFAULT_GRID,
            grid_tx: DEFAULT_GRID,
        }
    }
}

/// Atoms `(F^T conj a_T(phi_g)) kron (W a_R(theta_g))`, kept in factored form:
/// the receive and transmit factors are stored separately with unit-norm
/// columns, so atom `(g_r, g_t)` is the Kronecker product of two columns.
#[derive(Debug, Clone)]
pub struct BeamspaceDictionary {
    pub grid_rx: Vec<f64>,
    pub grid_tx: Vec<f64>,
    /// `T3 x G_r`
    pub rx_atoms: CMat,
    /// `T1 x G_t`
    pub tx_atoms: CMat,
}

pub fn uniform_grid(size: usize) -> Vec<f64> {
    (0..size).map(|g| -1.0 + 2.0 * g as f64 / size as f64).collect()
}

fn normalize_columns(mut m: CMat) -> CMat {
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= num_complex::Complex64::new(n, 0.0);
        }
    }
    m
}

impl BeamspaceDictionary {
    pub fn new(combiner: &CMat, precoder: &CMat, opts: &OmpOptions) -> Result<Self> {
        if opts.grid_rx == 0 || opts.grid_tx == 0 {
            return Err(Error::InvalidConfig("OMP grids must be nonempty".into()));
        }
        let grid_rx = uniform_grid(opts.grid_rx);
        let grid_tx = uniform_grid(opts.grid_tx);
        let rx_atoms = normalize_columns(combiner * steering_matrix(combiner.ncols(), &grid_rx));
        let tx_atoms = normalize_columns(
            precoder.transpose() * steering_matrix(precoder.nrows(), &grid_tx).map(|z| z.conj()),
        );
        Ok(Self {
            grid_rx,
            grid_tx,
            rx_atoms,
            tx_atoms,
        })
    }

    /// Dictionary for the first-stage matrices of a sounding mode.
    pub fn for_design(design: &SoundingDesign, mode: SoundingMode, opts: &OmpOptions) -> Result<Self> {
        let (w, f) = stage_matrices(design, StageId::Stage1, mode)?;
        Self::new(&w, &f, opts)
    }

    pub fn len(&self) -> usize {
        self.grid_rx.len() * self.grid_tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `|<atom, vec(R)>|` for every atom, as a `G_r x G_t` matrix.
    pub fn correlations(&self, residual: &CMat) -> nalgebra::DMatrix<f64> {
        let c = self.rx_atoms.adjoint() * residual * self.tx_atoms.map(|z| z.conj());
        c.map(|z| z.norm())
    }
}

#[derive(Debug, Clone)]
pub struct OmpSupport {
    pub angles: AngleEstimates,
    /// Residual Frobenius norm before the first and after every iteration.
    pub residual_norms: Vec<f64>,
}

/// Greedy support selection on one measurement with a least-squares refit of
/// all selected atoms after every pick.
pub fn omp_support(
    measurement: &CMat,
    combiner: &CMat,
    precoder: &CMat,
    dict: &BeamspaceDictionary,
    num_paths: usize,
) -> Result<OmpSupport> {
    let available = measurement.len().min(dict.len());
    if num_paths == 0 || num_paths > available {
        return Err(Error::TooManyPaths {
            paths: num_paths,
            available,
        });
    }
    let (t3, t1) = measurement.shape();
    let mut angles = AngleEstimates {
        aoa_sins: Vec::new(),
        aod_sins: Vec::new(),
        paired: true,
    };
    let mut picked: Vec<(usize, usize)> = Vec::new();
    let mut residual = measurement.clone();
    let mut residual_norms = vec![residual.norm()];
    let target = CMat::from_column_slice(measurement.len(), 1, measurement.as_slice());
    for _ in 0..num_paths {
        let corr = dict.correlations(&residual);
        let mut best = (0, 0, f64::NEG_INFINITY);
        for t in 0..corr.ncols() {
            for r in 0..corr.nrows() {
                if corr[(r, t)] > best.2 && !picked.contains(&(r, t)) {
                    best = (r, t, corr[(r, t)]);
                }
            }
        }
        let (r, t, _) = best;
        picked.push((r, t));
        angles.aoa_sins.push(dict.grid_rx[r]);
        angles.aod_sins.push(dict.grid_tx[t]);
        let system = gain_system(combiner, precoder, &angles);
        let coef = lstsq(&system, &target).ok_or(Error::RankDeficient {
            user: None,
            context: "OMP support".into(),
        })?;
        let fit = &system * coef;
        residual = measurement - CMat::from_column_slice(t3, t1, fit.as_slice());
        residual_norms.push(residual.norm());
    }
    Ok(OmpSupport {
        angles,
        residual_norms,
    })
}

/// On-grid estimate for one user from the first-stage measurements.
pub fn omp_estimate(
    meas: &MeasurementSet,
    design: &SoundingDesign,
    dict: &BeamspaceDictionary,
    user: usize,
    num_paths: usize,
    gamma: f64,
) -> Result<ChannelEstimate> {
    let (w, f) = stage_matrices(design, StageId::Stage1, meas.mode)?;
    let r0 = meas
        .stage1
        .get(user)
        .and_then(|u| u.first())
        .ok_or(Error::MissingStage("stage 1"))?;
    let support = omp_support(r0, &w, &f, dict, num_paths).map_err(|e| e.with_user(user))?;
    let gains = estimate_gains(&meas.stage1[user], &w, &f, &support.angles, gamma, user)?;
    let channels = reconstruct(w.ncols(), f.nrows(), &support.angles, &gains, gamma);
    let flags = EstimateFlags {
        coincident_angles: coincident(&support.angles),
        ..EstimateFlags::default()
    };
    Ok(ChannelEstimate {
        user,
        angles: support.angles,
        gains,
        channels,
        flags,
        aod_search: None,
    })
}
