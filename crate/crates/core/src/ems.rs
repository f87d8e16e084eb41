//! Two-stage estimator: ESPRIT AoAs, then one AoD per path by minimizing the
//! energy of the user-side steering vector outside the estimated path
//! direction.

use serde::{Deserialize, Serialize};

use crate::beam_design::SoundingDesign;
use crate::error::{Error, Result};
use crate::linalg::{lstsq, orthogonal_complement, steering_matrix, steering_vector, wrap_sin, CMat, CVec};
use crate::sounding::{stage_matrices, MeasurementSet, StageId};
use crate::tde::{
    coincident, coupling_matrix, esprit_shift_invariance, estimate_gains, pair_angles, reconstruct,
    AngleEstimates, AodSearch, ChannelEstimate, EstimateFlags,
};

/// Final interval width of the AoD refinement, sine domain.
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

const DERIVATIVE_STEP: f64 = 1e-6;
const FLAT_DERIVATIVE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmsOptions {
    pub tolerance: f64,
    /// Re-run greedy pairing on the final angles as a consistency pass.
    pub repair_pairs: bool,
}

impl Default for EmsOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            repair_pairs: false,
        }
    }
}

/// `(1/gamma) (W A_R)^+ R`, rows are the per-path transmit signatures.
pub fn ls_path_matrix(r1: &CMat, combiner: &CMat, aoa: &[f64], gamma: f64) -> Result<CMat> {
    if aoa.len() > combiner.nrows() {
        return Err(Error::TooManyPaths {
            paths: aoa.len(),
            available: combiner.nrows(),
        });
    }
    let a_r = steering_matrix(combiner.ncols(), aoa);
    let sol = lstsq(&(combiner * a_r), r1).ok_or(Error::RankDeficient {
        user: None,
        context: "combined AoA steering matrix".into(),
    })?;
    Ok(sol / num_complex::Complex64::new(gamma, 0.0))
}

/// `P(phi) = ||U^H F^H a(phi)||^2` for one path.
#[derive(Debug, Clone)]
pub struct AodObjective {
    pub path: usize,
    /// `T1 x (T1-1)`, orthonormal, orthogonal to the path signature.
    pub basis: CMat,
    pub tolerance: f64,
    projected: CMat,
    num_user_antennas: usize,
}

impl AodObjective {
    /// `signature` is `d_i`, the conjugated row `i` of the path matrix.
    pub fn new(path: usize, signature: &CVec, precoder: &CMat, tolerance: f64) -> Self {
        Self::with_basis(path, orthogonal_complement(signature), precoder, tolerance)
    }

    pub fn with_basis(path: usize, basis: CMat, precoder: &CMat, tolerance: f64) -> Self {
        let projected = basis.adjoint() * precoder.adjoint();
        Self {
            path,
            basis,
            tolerance,
            projected,
            num_user_antennas: precoder.nrows(),
        }
    }

    pub fn num_user_antennas(&self) -> usize {
        self.num_user_antennas
    }

    pub fn eval(&self, phi: f64) -> f64 {
        (&self.projected * steering_vector(self.num_user_antennas, phi)).norm_squared()
    }

    fn derivative(&self, phi: f64) -> f64 {
        (self.eval(phi + DERIVATIVE_STEP) - self.eval(phi - DERIVATIVE_STEP)) / (2.0 * DERIVATIVE_STEP)
    }
}

/// Coarse sector index and the unwrapped interval one grid step either side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMinimum {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

impl CoarseMinimum {
    /// Whether `phi` lies in the interval, modulo 2.
    pub fn contains(&self, phi: f64) -> bool {
        let shifted = self.lower + (phi - self.lower).rem_euclid(2.0);
        shifted <= self.upper
    }
}

pub fn coarse_grid(num_user_antennas: usize) -> Vec<f64> {
    let m = num_user_antennas as f64;
    (0..num_user_antennas).map(|n| -1.0 + 2.0 * n as f64 / m).collect()
}

/// Grid minimum of the objective over `M_A` equally spaced points (ties
/// resolve to the smallest index).
///
/// The returned interval is `[phi_n - 2/M_A, phi_n + 2/M_A]` and is allowed
/// to cross the `-1` edge: the objective has period 2, so an edge sector
/// keeps its full mainlobe instead of losing half of it to clamping.
pub fn coarse_minimum(obj: &AodObjective) -> CoarseMinimum {
    let grid = coarse_grid(obj.num_user_antennas);
    let mut best = (0, f64::INFINITY);
    for (n, &phi) in grid.iter().enumerate() {
        let v = obj.eval(phi);
        if v < best.1 {
            best = (n, v);
        }
    }
    let step = 2.0 / obj.num_user_antennas as f64;
    CoarseMinimum {
        index: best.0,
        lower: grid[best.0] - step,
        upper: grid[best.0] + step,
    }
}

/// Iteration budget for halving an interval of `width` down to `tolerance`.
pub fn iteration_budget(width: f64, tolerance: f64) -> usize {
    (width / tolerance).log2().round().max(0.0) as usize + 2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    /// Wrapped onto `[-1, 1)`.
    pub value: f64,
    pub iterations: usize,
}

/// Bisection on the sign of the objective's derivative over `[lower, upper]`.
///
/// Each step halves the bracket. When the central difference is flat the
/// step instead compares the objective at the two quarter points. Once the
/// bracket is no wider than the tolerance, the zero of the derivative is
/// interpolated linearly between the bracket ends.
pub fn refine_minimum(obj: &AodObjective, lower: f64, upper: f64, tolerance: f64) -> Refinement {
    let (mut lo, mut hi) = (lower, upper);
    let budget = iteration_budget(upper - lower, tolerance);
    let mut iterations = 0;
    while hi - lo > tolerance && iterations < budget {
        let mid = 0.5 * (lo + hi);
        let d = obj.derivative(mid);
        let go_left = if d.abs() < FLAT_DERIVATIVE {
            let q = 0.25 * (hi - lo);
            obj.eval(mid - q) < obj.eval(mid + q)
        } else {
            d > 0.0
        };
        if go_left {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    let (d_lo, d_hi) = (obj.derivative(lo), obj.derivative(hi));
    let value = if d_lo < 0.0 && d_hi > 0.0 {
        lo - d_lo * (hi - lo) / (d_hi - d_lo)
    } else if obj.eval(lo) <= obj.eval(hi) {
        lo
    } else {
        hi
    };
    Refinement {
        value: wrap_sin(value),
        iterations,
    }
}

/// Full two-stage estimate for one user.
pub fn estimate_ems(
    meas: &MeasurementSet,
    design: &SoundingDesign,
    user: usize,
    num_paths: usize,
    gamma: f64,
    opts: &EmsOptions,
) -> Result<ChannelEstimate> {
    if !(opts.tolerance > 0.0) {
        return Err(Error::InvalidConfig("EMS tolerance must be positive".into()));
    }
    let r1 = meas
        .stage1
        .get(user)
        .and_then(|u| u.first())
        .ok_or(Error::MissingStage("stage 1"))?;
    let r2 = meas.stage2.get(user).ok_or(Error::MissingStage("stage 2"))?;
    let aoa = esprit_shift_invariance(r1, r2, num_paths)?;
    let (w, f) = stage_matrices(design, StageId::Stage1, meas.mode)?;
    let paths = ls_path_matrix(r1, &w, &aoa.angles, gamma).map_err(|e| e.with_user(user))?;

    let mut aod = Vec::with_capacity(num_paths);
    let mut searches = Vec::with_capacity(num_paths);
    for i in 0..num_paths {
        let signature: CVec = paths.row(i).adjoint();
        let obj = AodObjective::new(i, &signature, &f, opts.tolerance);
        let coarse = coarse_minimum(&obj);
        let fine = refine_minimum(&obj, coarse.lower, coarse.upper, opts.tolerance);
        aod.push(fine.value);
        searches.push(AodSearch {
            coarse_index: coarse.index,
            interval: (coarse.lower, coarse.upper),
            iterations: fine.iterations,
        });
    }

    let mut angles = AngleEstimates {
        aoa_sins: aoa.angles.clone(),
        aod_sins: aod,
        paired: true,
    };
    if opts.repair_pairs {
        let coupling = coupling_matrix(r1, &w, &f, &angles.aoa_sins, &angles.aod_sins, gamma)
            .map_err(|e| e.with_user(user))?;
        angles = pair_angles(&angles.aoa_sins, &angles.aod_sins, &coupling);
    }
    let gains = estimate_gains(&meas.stage1[user], &w, &f, &angles, gamma, user)?;
    let channels = reconstruct(w.ncols(), f.nrows(), &angles, &gains, gamma);
    let mainlobe = 4.0 / f.nrows() as f64;
    let flags = EstimateFlags {
        low_rank: aoa.low_rank,
        coincident_angles: coincident(&angles),
        mainlobe_collision: crate::linalg::min_separation(&angles.aod_sins) < mainlobe,
    };
    Ok(ChannelEstimate {
        user,
        angles,
        gains,
        channels,
        flags,
        aod_search: Some(searches),
    })
}

/// Closed-form objective for a unitary precoder and an exact signature:
/// `1 - |D_M(phi - phi_i)|^2 / M^2` with the Dirichlet kernel `D_M`.
pub fn ideal_objective(phi: f64, phi_i: f64, num_user_antennas: usize) -> f64 {
    let m = num_user_antennas as f64;
    let x = std::f64::consts::PI * (phi - phi_i) / 2.0;
    let den = (m * x.sin()).powi(2);
    if den < 1e-300 {
        return 0.0;
    }
    1.0 - (m * x).sin().powi(2) / den
}
