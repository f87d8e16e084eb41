//! Hybrid combiner/precoder design with near-uniform angular gain.
//!
//! `[-1, 1)` is split into equal sectors, one per combiner row (precoder
//! column). Each row is the closed-form least-squares fit of a unit-gain,
//! linear-phase response over its sector,
//! `w_n = (sqrt(xi) sqrt(N) / 2) * integral over the sector of e^{j(m*pi - a)theta}`,
//! with the phase slope `a` picked on a grid to maximize the fraction of the
//! row's beam power that lands inside its own sector.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, steering_vector, CMat, CVec};

/// Search grid size used when the caller has no preference.
pub const DEFAULT_SEARCH_SAMPLES: usize = 1000;

/// Sector `n` (1-based) of `n_sectors`: `[-1 + 2(n-1)/T, -1 + 2n/T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Sector {
    pub fn new(index: usize, n_sectors: usize) -> Self {
        assert!(
            (1..=n_sectors).contains(&index),
            "sector index {index} outside 1..={n_sectors}"
        );
        let t = n_sectors as f64;
        Self {
            index,
            lower: -1.0 + 2.0 * (index - 1) as f64 / t,
            upper: -1.0 + 2.0 * index as f64 / t,
        }
    }

    fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }
}

/// `integral_{c-h}^{c+h} e^{j x t} dt = e^{j x c} * 2 sin(x h) / x`.
fn exp_integral(x: f64, center: f64, half_width: f64) -> Complex64 {
    let xh = x * half_width;
    let mag = if xh.abs() < 1e-6 {
        2.0 * half_width * (1.0 - xh * xh / 6.0)
    } else {
        2.0 * (xh).sin() / x
    };
    Complex64::from_polar(1.0, x * center) * mag
}

/// Closed-form sector row with unit amplitude (`xi = 1`).
///
/// Entry `m` is `(sqrt(N)/2) * [e^{j(m pi - a) U2} - e^{j(m pi - a) U1}] / (j (m pi - a))`;
/// the entry with `m pi = a` takes its limit `(U2 - U1) sqrt(N)/2`.
pub fn row_closed_form(n: usize, a: f64, n_antennas: usize, n_sectors: usize) -> CVec {
    let sector = Sector::new(n, n_sectors);
    let scale = 0.5 * (n_antennas as f64).sqrt();
    CVec::from_fn(n_antennas, |m, _| {
        let x = m as f64 * PI - a;
        exp_integral(x, sector.center(), sector.half_width()) * scale
    })
}

/// In-sector integral of the beam pattern, `X[m, l] = (1/N) integral e^{j pi (m-l) theta}`.
fn sector_gram(sector: &Sector, n_antennas: usize) -> CMat {
    let inv_n = 1.0 / n_antennas as f64;
    CMat::from_fn(n_antennas, n_antennas, |m, l| {
        let x = (m as f64 - l as f64) * PI;
        exp_integral(x, sector.center(), sector.half_width()) * inv_n
    })
}

/// Fraction of the row's beam power `|w^H alpha(theta)|^2` inside its own sector.
pub fn power_ratio(a: f64, n: usize, n_antennas: usize, n_sectors: usize) -> f64 {
    let w = row_closed_form(n, a, n_antennas, n_sectors);
    let x = sector_gram(&Sector::new(n, n_sectors), n_antennas);
    let inside = (w.adjoint() * &x * &w)[(0, 0)].re;
    let total = 2.0 / n_antennas as f64 * w.norm_squared();
    inside / total
}

/// Grid point `a_n = (N-1)pi/2 + ((N-1)pi/2 + T pi)(n-1)/samples`, `n = 1..=samples`.
pub fn phase_slope_grid(n_antennas: usize, n_sectors: usize, samples: usize) -> Vec<f64> {
    let start = (n_antennas as f64 - 1.0) * PI / 2.0;
    let span = start + n_sectors as f64 * PI;
    (0..samples)
        .map(|i| start + span * i as f64 / samples as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSlope {
    pub value: f64,
    pub ratio: f64,
    /// 1-based position on the search grid.
    pub grid_index: usize,
}

/// Grid argmax of [`power_ratio`]; ties go to the smallest index.
///
/// The ratio does not depend on which sector is used, so sector 1 is searched.
pub fn search_phase_slope(n_antennas: usize, n_sectors: usize, samples: usize) -> PhaseSlope {
    assert!(samples >= 2, "search needs at least two samples");
    let x = sector_gram(&Sector::new(1, n_sectors), n_antennas);
    let total_scale = 2.0 / n_antennas as f64;
    let mut best = PhaseSlope {
        value: f64::NAN,
        ratio: f64::NEG_INFINITY,
        grid_index: 0,
    };
    for (i, a) in phase_slope_grid(n_antennas, n_sectors, samples)
        .into_iter()
        .enumerate()
    {
        let w = row_closed_form(1, a, n_antennas, n_sectors);
        let ratio = (w.adjoint() * &x * &w)[(0, 0)].re / (total_scale * w.norm_squared());
        if ratio > best.ratio {
            best = PhaseSlope {
                value: a,
                ratio,
                grid_index: i + 1,
            };
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamDesignParams {
    pub phase_slope: f64,
    /// Always zero; the power ratio does not depend on the offset.
    pub phase_offset: f64,
    /// `xi`, the per-row amplitude fixing `||w_n||^2` to the row power.
    pub amplitude: f64,
    pub search_samples: usize,
    /// Power ratio achieved by `phase_slope`.
    pub power_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorRow {
    pub sector: Sector,
    pub weights: CVec,
}

/// The sector rows for one array, normalized to `||w_n||^2 = row_power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorCodebook {
    pub rows: Vec<SectorRow>,
    pub params: BeamDesignParams,
}

impl SectorCodebook {
    pub fn design(n_antennas: usize, n_sectors: usize, row_power: f64, samples: usize) -> Self {
        let slope = search_phase_slope(n_antennas, n_sectors, samples);
        let unit = row_closed_form(1, slope.value, n_antennas, n_sectors).norm_squared();
        // every sector row has the same norm: rows differ only by a modulation
        let amplitude = row_power / unit;
        let rows = (1..=n_sectors)
            .map(|n| SectorRow {
                sector: Sector::new(n, n_sectors),
                weights: row_closed_form(n, slope.value, n_antennas, n_sectors)
                    * Complex64::new(amplitude.sqrt(), 0.0),
            })
            .collect();
        Self {
            rows,
            params: BeamDesignParams {
                phase_slope: slope.value,
                phase_offset: 0.0,
                amplitude,
                search_samples: samples,
                power_ratio: slope.ratio,
            },
        }
    }

    /// Rows `w_n^H` stacked into a `T x N` combiner.
    pub fn combiner(&self) -> CMat {
        let n = self.rows[0].weights.len();
        CMat::from_fn(self.rows.len(), n, |r, c| self.rows[r].weights[c].conj())
    }

    /// Columns `w_n` side by side into an `N x T` precoder.
    pub fn precoder(&self) -> CMat {
        let n = self.rows[0].weights.len();
        CMat::from_fn(n, self.rows.len(), |r, c| self.rows[c].weights[r])
    }
}

/// Which single antenna a pilot stage switches off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AntennaMask {
    None,
    First,
    Last,
}

/// Frequency-flat sounding matrices for the BS and (shared) user side.
///
/// All four matrices have unit Frobenius norm. The masked forms are designed
/// for the `N-1` powered antennas and are zero-padded by the stage accessors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundingDesign {
    /// `T3 x N_A`
    pub combiner: CMat,
    /// `T3 x (N_A - 1)`
    pub combiner_masked: CMat,
    /// `M_A x T1`
    pub precoder: CMat,
    /// `(M_A - 1) x T1`
    pub precoder_masked: CMat,
    pub combiner_params: BeamDesignParams,
    pub combiner_masked_params: BeamDesignParams,
    pub precoder_params: BeamDesignParams,
    pub precoder_masked_params: BeamDesignParams,
    pub num_bs_rf: usize,
}

impl SoundingDesign {
    pub fn t1(&self) -> usize {
        self.precoder.ncols()
    }

    pub fn t3(&self) -> usize {
        self.combiner.nrows()
    }

    pub fn num_bs_antennas(&self) -> usize {
        self.combiner.ncols()
    }

    pub fn num_user_antennas(&self) -> usize {
        self.precoder.nrows()
    }

    /// `[W~, 0]` for `Last`, `[0, W~]` for `First`, `W` for `None`.
    pub fn combiner_stage(&self, mask: AntennaMask) -> CMat {
        let (t3, n) = self.combiner.shape();
        match mask {
            AntennaMask::None => self.combiner.clone(),
            AntennaMask::Last => {
                let mut w = CMat::zeros(t3, n);
                w.columns_mut(0, n - 1).copy_from(&self.combiner_masked);
                w
            }
            AntennaMask::First => {
                let mut w = CMat::zeros(t3, n);
                w.columns_mut(1, n - 1).copy_from(&self.combiner_masked);
                w
            }
        }
    }

    /// `[F~; 0]` for `Last`, `[0; F~]` for `First`, `F` for `None`.
    pub fn precoder_stage(&self, mask: AntennaMask) -> CMat {
        let (m, t1) = self.precoder.shape();
        match mask {
            AntennaMask::None => self.precoder.clone(),
            AntennaMask::Last => {
                let mut f = CMat::zeros(m, t1);
                f.rows_mut(0, m - 1).copy_from(&self.precoder_masked);
                f
            }
            AntennaMask::First => {
                let mut f = CMat::zeros(m, t1);
                f.rows_mut(1, m - 1).copy_from(&self.precoder_masked);
                f
            }
        }
    }
}

fn unit_frobenius(mut m: CMat) -> CMat {
    let n = m.norm();
    m /= Complex64::new(n, 0.0);
    m
}

/// Builds the combiner/precoder pair (and their masked forms) for `cfg`.
pub fn build_designs(cfg: &SystemConfig, search_samples: usize) -> Result<SoundingDesign> {
    cfg.validate()?;
    let (n_a, m_a) = (cfg.num_bs_antennas, cfg.num_user_antennas);
    let (t1, t2, t3) = (cfg.t1, cfg.t2, cfg.t3());
    if n_a < 2 || m_a < 2 {
        return Err(Error::DegenerateDesign(
            "antenna masking needs at least two antennas per side".into(),
        ));
    }
    let row_power = t2 as f64 / t3 as f64;
    let col_power = 1.0 / t1 as f64;

    let full_w = SectorCodebook::design(n_a, t3, row_power, search_samples);
    let masked_w = SectorCodebook::design(n_a - 1, t3, row_power, search_samples);
    let full_f = SectorCodebook::design(m_a, t1, col_power, search_samples);
    let masked_f = SectorCodebook::design(m_a - 1, t1, col_power, search_samples);

    let design = SoundingDesign {
        combiner: unit_frobenius(full_w.combiner()),
        combiner_masked: unit_frobenius(masked_w.combiner()),
        precoder: unit_frobenius(full_f.precoder()),
        precoder_masked: unit_frobenius(masked_f.precoder()),
        combiner_params: full_w.params,
        combiner_masked_params: masked_w.params,
        precoder_params: full_f.params,
        precoder_masked_params: masked_f.params,
        num_bs_rf: cfg.num_bs_rf,
    };

    let checks = [
        ("combiner", &design.combiner, t3),
        ("masked combiner", &design.combiner_masked, t3),
        ("precoder", &design.precoder, t1),
        ("masked precoder", &design.precoder_masked, t1),
    ];
    for (name, m, needed) in checks {
        let rank = numerical_rank(m, 1e-10);
        if rank < needed {
            return Err(Error::DegenerateDesign(format!(
                "{name} {}x{} has rank {rank}, needs {needed}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(design)
}

/// Spread of `||M alpha(N, theta)||^2` over a uniform theta grid on `[-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub grid_points: usize,
    pub min_gain: f64,
    pub max_gain: f64,
    pub max_over_min: f64,
}

/// Flatness of `||rows * alpha(theta)||^2`. Pass `F^H` for a precoder.
pub fn flatness(rows: &CMat, grid_points: usize) -> FlatnessReport {
    let n = rows.ncols();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..grid_points {
        let theta = -1.0 + 2.0 * i as f64 / grid_points as f64;
        let g = (rows * steering_vector(n, theta)).norm_squared();
        lo = lo.min(g);
        hi = hi.max(g);
    }
    FlatnessReport {
        grid_points,
        min_gain: lo,
        max_gain: hi,
        max_over_min: hi / lo,
    }
}

/// CSV with columns `row,col,re,im`.
pub fn write_matrix_csv<W: Write>(out: &mut W, m: &CMat) -> std::io::Result<()> {
    writeln!(out, "row,col,re,im")?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let z = m[(r, c)];
            writeln!(out, "{r},{c},{},{}", z.re, z.im)?;
        }
    }
    Ok(())
}
