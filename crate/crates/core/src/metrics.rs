//! Scoring of channel estimates against the ground truth.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::CMat;

/// `sum ||H_hat - H||_F^2 / sum ||H||_F^2` over all `[user][k]` pairs.
pub fn nmse(estimates: &[Vec<CMat>], truth: &[Vec<CMat>]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated users vs {} true users",
            estimates.len(),
            truth.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (u, (est, h)) in estimates.iter().zip(truth).enumerate() {
        if est.len() != h.len() {
            return Err(Error::DimensionMismatch(format!(
                "user {u}: {} estimated subcarriers vs {}",
                est.len(),
                h.len()
            )));
        }
        for (e, t) in est.iter().zip(h) {
            if e.shape() != t.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "user {u}: estimate {:?} vs channel {:?}",
                    e.shape(),
                    t.shape()
                )));
            }
            num += (e - t).norm_squared();
            den += t.norm_squared();
        }
    }
    Ok(num / den)
}

/// Rate of one link when the beamformers come from `estimate`.
///
/// The receive and transmit beamformers are the `streams` dominant left and
/// right singular vectors of `estimate`. Applied to the true channel they give
/// `H_eff = U^H H V`, and the rate is `log2 det(I + rho/streams * H_eff H_eff^H)`.
pub fn link_rate(estimate: &CMat, truth: &CMat, streams: usize, rho: f64) -> f64 {
    let svd = estimate.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let streams = streams.min(order.len());
    let us = CMat::from_fn(u.nrows(), streams, |r, c| u[(r, order[c])]);
    let vs = CMat::from_fn(v_t.ncols(), streams, |r, c| v_t[(order[c], r)].conj());
    let h_eff = us.adjoint() * truth * vs;
    let gram = CMat::identity(streams, streams)
        + &h_eff * h_eff.adjoint() * Complex64::new(rho / streams as f64, 0.0);
    gram.determinant().re.max(f64::MIN_POSITIVE).log2()
}

/// Spectral efficiency in bit/s/Hz: link rate averaged over subcarriers and
/// summed over users, with `min(N_R, L)` streams at linear SNR `10^(snr_db/10)`.
pub fn spectral_efficiency(
    estimates: &[Vec<CMat>],
    truth: &[Vec<CMat>],
    streams: usize,
    snr_db: f64,
) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::DimensionMismatch("user count differs".into()));
    }
    let rho = 10f64.powf(snr_db / 10.0);
    let mut total = 0.0;
    for (est, h) in estimates.iter().zip(truth) {
        if est.len() != h.len() || est.is_empty() {
            return Err(Error::DimensionMismatch("subcarrier count differs".into()));
        }
        let sum: f64 = est.iter().zip(h).map(|(e, t)| link_rate(e, t, streams, rho)).sum();
        total += sum / est.len() as f64;
    }
    Ok(total)
}
