//! Reconstruction quality metrics.
//!
//! Every metric accumulates its per-element terms in f64, sorts them with a
//! total order, and only then sums. Reordering the (paired) inputs therefore
//! permutes the term list but not the sorted sequence, so metric values are
//! bit-identical under any spatial rearrangement — the property the patch
//! shuffle experiment relies on.

use crate::data::HsiCube;
use crate::error::{Error, Result};

/// Denominator clamp for the relative error.
pub const MRAE_EPS: f64 = 1e-6;
/// Peak signal value of the `[0, 1]` data range.
pub const PSNR_PEAK: f64 = 1.0;

fn check_pair(pred: &HsiCube, truth: &HsiCube) -> Result<()> {
    if !pred.same_shape(truth) {
        return Err(Error::Dim(format!(
            "metric inputs {}x{}x{} vs {}x{}x{} differ",
            pred.c, pred.h, pred.w, truth.c, truth.h, truth.w
        )));
    }
    Ok(())
}

/// Order-insensitive sum: sort terms under the IEEE total order first.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Root-mean-square error.
pub fn rmse(pred: &HsiCube, truth: &HsiCube) -> Result<f64> {
    check_pair(pred, truth)?;
    let terms: Vec<f64> = pred
        .data
        .iter()
        .zip(&truth.data)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .collect();
    let n = terms.len() as f64;
    Ok((sorted_sum(terms) / n).sqrt())
}

/// Mean relative absolute error, `|p - t| / max(|t|, 1e-6)`.
pub fn mrae(pred: &HsiCube, truth: &HsiCube) -> Result<f64> {
    check_pair(pred, truth)?;
    let terms: Vec<f64> = pred
        .data
        .iter()
        .zip(&truth.data)
        .map(|(&p, &t)| {
            let denom = (t as f64).abs().max(MRAE_EPS);
            (p as f64 - t as f64).abs() / denom
        })
        .collect();
    let n = terms.len() as f64;
    Ok(sorted_sum(terms) / n)
}

/// Peak signal-to-noise ratio in dB against the unit data range. A perfect
/// reconstruction returns positive infinity.
pub fn psnr(pred: &HsiCube, truth: &HsiCube) -> Result<f64> {
    let r = rmse(pred, truth)?;
    if r == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (PSNR_PEAK / r).log10())
}
