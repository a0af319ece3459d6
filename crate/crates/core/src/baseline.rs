//! Training-free reference remap from gradient-histogram matching.
//!
//! Signed forward-difference histograms of input and target are folded into
//! magnitude histograms. The magnitude transfer `T = F_target^-1 o F_input`
//! is sampled at the input bin edges where the input has mass, anchored at
//! `T(0) = 0` and extended linearly past the last occupied edge. The remap
//! is `sign(d) * T(|d|)`.

use serde::{Deserialize, Serialize};

use crate::error::{LlfError, Result};
use crate::image::Image;
use crate::llf::{llf_fast, LlfConfig};
use crate::metrics::{gradient_counts, HISTOGRAM_BINS};
use crate::remap::{check_monotonic, uniform_grid, RemapCurve, TabulatedRemap, DEFAULT_TABLE_SIZE};

/// Describes the approximation in reports.
pub const METHOD_NOTE: &str = "histogram specification of signed forward-difference \
gradients, folded to a magnitude transfer and odd-symmetrized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub curve: RemapCurve,
    /// Both histograms put all mass in one magnitude bin; the curve is the
    /// identity.
    pub degenerate: bool,
}

/// Magnitude histogram over `[0, 1]` with `bins / 2` bins, pooled over both
/// directions and all images.
fn magnitude_counts(images: &[&Image], bins: usize) -> Result<Vec<f64>> {
    let half = bins / 2;
    let mut m = vec![0.0; half];
    for img in images {
        let (h, v) = gradient_counts(img, bins)?;
        for k in 0..bins {
            let j = if k >= half { k - half } else { half - 1 - k };
            m[j] += (h[k] + v[k]) as f64;
        }
    }
    Ok(m)
}

/// Piecewise-linear CDF sampled at the bin edges `j / n`.
fn cdf(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(counts.len() + 1);
    out.push(0.0);
    for c in counts {
        acc += c;
        out.push(acc / total);
    }
    *out.last_mut().expect("non-empty") = 1.0;
    out
}

/// Smallest magnitude at which the CDF reaches `q`.
fn inverse_cdf(edges_cdf: &[f64], q: f64) -> f64 {
    let n = edges_cdf.len() - 1;
    let width = 1.0 / n as f64;
    let j = edges_cdf.partition_point(|&f| f < q);
    if j == 0 {
        return 0.0;
    }
    let j = j.min(n);
    let (lo, hi) = (edges_cdf[j - 1], edges_cdf[j]);
    let t = if hi > lo { (q - lo) / (hi - lo) } else { 1.0 };
    (j - 1) as f64 * width + t * width
}

/// Monotone magnitude transfer knots starting at `(0, 0)`.
fn transfer_knots(input: &[f64], target: &[f64]) -> Vec<(f64, f64)> {
    let f_in = cdf(input);
    let f_tgt = cdf(target);
    let n = input.len();
    let mut knots = vec![(0.0, 0.0)];
    for j in 1..=n {
        if input[j - 1] == 0.0 {
            continue;
        }
        let m = j as f64 / n as f64;
        let t = inverse_cdf(&f_tgt, f_in[j]);
        let prev = knots.last().expect("anchored").1;
        knots.push((m, t.max(prev)));
        if f_in[j] >= 1.0 {
            break;
        }
    }
    knots
}

fn eval_knots(knots: &[(f64, f64)], m: f64) -> f64 {
    let &(last_m, last_t) = knots.last().expect("anchored");
    if m >= last_m {
        return if last_m > 0.0 { m * last_t / last_m } else { m };
    }
    let i = knots.partition_point(|&(k, _)| k <= m);
    let (m0, t0) = knots[i - 1];
    let (m1, t1) = knots[i];
    t0 + (t1 - t0) * (m - m0) / (m1 - m0)
}

/// Fit on pooled gradient statistics of several input/target pairs.
pub fn fit_gradient_remap_pairs(pairs: &[(&Image, &Image)], bins: usize) -> Result<BaselineFit> {
    if pairs.is_empty() {
        return Err(LlfError::EmptyDataset);
    }
    if bins < 2 || !bins.is_multiple_of(2) {
        return Err(LlfError::InvalidParameter(format!(
            "histogram bins must be even and at least 2, got {bins}"
        )));
    }
    let inputs: Vec<&Image> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<&Image> = pairs.iter().map(|p| p.1).collect();
    let m_in = magnitude_counts(&inputs, bins)?;
    let m_tgt = magnitude_counts(&targets, bins)?;
    let occupied = |m: &[f64]| m.iter().filter(|&&c| c > 0.0).count();
    if occupied(&m_in) <= 1 && occupied(&m_tgt) <= 1 {
        log::warn!("degenerate gradient histograms; using the identity remap");
        return Ok(BaselineFit {
            curve: RemapCurve::identity(DEFAULT_TABLE_SIZE),
            degenerate: true,
        });
    }
    let knots = transfer_knots(&m_in, &m_tgt);
    let values = uniform_grid(DEFAULT_TABLE_SIZE)
        .into_iter()
        .map(|d| d.signum() * eval_knots(&knots, d.abs()))
        .collect();
    let curve = RemapCurve::from_values(values)?;
    assert!(
        check_monotonic(&curve).is_monotonic,
        "histogram transfer must be non-decreasing"
    );
    Ok(BaselineFit {
        curve,
        degenerate: false,
    })
}

pub fn fit_gradient_remap(input: &Image, target: &Image, bins: usize) -> Result<BaselineFit> {
    input.check_same_shape(target)?;
    fit_gradient_remap_pairs(&[(input, target)], bins)
}

pub fn fit_default(input: &Image, target: &Image) -> Result<BaselineFit> {
    fit_gradient_remap(input, target, HISTOGRAM_BINS)
}

/// The filter with the fitted curve; no affine layer.
pub fn apply_baseline(img: &Image, curve: &RemapCurve, cfg: &LlfConfig) -> Result<Image> {
    llf_fast(img, &TabulatedRemap::from_curve(curve), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::synth_phantom;
    use crate::metrics::forward_differences;

    const BIN_WIDTH: f64 = 2.0 / 256.0;

    /// Rank-matched gradient magnitudes of two same-size images.
    fn rank_matched(input: &Image, target: &Image) -> Vec<(f64, f64)> {
        let mags = |img: &Image| {
            let (dx, dy) = forward_differences(img).unwrap();
            let mut v: Vec<f64> = dx.into_iter().chain(dy).map(f64::abs).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        mags(input).into_iter().zip(mags(target)).collect()
    }

    #[test]
    fn identical_images_give_identity() {
        let img = synth_phantom(7, 64, 64).unwrap();
        let fit = fit_default(&img, &img).unwrap();
        assert!(!fit.degenerate);
        for (d, v) in fit.curve.grid.iter().zip(&fit.curve.values) {
            assert!((d - v).abs() <= BIN_WIDTH, "{d} -> {v}");
        }
    }

    #[test]
    fn stretched_gradients_double_the_slope() {
        let img = synth_phantom(3, 64, 64).unwrap();
        let stretched = img.map(|v| 2.0 * v - 0.5);
        let fit = fit_default(&img, &stretched).unwrap();
        let (dx, dy) = forward_differences(&img).unwrap();
        let max_grad = dx.iter().chain(&dy).fold(0.0f64, |a, b| a.max(b.abs()));
        for (d, v) in fit.curve.grid.iter().zip(&fit.curve.values) {
            if d.abs() <= max_grad {
                assert!((v - 2.0 * d).abs() <= BIN_WIDTH, "{d} -> {v}");
            }
        }
        let table = TabulatedRemap::from_curve(&fit.curve);
        for (a, b) in rank_matched(&img, &stretched).into_iter().step_by(37) {
            let v = crate::remap::Remap::eval(&table, a);
            assert!((v - b).abs() <= BIN_WIDTH, "{a}: {v} vs oracle {b}");
        }
    }

    #[test]
    fn curve_is_monotonic_and_odd() {
        let a = synth_phantom(1, 48, 48).unwrap();
        let b = synth_phantom(2, 48, 48).unwrap();
        let fit = fit_default(&a, &b).unwrap();
        assert!(check_monotonic(&fit.curve).is_monotonic);
        let n = fit.curve.values.len();
        for k in 0..n {
            assert!((fit.curve.values[k] + fit.curve.values[n - 1 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_histograms_fall_back_to_identity() {
        let c = Image::filled(16, 16, 0.5);
        let fit = fit_default(&c, &c).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.curve, RemapCurve::identity(DEFAULT_TABLE_SIZE));
    }

    #[test]
    fn identity_curve_application() {
        let img = synth_phantom(4, 32, 32).unwrap();
        let out = apply_baseline(
            &img,
            &RemapCurve::identity(DEFAULT_TABLE_SIZE),
            &LlfConfig::default(),
        )
        .unwrap();
        assert!(out.max_abs_diff(&img) <= 1e-12);
    }

    #[test]
    fn non_monotonic_curve_still_applies() {
        let img = synth_phantom(5, 32, 32).unwrap();
        let mut values = uniform_grid(DEFAULT_TABLE_SIZE);
        values[600] -= 0.3;
        let curve = RemapCurve::from_values(values).unwrap();
        assert!(!check_monotonic(&curve).is_monotonic);
        assert!(apply_baseline(&img, &curve, &LlfConfig::default()).is_ok());
    }
}
