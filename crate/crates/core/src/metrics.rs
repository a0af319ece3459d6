//! MSE, SSIM (map, mean, analytic gradient) and gradient histograms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LlfError, Result};
use crate::image::Image;
use crate::pyramid::{apply_separable, apply_separable_t, Resample1d};

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a`.
pub fn mse_backward(a: &Image, b: &Image) -> Result<Image> {
    let scale = 2.0 / a.len() as f64;
    a.zip_map(b, |x, y| scale * (x - y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

struct Window {
    x: Resample1d,
    y: Resample1d,
}

impl Window {
    fn new(a: &Image, b: &Image, p: &SsimParams) -> Result<Self> {
        a.check_same_shape(b)?;
        if a.width() < p.window || a.height() < p.window {
            return Err(LlfError::TooSmall {
                width: a.width(),
                height: a.height(),
                reason: format!("SSIM needs at least {0}x{0} pixels", p.window),
            });
        }
        let k = p.kernel();
        Ok(Self {
            x: Resample1d::convolution(a.width(), &k),
            y: Resample1d::convolution(a.height(), &k),
        })
    }

    fn blur(&self, img: &Image) -> Image {
        apply_separable(img, &self.x, &self.y)
    }

    fn blur_t(&self, img: &Image) -> Image {
        apply_separable_t(img, &self.x, &self.y)
    }
}

/// Local statistics at one pixel: means, second moments.
struct Moments {
    mu_a: Image,
    mu_b: Image,
    e_aa: Image,
    e_bb: Image,
    e_ab: Image,
}

fn moments(w: &Window, a: &Image, b: &Image) -> Moments {
    let prod = |f: fn(f64, f64) -> f64| a.zip_map(b, f).expect("same shape");
    Moments {
        mu_a: w.blur(a),
        mu_b: w.blur(b),
        e_aa: w.blur(&a.map(|v| v * v)),
        e_bb: w.blur(&b.map(|v| v * v)),
        e_ab: w.blur(&prod(|x, y| x * y)),
    }
}

/// Numerator and denominator factors of the SSIM formula.
#[derive(Clone, Copy)]
struct Terms {
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
}

impl Terms {
    fn at(m: &Moments, i: usize, c1: f64, c2: f64) -> Self {
        let (ma, mb) = (m.mu_a.data()[i], m.mu_b.data()[i]);
        let var_a = m.e_aa.data()[i] - ma * ma;
        let var_b = m.e_bb.data()[i] - mb * mb;
        let cov = m.e_ab.data()[i] - ma * mb;
        Self {
            a1: 2.0 * ma * mb + c1,
            a2: 2.0 * cov + c2,
            b1: ma * ma + mb * mb + c1,
            b2: var_a + var_b + c2,
        }
    }

    fn ssim(&self) -> f64 {
        (self.a1 * self.a2) / (self.b1 * self.b2)
    }
}

pub fn ssim_map(a: &Image, b: &Image, p: &SsimParams) -> Result<Image> {
    let w = Window::new(a, b, p)?;
    let m = moments(&w, a, b);
    let (c1, c2) = (p.c1(), p.c2());
    let data = (0..a.len())
        .map(|i| Terms::at(&m, i, c1, c2).ssim())
        .collect();
    Image::new(a.width(), a.height(), data)
}

pub fn mssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    let map = ssim_map(a, b, p)?;
    Ok(map.sum() / map.len() as f64)
}

/// `upstream * d mssim(a, b) / d a`.
pub fn mssim_backward(a: &Image, b: &Image, p: &SsimParams, upstream: f64) -> Result<Image> {
    let w = Window::new(a, b, p)?;
    let m = moments(&w, a, b);
    let (c1, c2) = (p.c1(), p.c2());
    let n = a.len();
    let scale = upstream / n as f64;
    let mut d_mu = vec![0.0; n];
    let mut d_eaa = vec![0.0; n];
    let mut d_eab = vec![0.0; n];
    for i in 0..n {
        let t = Terms::at(&m, i, c1, c2);
        let (ma, mb) = (m.mu_a.data()[i], m.mu_b.data()[i]);
        let num = t.a1 * t.a2;
        let den = t.b1 * t.b2;
        // partials of the factors with respect to the local mean of `a`
        let d_num = 2.0 * mb * t.a2 - 2.0 * mb * t.a1;
        let d_den = 2.0 * ma * t.b2 - 2.0 * ma * t.b1;
        d_mu[i] = scale * (d_num * den - num * d_den) / (den * den);
        d_eaa[i] = -scale * num / (t.b1 * t.b2 * t.b2);
        d_eab[i] = scale * 2.0 * t.a1 / den;
    }
    let (wd, hd) = (a.width(), a.height());
    let g_mu = w.blur_t(&Image::new(wd, hd, d_mu)?);
    let g_eaa = w.blur_t(&Image::new(wd, hd, d_eaa)?);
    let g_eab = w.blur_t(&Image::new(wd, hd, d_eab)?);
    let data = (0..n)
        .map(|i| {
            g_mu.data()[i] + 2.0 * a.data()[i] * g_eaa.data()[i] + b.data()[i] * g_eab.data()[i]
        })
        .collect();
    Image::new(wd, hd, data)
}

pub const HISTOGRAM_BINS: usize = 256;

/// Normalized histograms of signed forward differences over `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientHistogram {
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
}

/// Bin of a signed difference; values outside `[-1, 1]` land in the end bins.
pub fn gradient_bin(d: f64, bins: usize) -> usize {
    let pos = ((d + 1.0) * 0.5 * bins as f64).floor();
    pos.clamp(0.0, (bins - 1) as f64) as usize
}

pub fn bin_centers(bins: usize) -> Vec<f64> {
    let width = 2.0 / bins as f64;
    (0..bins).map(|k| -1.0 + (k as f64 + 0.5) * width).collect()
}

fn check_gradient_size(img: &Image) -> Result<()> {
    if img.width() < 2 || img.height() < 2 {
        return Err(LlfError::TooSmall {
            width: img.width(),
            height: img.height(),
            reason: "gradient histograms need at least 2x2 pixels".into(),
        });
    }
    Ok(())
}

/// Horizontal then vertical forward differences.
pub fn forward_differences(img: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
    check_gradient_size(img)?;
    let (w, h) = (img.width(), img.height());
    let mut dx = Vec::with_capacity((w - 1) * h);
    let mut dy = Vec::with_capacity(w * (h - 1));
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                dx.push(img.get(x + 1, y) - img.get(x, y));
            }
            if y + 1 < h {
                dy.push(img.get(x, y + 1) - img.get(x, y));
            }
        }
    }
    Ok((dx, dy))
}

pub fn gradient_counts(img: &Image, bins: usize) -> Result<(Vec<u64>, Vec<u64>)> {
    let (dx, dy) = forward_differences(img)?;
    let count = |ds: &[f64]| {
        let mut c = vec![0u64; bins];
        for &d in ds {
            c[gradient_bin(d, bins)] += 1;
        }
        c
    };
    Ok((count(&dx), count(&dy)))
}

pub fn gradient_histogram(img: &Image) -> Result<GradientHistogram> {
    let (h, v) = gradient_counts(img, HISTOGRAM_BINS)?;
    let normalize = |c: Vec<u64>| {
        let total: u64 = c.iter().sum();
        c.into_iter().map(|n| n as f64 / total as f64).collect()
    };
    Ok(GradientHistogram {
        horizontal: normalize(h),
        vertical: normalize(v),
    })
}

impl GradientHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_center,h_count,v_count\n");
        for ((c, h), v) in bin_centers(self.horizontal.len())
            .iter()
            .zip(&self.horizontal)
            .zip(&self.vertical)
        {
            let _ = writeln!(s, "{c},{h},{v}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| LlfError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::synth_phantom;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0))
    }

    /// Direct windowed statistics around one pixel.
    fn ssim_at_oracle(a: &Image, b: &Image, x: usize, y: usize) -> f64 {
        let p = SsimParams::default();
        let sigma: f64 = 1.5;
        let mut weights = Vec::new();
        for dy in -5isize..=5 {
            for dx in -5isize..=5 {
                let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                weights.push((dx, dy, w));
            }
        }
        let total: f64 = weights.iter().map(|t| t.2).sum();
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(dx, dy, w) in &weights {
            let xx = crate::pyramid::reflect101(x as isize + dx, a.width());
            let yy = crate::pyramid::reflect101(y as isize + dy, a.height());
            let (va, vb) = (a.get(xx, yy), b.get(xx, yy));
            let w = w / total;
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
        }
        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        ((2.0 * ma * mb + p.c1()) * (2.0 * cov + p.c2()))
            / ((ma * ma + mb * mb + p.c1()) * (va + vb + p.c2()))
    }

    #[test]
    fn mse_examples() {
        let a = random_image(1, 8, 8);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        let c = random_image(2, 8, 8);
        let mut direct = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                direct += (a.get(x, y) - c.get(x, y)).powi(2);
            }
        }
        assert!((mse(&a, &c).unwrap() - direct / 64.0).abs() < 1e-15);
        assert!(mse(&a, &random_image(2, 8, 9)).is_err());
    }

    #[test]
    fn window_sums_to_one() {
        let k = SsimParams::default().kernel();
        let total: f64 = k.iter().flat_map(|a| k.iter().map(move |b| a * b)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_self_and_inverted() {
        let p = SsimParams::default();
        let a = random_image(3, 20, 17);
        let map = ssim_map(&a, &a, &p).unwrap();
        assert!(map.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let c = Image::filled(12, 12, 0.4);
        assert!((mssim(&c, &c, &p).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim_map(&a, &inv, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v < 1.0));
        assert!(ssim_map(&Image::zeros(10, 12), &Image::zeros(10, 12), &p).is_err());
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let p = SsimParams::default();
        let a = random_image(4, 16, 16);
        let b = random_image(5, 16, 16);
        let map = ssim_map(&a, &b, &p).unwrap();
        assert!((map.get(8, 8) - ssim_at_oracle(&a, &b, 8, 8)).abs() < 1e-10);
        let mut mean = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                let o = ssim_at_oracle(&a, &b, x, y);
                assert!((map.get(x, y) - o).abs() < 1e-10);
                mean += o;
            }
        }
        assert!((mssim(&a, &b, &p).unwrap() - mean / 256.0).abs() < 1e-10);
    }

    #[test]
    fn mssim_gradient_matches_finite_differences() {
        let p = SsimParams::default();
        let a = random_image(6, 16, 16);
        let b = random_image(7, 16, 16);
        let g = mssim_backward(&a, &b, &p, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        for _ in 0..20 {
            let (x, y) = (rng.gen_range(0..16), rng.gen_range(0..16));
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.set(x, y, a.get(x, y) + h);
            am.set(x, y, a.get(x, y) - h);
            let fd = (mssim(&ap, &b, &p).unwrap() - mssim(&am, &b, &p).unwrap()) / (2.0 * h);
            let an = g.get(x, y);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            assert!(rel <= 1e-5, "({x},{y}): {fd} vs {an}");
        }
    }

    #[test]
    fn mssim_gradient_trivial_cases() {
        let p = SsimParams::default();
        let a = random_image(9, 14, 14);
        let at_max = mssim_backward(&a, &a, &p, 1.0).unwrap();
        assert!(at_max.data().iter().all(|v| v.abs() < 1e-12));
        let b = random_image(10, 14, 14);
        let zero = mssim_backward(&a, &b, &p, 0.0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_affine_change_keeps_mssim_high() {
        let img = synth_phantom(7, 64, 64).unwrap();
        let changed = img.map(|v| 1.02 * v + 0.01);
        assert!(mssim(&img, &changed, &SsimParams::default()).unwrap() >= 0.99);
    }

    #[test]
    fn histogram_examples() {
        let c = gradient_histogram(&Image::filled(5, 4, 0.3)).unwrap();
        let zero = gradient_bin(0.0, HISTOGRAM_BINS);
        assert_eq!(c.horizontal[zero], 1.0);
        assert_eq!(c.vertical[zero], 1.0);

        let w = 9;
        let ramp = Image::from_fn(w, 6, |x, _| x as f64 / (w - 1) as f64);
        let h = gradient_histogram(&ramp).unwrap();
        assert_eq!(h.horizontal.iter().filter(|&&m| m > 0.0).count(), 1);
        assert!((h.horizontal.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert!(gradient_histogram(&Image::filled(1, 5, 0.0)).is_err());
    }

    #[test]
    fn histogram_matches_binning_oracle() {
        let img = random_image(11, 8, 8);
        let hist = gradient_histogram(&img).unwrap();
        let mut hc = [0.0; HISTOGRAM_BINS];
        let mut vc = [0.0; HISTOGRAM_BINS];
        let width = 2.0 / HISTOGRAM_BINS as f64;
        let bin = |d: f64| {
            let mut k = 0;
            while k + 1 < HISTOGRAM_BINS && d >= -1.0 + (k + 1) as f64 * width {
                k += 1;
            }
            k
        };
        for y in 0..8 {
            for x in 0..8 {
                if x < 7 {
                    hc[bin(img.get(x + 1, y) - img.get(x, y))] += 1.0 / 56.0;
                }
                if y < 7 {
                    vc[bin(img.get(x, y + 1) - img.get(x, y))] += 1.0 / 56.0;
                }
            }
        }
        for k in 0..HISTOGRAM_BINS {
            assert!((hist.horizontal[k] - hc[k]).abs() < 1e-12);
            assert!((hist.vertical[k] - vc[k]).abs() < 1e-12);
        }
        let csv = hist.to_csv();
        assert!(csv.starts_with("bin_center,h_count,v_count\n"));
        assert_eq!(csv.lines().count(), HISTOGRAM_BINS + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let p = SsimParams::default();
            let a = random_image(s1, 12, 13);
            let b = random_image(s2 + 1000, 12, 13);
            let ab = mssim(&a, &b, &p).unwrap();
            let ba = mssim(&b, &a, &p).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            for &v in ssim_map(&a, &b, &p).unwrap().data() {
                prop_assert!((-1.0..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn mse_translation_invariant(s in 0u64..1000, c in -0.5f64..0.5) {
            let a = random_image(s, 6, 5);
            let b = random_image(s + 1, 6, 5);
            let shifted = mse(&a.map(|v| v + c), &b.map(|v| v + c)).unwrap();
            prop_assert!((shifted - mse(&a, &b).unwrap()).abs() <= 1e-15);
        }
    }
}
