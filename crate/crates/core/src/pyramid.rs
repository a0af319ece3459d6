//! Gaussian and Laplacian pyramids (Burt–Adelson, 5-tap binomial kernel,
//! reflect-101 borders) together with their exact adjoints.
//!
//! Every resampling step is a separable sparse linear operator. The
//! operators for one image size are built once in a [`PyramidGeometry`] and
//! reused by the forward pass, the transposed (backward) pass, and the
//! per-coefficient functionals of the naive filter.

use serde::{Deserialize, Serialize};

use crate::error::{LlfError, Result};
use crate::image::Image;

/// Normalized binomial kernel `[1, 4, 6, 4, 1] / 16`.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror an index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Number of pyramid levels, either fixed or derived from the image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NumLevels {
    #[default]
    Auto,
    Fixed(usize),
}

impl NumLevels {
    /// `floor(log2(min(w, h))) - 1`, at least 2 for images of 16 px or more.
    pub fn resolve(self, width: usize, height: usize) -> usize {
        match self {
            NumLevels::Fixed(n) => n,
            NumLevels::Auto => {
                let m = width.min(height).max(1);
                let lg = usize::BITS as usize - 1 - m.leading_zeros() as usize;
                let n = lg.saturating_sub(1);
                if m >= 16 {
                    n.max(2)
                } else {
                    n.max(1)
                }
            }
        }
    }
}

/// Sparse 1-D linear map `out[i] = sum_j w_ij * in[j]` stored row-wise.
#[derive(Debug, Clone)]
pub struct Resample1d {
    n_in: usize,
    n_out: usize,
    offsets: Vec<usize>,
    taps: Vec<(usize, f64)>,
    /// Rows padded with zero weights to `max_taps` entries each.
    max_taps: usize,
    padded_index: Vec<usize>,
    padded_weight: Vec<f64>,
}

impl Resample1d {
    fn from_rows(n_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n_out = rows.len();
        let mut offsets = Vec::with_capacity(n_out + 1);
        let mut taps = Vec::new();
        offsets.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            // merge indices hit twice by the border reflection
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (j, w) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == j => last.1 += w,
                    _ => merged.push((j, w)),
                }
            }
            taps.extend(merged);
            offsets.push(taps.len());
        }
        let max_taps = offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
        let mut padded_index = Vec::with_capacity(n_out * max_taps);
        let mut padded_weight = Vec::with_capacity(n_out * max_taps);
        for i in 0..n_out {
            let row = &taps[offsets[i]..offsets[i + 1]];
            for t in 0..max_taps {
                let (j, w) = row.get(t).copied().unwrap_or((row[0].0, 0.0));
                padded_index.push(j);
                padded_weight.push(w);
            }
        }
        Self {
            n_in,
            n_out,
            offsets,
            taps,
            max_taps,
            padded_index,
            padded_weight,
        }
    }

    fn apply_x_fixed<const T: usize>(&self, src: &[f64], h: usize) -> Vec<f64> {
        let (wi, wo) = (self.n_in, self.n_out);
        let mut out = vec![0.0; wo * h];
        let idx = &self.padded_index;
        let wts = &self.padded_weight;
        for (src_row, out_row) in src.chunks_exact(wi).zip(out.chunks_exact_mut(wo)) {
            for (o, (ix, ws)) in out_row
                .iter_mut()
                .zip(idx.chunks_exact(T).zip(wts.chunks_exact(T)))
            {
                let mut acc = 0.0;
                for t in 0..T {
                    acc += ws[t] * src_row[ix[t]];
                }
                *o = acc;
            }
        }
        out
    }

    /// Blur with [`BINOMIAL5`] and keep even samples: `n -> ceil(n / 2)`.
    pub fn downsample(n_fine: usize) -> Self {
        let n_coarse = n_fine.div_ceil(2);
        let rows = (0..n_coarse)
            .map(|i| {
                BINOMIAL5
                    .iter()
                    .enumerate()
                    .map(|(t, &w)| (reflect101(2 * i as isize + t as isize - 2, n_fine), w))
                    .collect()
            })
            .collect();
        Self::from_rows(n_fine, rows)
    }

    /// Zero-insertion to `n_fine` samples followed by the kernel scaled by 2.
    pub fn upsample(n_coarse: usize, n_fine: usize) -> Self {
        debug_assert_eq!(n_fine.div_ceil(2), n_coarse);
        let rows = (0..n_fine)
            .map(|i| {
                BINOMIAL5
                    .iter()
                    .enumerate()
                    .filter_map(|(t, &w)| {
                        let m = reflect101(i as isize + t as isize - 2, n_fine);
                        m.is_multiple_of(2).then_some((m / 2, 2.0 * w))
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(n_coarse, rows)
    }

    /// Centered odd-length convolution with reflect-101 borders, `n -> n`.
    pub fn convolution(n: usize, kernel: &[f64]) -> Self {
        assert!(kernel.len() % 2 == 1, "kernel length must be odd");
        let r = (kernel.len() / 2) as isize;
        let rows = (0..n)
            .map(|i| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(t, &w)| (reflect101(i as isize + t as isize - r, n), w))
                    .collect()
            })
            .collect();
        Self::from_rows(n, rows)
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.taps[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Dense `n_out x n_in` matrix, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_out * self.n_in];
        for i in 0..self.n_out {
            for &(j, w) in self.row(i) {
                m[i * self.n_in + j] += w;
            }
        }
        m
    }

    /// Apply along x to every row of a `w x h` buffer.
    fn apply_x(&self, src: &[f64], h: usize) -> Vec<f64> {
        match self.max_taps {
            3 => return self.apply_x_fixed::<3>(src, h),
            5 => return self.apply_x_fixed::<5>(src, h),
            _ => {}
        }
        let (wi, wo) = (self.n_in, self.n_out);
        let mut out = vec![0.0; wo * h];
        for (src_row, out_row) in src.chunks_exact(wi).zip(out.chunks_exact_mut(wo)) {
            for (i, o) in out_row.iter_mut().enumerate() {
                *o = self.row(i).iter().map(|&(j, w)| w * src_row[j]).sum();
            }
        }
        out
    }

    /// Apply along y to every column of a `w x h` buffer.
    fn apply_y(&self, src: &[f64], w: usize) -> Vec<f64> {
        let mut out = vec![0.0; w * self.n_out];
        for (i, out_row) in out.chunks_exact_mut(w).enumerate() {
            for &(j, wt) in self.row(i) {
                let src_row = &src[j * w..(j + 1) * w];
                for (o, &s) in out_row.iter_mut().zip(src_row) {
                    *o += wt * s;
                }
            }
        }
        out
    }

    /// Transposed application along x.
    fn apply_x_t(&self, src: &[f64], h: usize) -> Vec<f64> {
        let (wi, wo) = (self.n_in, self.n_out);
        let mut out = vec![0.0; wi * h];
        for (src_row, out_row) in src.chunks_exact(wo).zip(out.chunks_exact_mut(wi)) {
            for (i, &g) in src_row.iter().enumerate() {
                for &(j, w) in self.row(i) {
                    out_row[j] += w * g;
                }
            }
        }
        out
    }

    /// Transposed application along y.
    fn apply_y_t(&self, src: &[f64], w: usize) -> Vec<f64> {
        let mut out = vec![0.0; w * self.n_in];
        for i in 0..self.n_out {
            let src_row = &src[i * w..(i + 1) * w];
            for &(j, wt) in self.row(i) {
                let out_row = &mut out[j * w..(j + 1) * w];
                for (o, &s) in out_row.iter_mut().zip(src_row) {
                    *o += wt * s;
                }
            }
        }
        out
    }
}

/// Separable application `Ay * X * Ax^T`.
pub fn apply_separable(img: &Image, ax: &Resample1d, ay: &Resample1d) -> Image {
    assert_eq!(img.width(), ax.n_in());
    assert_eq!(img.height(), ay.n_in());
    let tmp = ax.apply_x(img.data(), img.height());
    let out = ay.apply_y(&tmp, ax.n_out());
    Image::new(ax.n_out(), ay.n_out(), out).expect("separable output shape")
}

/// Adjoint of [`apply_separable`]: `Ay^T * G * Ax`.
pub fn apply_separable_t(grad: &Image, ax: &Resample1d, ay: &Resample1d) -> Image {
    assert_eq!(grad.width(), ax.n_out());
    assert_eq!(grad.height(), ay.n_out());
    let tmp = ay.apply_y_t(grad.data(), ax.n_out());
    let out = ax.apply_x_t(&tmp, ay.n_in());
    Image::new(ax.n_in(), ay.n_in(), out).expect("separable adjoint shape")
}

/// Level sizes and resampling operators for one input size and level count.
#[derive(Debug, Clone)]
pub struct PyramidGeometry {
    sizes: Vec<(usize, usize)>,
    down: Vec<(Resample1d, Resample1d)>,
    up: Vec<(Resample1d, Resample1d)>,
}

impl PyramidGeometry {
    pub fn new(width: usize, height: usize, num_levels: NumLevels) -> Result<Self> {
        let n = num_levels.resolve(width, height);
        if n == 0 {
            return Err(LlfError::InvalidParameter(
                "pyramid needs at least one level".into(),
            ));
        }
        let mut sizes = vec![(width, height)];
        for _ in 1..n {
            let &(w, h) = sizes.last().unwrap();
            if w < 2 || h < 2 {
                return Err(LlfError::TooSmall {
                    width,
                    height,
                    reason: format!("cannot build {n} pyramid levels"),
                });
            }
            sizes.push((w.div_ceil(2), h.div_ceil(2)));
        }
        let down = sizes
            .windows(2)
            .map(|s| {
                (
                    Resample1d::downsample(s[0].0),
                    Resample1d::downsample(s[0].1),
                )
            })
            .collect();
        let up = sizes
            .windows(2)
            .map(|s| {
                (
                    Resample1d::upsample(s[1].0, s[0].0),
                    Resample1d::upsample(s[1].1, s[0].1),
                )
            })
            .collect();
        Ok(Self { sizes, down, up })
    }

    pub fn for_image(img: &Image, num_levels: NumLevels) -> Result<Self> {
        Self::new(img.width(), img.height(), num_levels)
    }

    pub fn num_levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self, level: usize) -> (usize, usize) {
        self.sizes[level]
    }

    pub fn sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }

    /// Downsampling operators from `level` to `level + 1` (x, y).
    pub fn down(&self, level: usize) -> (&Resample1d, &Resample1d) {
        let (x, y) = &self.down[level];
        (x, y)
    }

    /// Upsampling operators from `level + 1` to `level` (x, y).
    pub fn up(&self, level: usize) -> (&Resample1d, &Resample1d) {
        let (x, y) = &self.up[level];
        (x, y)
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        let (w, h) = self.sizes[0];
        if img.width() != w || img.height() != h {
            return Err(LlfError::DimensionMismatch(w, h, img.width(), img.height()));
        }
        Ok(())
    }

    pub fn downsample(&self, level: usize, img: &Image) -> Image {
        let (ax, ay) = self.down(level);
        apply_separable(img, ax, ay)
    }

    pub fn upsample(&self, level: usize, img: &Image) -> Image {
        let (ax, ay) = self.up(level);
        apply_separable(img, ax, ay)
    }

    pub fn gaussian(&self, img: &Image) -> Result<GaussianPyramid> {
        self.check_input(img)?;
        let mut levels = Vec::with_capacity(self.num_levels());
        levels.push(img.clone());
        for l in 0..self.num_levels() - 1 {
            let next = self.downsample(l, &levels[l]);
            levels.push(next);
        }
        Ok(GaussianPyramid { levels })
    }

    pub fn laplacian(&self, img: &Image) -> Result<LaplacianPyramid> {
        let g = self.gaussian(img)?;
        Ok(self.laplacian_from_gaussian(g))
    }

    pub fn laplacian_from_gaussian(&self, g: GaussianPyramid) -> LaplacianPyramid {
        let mut levels = g.levels;
        let top = levels.len() - 1;
        for l in 0..top {
            let up = self.upsample(l, &levels[l + 1]);
            for (b, u) in levels[l].data_mut().iter_mut().zip(up.data()) {
                *b -= u;
            }
        }
        LaplacianPyramid { bands: levels }
    }

    /// Gradient of a scalar w.r.t. the input image, given its gradient
    /// w.r.t. each Laplacian band (including the residual).
    pub fn laplacian_adjoint(&self, band_grads: &[Image]) -> Image {
        let top = self.num_levels() - 1;
        assert_eq!(band_grads.len(), top + 1);
        // d/dG_l = dband_l - up^T(dband_l) routed to G_{l+1}, plus down^T(dG_{l+1})
        let mut dg = band_grads[top].clone();
        for l in (0..top).rev() {
            let (ux, uy) = self.up(l);
            let from_up = apply_separable_t(&band_grads[l], ux, uy);
            for (d, u) in dg.data_mut().iter_mut().zip(from_up.data()) {
                *d -= u;
            }
            let (dx, dy) = self.down(l);
            let mut below = apply_separable_t(&dg, dx, dy);
            for (d, b) in below.data_mut().iter_mut().zip(band_grads[l].data()) {
                *d += b;
            }
            dg = below;
        }
        dg
    }

    /// Gradient w.r.t. every band of [`LaplacianPyramid::collapse`], given the
    /// gradient w.r.t. the collapsed image.
    pub fn collapse_adjoint(&self, out_grad: &Image) -> Vec<Image> {
        let mut grads = Vec::with_capacity(self.num_levels());
        grads.push(out_grad.clone());
        for l in 0..self.num_levels() - 1 {
            let (ux, uy) = self.up(l);
            let g = apply_separable_t(&grads[l], ux, uy);
            grads.push(g);
        }
        grads
    }
}

/// Level 0 is the input; each further level is blurred and halved.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPyramid {
    pub levels: Vec<Image>,
}

impl GaussianPyramid {
    pub fn top(&self) -> &Image {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Difference bands plus the coarsest Gaussian level as residual.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPyramid {
    pub bands: Vec<Image>,
}

impl LaplacianPyramid {
    pub fn num_levels(&self) -> usize {
        self.bands.len()
    }

    pub fn residual(&self) -> &Image {
        self.bands.last().expect("pyramid has at least one band")
    }

    /// Checks band sizes and returns the matching geometry.
    pub fn geometry(&self) -> Result<PyramidGeometry> {
        let first = self
            .bands
            .first()
            .ok_or_else(|| LlfError::InvalidParameter("empty Laplacian pyramid".into()))?;
        let geom = PyramidGeometry::new(
            first.width(),
            first.height(),
            NumLevels::Fixed(self.bands.len()),
        )?;
        for (b, &(w, h)) in self.bands.iter().zip(geom.sizes()) {
            if b.width() != w || b.height() != h {
                return Err(LlfError::DimensionMismatch(w, h, b.width(), b.height()));
            }
        }
        Ok(geom)
    }

    pub fn collapse(&self) -> Result<Image> {
        let geom = self.geometry()?;
        Ok(self.collapse_with(&geom))
    }

    /// Upsample-and-add from the residual down to level 0.
    pub fn collapse_with(&self, geom: &PyramidGeometry) -> Image {
        let top = self.bands.len() - 1;
        let mut acc = self.bands[top].clone();
        for l in (0..top).rev() {
            let mut up = geom.upsample(l, &acc);
            for (u, b) in up.data_mut().iter_mut().zip(self.bands[l].data()) {
                *u += b;
            }
            acc = up;
        }
        acc
    }
}

pub fn build_gaussian(img: &Image, num_levels: NumLevels) -> Result<GaussianPyramid> {
    PyramidGeometry::for_image(img, num_levels)?.gaussian(img)
}

pub fn build_laplacian(img: &Image, num_levels: NumLevels) -> Result<LaplacianPyramid> {
    PyramidGeometry::for_image(img, num_levels)?.laplacian(img)
}

pub fn collapse(pyr: &LaplacianPyramid) -> Result<Image> {
    pyr.collapse()
}
