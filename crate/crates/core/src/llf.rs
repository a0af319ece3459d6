//! The local Laplacian filter: an exact per-coefficient evaluator and a fast
//! lookup-table evaluator with a reverse-mode tape for the remap table.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LlfError, Result};
use crate::image::Image;
use crate::imageio::{save_image, BitDepth};
use crate::pyramid::{GaussianPyramid, LaplacianPyramid, NumLevels, PyramidGeometry, Resample1d};
use crate::remap::{Remap, TableLocation, TabulatedRemap};

pub const DEFAULT_LUT_LEVELS: usize = 64;

/// Inputs are expected in `[0, 1]`; this much slack is tolerated.
pub const INPUT_SLACK: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlfConfig {
    pub num_levels: NumLevels,
    pub lut_levels: usize,
}

impl Default for LlfConfig {
    fn default() -> Self {
        Self {
            num_levels: NumLevels::Auto,
            lut_levels: DEFAULT_LUT_LEVELS,
        }
    }
}

impl LlfConfig {
    pub fn with_lut_levels(lut_levels: usize) -> Self {
        Self {
            lut_levels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lut_levels < 2 {
            return Err(LlfError::InvalidParameter(format!(
                "lut_levels must be at least 2, got {}",
                self.lut_levels
            )));
        }
        Ok(())
    }

    /// Reference intensities `k / (K - 1)`.
    pub fn lut_samples(&self) -> Vec<f64> {
        let last = (self.lut_levels - 1) as f64;
        (0..self.lut_levels).map(|k| k as f64 / last).collect()
    }
}

fn check_input(img: &Image) -> Result<()> {
    let (lo, hi) = img.min_max();
    if lo < -INPUT_SLACK || hi > 1.0 + INPUT_SLACK || lo.is_nan() || hi.is_nan() {
        return Err(LlfError::InvalidParameter(format!(
            "filter input must lie in [{}, {}], got [{lo}, {hi}]",
            -INPUT_SLACK,
            1.0 + INPUT_SLACK
        )));
    }
    Ok(())
}

/// Row of a composed 1-D operator restricted to its support, paired with the
/// same row of the "down then up" operator: `(index, direct, via_coarser)`.
type SupportRow = Vec<(usize, f64, f64)>;

fn compose(a: &Resample1d, b_rows: &[Vec<(usize, f64)>], n: usize) -> Vec<Vec<(usize, f64)>> {
    (0..a.n_out())
        .map(|i| {
            let mut acc = vec![0.0; n];
            let mut touched = vec![false; n];
            for &(j, w) in a.row(i) {
                for &(k, v) in &b_rows[j] {
                    acc[k] += w * v;
                    touched[k] = true;
                }
            }
            (0..n)
                .filter(|&k| touched[k])
                .map(|k| (k, acc[k]))
                .collect()
        })
        .collect()
}

/// For each level below the top, per output row the weights with which
/// full-resolution samples enter the band coefficient along one axis.
fn band_supports(
    geom: &PyramidGeometry,
    axis_len: impl Fn(usize) -> usize,
    x_axis: bool,
) -> Vec<Vec<SupportRow>> {
    let n0 = axis_len(0);
    let top = geom.num_levels() - 1;
    // reduce[l]: level-0 samples -> level-l samples
    let mut reduce: Vec<Vec<Vec<(usize, f64)>>> = vec![(0..n0).map(|i| vec![(i, 1.0)]).collect()];
    for l in 0..top {
        let (dx, dy) = geom.down(l);
        let d = if x_axis { dx } else { dy };
        let next = compose(d, &reduce[l], n0);
        reduce.push(next);
    }
    (0..top)
        .map(|l| {
            let (ux, uy) = geom.up(l);
            let u = if x_axis { ux } else { uy };
            let via = compose(u, &reduce[l + 1], n0);
            reduce[l]
                .iter()
                .zip(via)
                .map(|(direct, via)| {
                    let mut row: SupportRow = Vec::new();
                    let mut dense = vec![(0.0, 0.0, false); n0];
                    for &(k, w) in direct {
                        dense[k].0 = w;
                        dense[k].2 = true;
                    }
                    for (k, w) in via {
                        dense[k].1 = w;
                        dense[k].2 = true;
                    }
                    for (k, &(a, b, hit)) in dense.iter().enumerate() {
                        if hit {
                            row.push((k, a, b));
                        }
                    }
                    row
                })
                .collect()
        })
        .collect()
}

/// Exact filter: every detail coefficient is evaluated from its own remapped
/// image. Each band coefficient is a separable linear functional of the
/// remapped image, so only the samples inside its support are remapped.
pub fn llf_naive(img: &Image, r: &dyn Remap, cfg: &LlfConfig) -> Result<Image> {
    check_input(img)?;
    let geom = PyramidGeometry::for_image(img, cfg.num_levels)?;
    let gauss = geom.gaussian(img)?;
    let top = geom.num_levels() - 1;
    let rows_y = band_supports(&geom, |l| geom.size(l).1, false);
    let cols_x = band_supports(&geom, |l| geom.size(l).0, true);
    let w0 = img.width();
    let src = img.data();

    let mut bands: Vec<Image> = (0..top)
        .map(|l| {
            let (w, h) = geom.size(l);
            let g = &gauss.levels[l];
            let data: Vec<f64> = (0..h)
                .into_par_iter()
                .flat_map_iter(|i| {
                    let ry = &rows_y[l][i];
                    let cx = &cols_x[l];
                    (0..w).map(move |j| {
                        let gp = g.get(j, i);
                        let mut acc = 0.0;
                        for &(a, py, ey) in ry {
                            let row = &src[a * w0..(a + 1) * w0];
                            let mut inner = 0.0;
                            for &(b, px, ex) in &cx[j] {
                                let remapped = gp + r.eval(row[b] - gp);
                                inner += (py * px - ey * ex) * remapped;
                            }
                            acc += inner;
                        }
                        acc
                    })
                })
                .collect();
            Image::new(w, h, data)
        })
        .collect::<Result<_>>()?;
    bands.push(gauss.top().clone());
    Ok(LaplacianPyramid { bands }.collapse_with(&geom))
}

/// Remapped images `g_k + r(I - g_k)` and their Laplacian pyramids, plus the
/// input's Gaussian pyramid.
#[derive(Debug, Clone)]
pub struct LutBank {
    pub samples: Vec<f64>,
    pub pyramids: Vec<LaplacianPyramid>,
    pub gaussian: GaussianPyramid,
}

impl LutBank {
    pub fn build(img: &Image, r: &dyn Remap, cfg: &LlfConfig) -> Result<(Self, PyramidGeometry)> {
        cfg.validate()?;
        check_input(img)?;
        let geom = PyramidGeometry::for_image(img, cfg.num_levels)?;
        let gaussian = geom.gaussian(img)?;
        let samples = cfg.lut_samples();
        let pyramids = samples
            .par_iter()
            .map(|&g| geom.laplacian(&img.map(|v| g + r.eval(v - g))))
            .collect::<Result<_>>()?;
        Ok((
            Self {
                samples,
                pyramids,
                gaussian,
            },
            geom,
        ))
    }
}

/// Interpolation segment and weight for one coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Blend {
    segment: u32,
    t: f64,
}

fn blend_plan(gaussian: &GaussianPyramid, k: usize) -> Vec<Vec<Blend>> {
    let last = (k - 1) as f64;
    let top = gaussian.levels.len() - 1;
    let mut outside = 0usize;
    let plan = gaussian.levels[..top]
        .iter()
        .map(|level| {
            level
                .data()
                .iter()
                .map(|&g| {
                    if !(0.0..=1.0).contains(&g) {
                        outside += 1;
                    }
                    let pos = g * last;
                    let segment = pos.floor().clamp(0.0, last - 1.0);
                    Blend {
                        segment: segment as u32,
                        t: pos - segment,
                    }
                })
                .collect()
        })
        .collect();
    if outside > 0 {
        log::debug!("{outside} local context values outside [0, 1] use the end LUT intervals");
    }
    plan
}

fn assemble(bank: &LutBank, plan: &[Vec<Blend>], geom: &PyramidGeometry) -> Image {
    let mut bands: Vec<Image> = plan
        .iter()
        .enumerate()
        .map(|(l, blends)| {
            let (w, h) = geom.size(l);
            let data = blends
                .par_iter()
                .enumerate()
                .map(|(p, b)| {
                    let s = b.segment as usize;
                    let lo = bank.pyramids[s].bands[l].data()[p];
                    let hi = bank.pyramids[s + 1].bands[l].data()[p];
                    (1.0 - b.t) * lo + b.t * hi
                })
                .collect();
            Image::new(w, h, data).expect("band shape")
        })
        .collect();
    bands.push(bank.gaussian.top().clone());
    LaplacianPyramid { bands }.collapse_with(geom)
}

/// Fast filter: detail coefficients are interpolated across a bank of
/// `lut_levels` precomputed remapped pyramids.
pub fn llf_fast(img: &Image, r: &dyn Remap, cfg: &LlfConfig) -> Result<Image> {
    let (bank, geom) = LutBank::build(img, r, cfg)?;
    let plan = blend_plan(&bank.gaussian, cfg.lut_levels);
    Ok(assemble(&bank, &plan, &geom))
}

/// As [`llf_fast`], additionally writing the input Gaussian pyramid and the
/// output Laplacian pyramid as 16-bit PGM files into `dir`. Bands are shifted
/// by 0.5 so signed detail stays visible.
pub fn llf_fast_dump(img: &Image, r: &dyn Remap, cfg: &LlfConfig, dir: &Path) -> Result<Image> {
    let (bank, geom) = LutBank::build(img, r, cfg)?;
    let plan = blend_plan(&bank.gaussian, cfg.lut_levels);
    let out = assemble(&bank, &plan, &geom);
    std::fs::create_dir_all(dir).map_err(|e| LlfError::io(dir, e))?;
    for (l, level) in bank.gaussian.levels.iter().enumerate() {
        save_image(
            level,
            &dir.join(format!("gaussian_{l}.pgm")),
            BitDepth::Sixteen,
        )?;
    }
    let out_pyr = geom.laplacian(&out)?;
    let top = out_pyr.num_levels() - 1;
    for (l, band) in out_pyr.bands.iter().enumerate() {
        let shown = if l == top {
            band.clone()
        } else {
            band.map(|v| v + 0.5)
        };
        save_image(
            &shown,
            &dir.join(format!("laplacian_{l}.pgm")),
            BitDepth::Sixteen,
        )?;
    }
    Ok(out)
}

/// Everything the reverse pass needs: per coefficient its blend, per LUT
/// level the table location of every remapped pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    geom: PyramidGeometryHandle,
    table_len: usize,
    plan: Vec<Vec<Blend>>,
    locations: Vec<Vec<TableLocation>>,
}

/// Geometry kept by the tape; compared by its sizes.
#[derive(Debug, Clone)]
struct PyramidGeometryHandle(PyramidGeometry);

impl PartialEq for PyramidGeometryHandle {
    fn eq(&self, other: &Self) -> bool {
        self.0.sizes() == other.0.sizes()
    }
}

/// Fast filter over a tabulated remap, recording a tape for gradients with
/// respect to the table values.
pub fn llf_fast_with_tape(
    img: &Image,
    table: &TabulatedRemap,
    cfg: &LlfConfig,
) -> Result<(Image, Tape)> {
    cfg.validate()?;
    check_input(img)?;
    let geom = PyramidGeometry::for_image(img, cfg.num_levels)?;
    let gaussian = geom.gaussian(img)?;
    let samples = cfg.lut_samples();
    let per_level: Vec<(LaplacianPyramid, Vec<TableLocation>)> = samples
        .par_iter()
        .map(|&g| {
            let locs: Vec<TableLocation> =
                img.data().iter().map(|&v| table.locate(v - g)).collect();
            let remapped = Image::new(
                img.width(),
                img.height(),
                locs.iter().map(|&loc| g + table.eval_at(loc)).collect(),
            )?;
            Ok((geom.laplacian(&remapped)?, locs))
        })
        .collect::<Result<_>>()?;
    let (pyramids, locations): (Vec<_>, Vec<_>) = per_level.into_iter().unzip();
    let bank = LutBank {
        samples,
        pyramids,
        gaussian,
    };
    let plan = blend_plan(&bank.gaussian, cfg.lut_levels);
    let out = assemble(&bank, &plan, &geom);
    let tape = Tape {
        geom: PyramidGeometryHandle(geom),
        table_len: table.len(),
        plan,
        locations,
    };
    Ok((out, tape))
}

impl Tape {
    pub fn table_len(&self) -> usize {
        self.table_len
    }

    pub fn lut_levels(&self) -> usize {
        self.locations.len()
    }

    /// Gradient of a scalar loss with respect to the table values, given
    /// its gradient with respect to the filter output.
    pub fn backward(&self, out_grad: &Image) -> Result<Vec<f64>> {
        let geom = &self.geom.0;
        let (w, h) = geom.size(0);
        if out_grad.width() != w || out_grad.height() != h {
            return Err(LlfError::StaleTape(format!(
                "tape recorded a {w}x{h} image, gradient is {}x{}",
                out_grad.width(),
                out_grad.height()
            )));
        }
        let band_grads = geom.collapse_adjoint(out_grad);
        let top = geom.num_levels() - 1;
        let per_level: Vec<Vec<f64>> = (0..self.lut_levels())
            .into_par_iter()
            .map(|k| {
                let mut grads: Vec<Image> = (0..=top)
                    .map(|l| {
                        let (bw, bh) = geom.size(l);
                        Image::zeros(bw, bh)
                    })
                    .collect();
                let mut any = false;
                for l in 0..top {
                    let src = band_grads[l].data();
                    let dst = grads[l].data_mut();
                    for (p, b) in self.plan[l].iter().enumerate() {
                        let s = b.segment as usize;
                        if s == k {
                            dst[p] += (1.0 - b.t) * src[p];
                            any = true;
                        } else if s + 1 == k {
                            dst[p] += b.t * src[p];
                            any = true;
                        }
                    }
                }
                let mut table_grad = vec![0.0; self.table_len];
                if !any {
                    return table_grad;
                }
                let d_remapped = geom.laplacian_adjoint(&grads);
                for (&g, loc) in d_remapped.data().iter().zip(&self.locations[k]) {
                    let i = loc.index as usize;
                    if loc.frac == 0.0 {
                        table_grad[i] += g;
                    } else {
                        table_grad[i] += (1.0 - loc.frac) * g;
                        table_grad[i + 1] += loc.frac * g;
                    }
                }
                table_grad
            })
            .collect();
        let mut total = vec![0.0; self.table_len];
        for g in per_level {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok(total)
    }
}
