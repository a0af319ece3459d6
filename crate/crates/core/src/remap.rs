//! Remap functions applied to the pixel/context difference, and the
//! curve tooling used to inspect them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LlfError, Result};

pub mod mlp;

/// Default number of knots of tabulated remaps and exported curves.
pub const DEFAULT_TABLE_SIZE: usize = 1024;

/// Slack below which a drop between adjacent curve samples is ignored.
pub const MONOTONIC_TOLERANCE: f64 = 1e-9;

/// A scalar map of the difference between a pixel and its local context.
pub trait Remap: Sync {
    fn eval(&self, delta: f64) -> f64;
}

impl<F: Fn(f64) -> f64 + Sync> Remap for F {
    fn eval(&self, delta: f64) -> f64 {
        self(delta)
    }
}

/// Three-parameter remap: power law below the threshold `sigma`, affine
/// with slope `beta` above it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrigRemap {
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Partial derivatives of [`OrigRemap::eval`] w.r.t. its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OrigRemapGrad {
    pub d_sigma: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

impl OrigRemap {
    pub fn new(sigma: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { sigma, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            sigma: 0.1,
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(LlfError::InvalidParameter(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LlfError::InvalidParameter(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(LlfError::InvalidParameter(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// `alpha == beta == 1` reduces both branches to `delta`.
    pub fn is_identity(&self) -> bool {
        self.alpha == 1.0 && self.beta == 1.0
    }

    pub fn eval(&self, delta: f64) -> f64 {
        let a = delta.abs();
        if a == 0.0 {
            return 0.0;
        }
        let s = delta.signum();
        if a < self.sigma {
            s * self.sigma * (a / self.sigma).powf(self.alpha)
        } else {
            s * (self.beta * (a - self.sigma) + self.sigma)
        }
    }

    /// Branch selection is treated as constant.
    pub fn grad(&self, delta: f64) -> OrigRemapGrad {
        let a = delta.abs();
        if a == 0.0 {
            return OrigRemapGrad::default();
        }
        let s = delta.signum();
        if a < self.sigma {
            let ratio = a / self.sigma;
            let pw = ratio.powf(self.alpha);
            OrigRemapGrad {
                d_sigma: s * pw * (1.0 - self.alpha),
                d_alpha: s * self.sigma * pw * ratio.ln(),
                d_beta: 0.0,
            }
        } else {
            OrigRemapGrad {
                d_sigma: s * (1.0 - self.beta),
                d_alpha: 0.0,
                d_beta: s * (a - self.sigma),
            }
        }
    }
}

impl Remap for OrigRemap {
    fn eval(&self, delta: f64) -> f64 {
        OrigRemap::eval(self, delta)
    }
}

/// Uniform grid of `n` points covering `[-1, 1]` inclusive.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least two points");
    let step = 2.0 / (n - 1) as f64;
    (0..n)
        .map(|k| {
            if k == n - 1 {
                1.0
            } else {
                -1.0 + k as f64 * step
            }
        })
        .collect()
}

const KNOT_SNAP: f64 = 1e-9;

/// Piecewise-linear remap defined by knot values on the uniform grid over
/// `[-1, 1]`. Outside the grid the end segments are extended linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedRemap {
    values: Vec<f64>,
}

/// Knot segment and fractional position of a delta inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableLocation {
    pub index: u32,
    pub frac: f64,
}

impl TabulatedRemap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(LlfError::InvalidParameter(
                "a remap table needs at least two knots".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn from_remap(r: &dyn Remap, n: usize) -> Self {
        Self {
            values: uniform_grid(n).into_iter().map(|d| r.eval(d)).collect(),
        }
    }

    pub fn from_curve(curve: &RemapCurve) -> Self {
        Self {
            values: curve.values.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn locate(&self, delta: f64) -> TableLocation {
        let n = self.values.len();
        let last = (n - 1) as f64;
        let pos = (delta + 1.0) * 0.5 * last;
        if pos >= 0.0 && pos < last {
            // truncation is floor here and avoids a libm call
            let mut index = pos as usize;
            let mut frac = pos - index as f64;
            // snap onto knots so knot evaluation is exact
            if frac < KNOT_SNAP {
                frac = 0.0;
            } else if frac > 1.0 - KNOT_SNAP {
                index += 1;
                frac = 0.0;
            }
            if index > n - 2 {
                return TableLocation {
                    index: (n - 2) as u32,
                    frac: 1.0,
                };
            }
            return TableLocation {
                index: index as u32,
                frac,
            };
        }
        let nearest = pos.round();
        let pos = if (pos - nearest).abs() < KNOT_SNAP {
            nearest
        } else {
            pos
        };
        let index = pos.floor().clamp(0.0, (n - 2) as f64);
        TableLocation {
            index: index as u32,
            frac: pos - index,
        }
    }

    #[inline]
    pub fn eval_at(&self, loc: TableLocation) -> f64 {
        let i = loc.index as usize;
        if loc.frac == 0.0 {
            return self.values[i];
        }
        (1.0 - loc.frac) * self.values[i] + loc.frac * self.values[i + 1]
    }
}

impl Remap for TabulatedRemap {
    fn eval(&self, delta: f64) -> f64 {
        self.eval_at(self.locate(delta))
    }
}

/// A remap tabulated on the uniform grid over `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl RemapCurve {
    pub fn tabulate(r: &dyn Remap, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(LlfError::InvalidParameter(format!(
                "curve needs at least 2 samples, got {n}"
            )));
        }
        let grid = uniform_grid(n);
        let values = grid.iter().map(|&d| r.eval(d)).collect();
        Ok(Self { grid, values })
    }

    pub fn identity(n: usize) -> Self {
        let grid = uniform_grid(n);
        Self {
            values: grid.clone(),
            grid,
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(LlfError::InvalidParameter(
                "curve needs at least 2 samples".into(),
            ));
        }
        Ok(Self {
            grid: uniform_grid(values.len()),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,value\n");
        for (d, v) in self.grid.iter().zip(&self.values) {
            let _ = writeln!(s, "{d},{v}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| LlfError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LlfError::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "delta,value" => {}
            _ => return Err(LlfError::decode(path, "missing 'delta,value' header")),
        }
        let mut grid = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split(',');
            let mut next = || -> Result<f64> {
                parts
                    .next()
                    .and_then(|p| p.trim().parse().ok())
                    .ok_or_else(|| LlfError::decode(path, format!("bad row {}", i + 2)))
            };
            grid.push(next()?);
            values.push(next()?);
        }
        if grid.len() < 2 {
            return Err(LlfError::decode(path, "curve needs at least 2 rows"));
        }
        Ok(Self { grid, values })
    }
}

pub fn export_curve(r: &dyn Remap, n: usize) -> Result<RemapCurve> {
    RemapCurve::tabulate(r, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub delta: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub is_monotonic: bool,
    pub violations: Vec<Violation>,
}

/// Flags every `k` with `values[k] < values[k - 1] - 1e-9`.
pub fn check_monotonic(curve: &RemapCurve) -> MonotonicityReport {
    let violations: Vec<Violation> = curve
        .values
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] < w[0] - MONOTONIC_TOLERANCE)
        .map(|(k, w)| Violation {
            index: k + 1,
            delta: curve.grid[k + 1],
            drop: w[0] - w[1],
        })
        .collect();
    MonotonicityReport {
        is_monotonic: violations.is_empty(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIG: OrigRemap = OrigRemap {
        sigma: 0.2,
        alpha: 0.3,
        beta: 2.0,
    };

    #[test]
    fn hand_evaluated_points() {
        assert_eq!(FIG.eval(0.0), 0.0);
        assert!((FIG.eval(0.4) - 0.6).abs() < 1e-15);
        // 0.2 * 0.5^0.3
        assert!((FIG.eval(0.1) - 0.162_450_479).abs() < 1e-8);
        assert!((FIG.eval(-0.1) + 0.162_450_479).abs() < 1e-8);
    }

    #[test]
    fn affine_parameters_give_identity() {
        let r = OrigRemap::new(0.37, 1.0, 1.0).unwrap();
        for d in [-1.3, -0.2, -1e-5, 0.0, 0.001, 0.37, 0.9] {
            assert_eq!(r.eval(d), d);
        }
    }

    #[test]
    fn grad_examples() {
        let g = FIG.grad(0.4);
        assert!((g.d_beta - 0.2).abs() < 1e-15);
        assert_eq!(g.d_alpha, 0.0);
        assert_eq!(FIG.grad(0.0), OrigRemapGrad::default());
    }

    #[test]
    fn validation() {
        assert!(OrigRemap::new(0.0, 1.0, 1.0).is_err());
        assert!(OrigRemap::new(0.1, -1.0, 1.0).is_err());
        assert!(OrigRemap::new(0.1, 1.0, -0.1).is_err());
        assert!(OrigRemap::new(0.1, 1.0, 0.0).is_ok());
    }

    #[test]
    fn curve_examples() {
        let id = RemapCurve::tabulate(&OrigRemap::identity(), 1024).unwrap();
        assert_eq!(id.values, id.grid);
        assert_eq!(id.grid[0], -1.0);
        assert_eq!(id.grid[1023], 1.0);

        let two = RemapCurve::tabulate(&FIG, 2).unwrap();
        assert_eq!(two.grid, vec![-1.0, 1.0]);

        // 0.4 sits on the grid when n - 1 is a multiple of 5
        let c = RemapCurve::tabulate(&FIG, 11).unwrap();
        assert!((c.grid[7] - 0.4).abs() < 1e-15);
        assert!((c.values[7] - 0.6).abs() < 1e-12);
        assert!(check_monotonic(&c).is_monotonic);
        assert!(RemapCurve::tabulate(&FIG, 1).is_err());
    }

    #[test]
    fn monotonicity_flags_constructed_drop() {
        let mut c = RemapCurve::identity(32);
        assert!(check_monotonic(&c).is_monotonic);
        c.values[10] = c.values[9] - 0.5;
        let report = check_monotonic(&c);
        assert!(!report.is_monotonic);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].index, 10);
        assert!((report.violations[0].drop - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fig_curve_is_monotonic_on_default_grid() {
        let c = RemapCurve::tabulate(&FIG, DEFAULT_TABLE_SIZE).unwrap();
        assert!(check_monotonic(&c).is_monotonic);
    }

    #[test]
    fn curve_csv_roundtrip() {
        let c = RemapCurve::tabulate(&FIG, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        c.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("delta,value\n"));
        assert_eq!(RemapCurve::read_csv(&p).unwrap(), c);
    }

    #[test]
    fn table_is_exact_at_knots_and_linear_between() {
        let t = TabulatedRemap::from_remap(&FIG, 64);
        let grid = uniform_grid(64);
        for (k, &d) in grid.iter().enumerate() {
            assert_eq!(t.eval(d), t.values()[k]);
        }
        let mid = 0.5 * (grid[40] + grid[41]);
        let expect = 0.5 * (t.values()[40] + t.values()[41]);
        assert!((t.eval(mid) - expect).abs() < 1e-15);
        // linear extension past the ends
        let affine = TabulatedRemap::from_remap(&|d: f64| 1.5 * d + 0.1, 8);
        assert!((affine.eval(1.2) - 1.9).abs() < 1e-12);
        assert!((affine.eval(-1.25) + 1.775).abs() < 1e-12);
    }

    fn params() -> impl Strategy<Value = OrigRemap> {
        (0.02f64..0.8, 0.1f64..3.0, 0.0f64..3.0).prop_map(|(sigma, alpha, beta)| OrigRemap {
            sigma,
            alpha,
            beta,
        })
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn remap_is_odd(p in params(), d in -1.5f64..1.5) {
            prop_assert!((p.eval(d) + p.eval(-d)).abs() <= 1e-12);
        }

        #[test]
        fn continuous_at_threshold(p in params()) {
            let eps = 1e-9;
            prop_assert!((p.eval(p.sigma - eps) - p.eval(p.sigma + eps)).abs() <= 1e-7);
            prop_assert!((p.eval(p.sigma) - p.sigma).abs() <= 1e-15);
        }

        #[test]
        fn detail_regimes(p in params(), u in 0.0f64..1.0) {
            let d = u * p.sigma;
            if p.alpha < 1.0 {
                prop_assert!(p.eval(d).abs() >= d.abs() - 1e-15);
            } else if p.alpha > 1.0 {
                prop_assert!(p.eval(d).abs() <= d.abs() + 1e-15);
            }
        }

        #[test]
        fn outer_slope_is_beta(p in params(), u in 0.01f64..1.0) {
            let d = p.sigma + u;
            let h = 1e-6;
            let slope = (p.eval(d + h) - p.eval(d - h)) / (2.0 * h);
            prop_assert!((slope - p.beta).abs() <= 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn grad_matches_central_differences(p in params(), d in -1.0f64..1.0) {
            // stay away from the seam and from zero
            prop_assume!((d.abs() - p.sigma).abs() > 1e-3 && d.abs() > 1e-3);
            let h = 1e-6;
            let g = p.grad(d);
            let fd = |f: &dyn Fn(f64) -> OrigRemap| (f(h).eval(d) - f(-h).eval(d)) / (2.0 * h);
            let ds = fd(&|e| OrigRemap { sigma: p.sigma + e, ..p });
            let da = fd(&|e| OrigRemap { alpha: p.alpha + e, ..p });
            let db = fd(&|e| OrigRemap { beta: p.beta + e, ..p });
            prop_assert!(rel_err(g.d_sigma, ds) <= 1e-5, "sigma {} vs {}", g.d_sigma, ds);
            prop_assert!(rel_err(g.d_alpha, da) <= 1e-5, "alpha {} vs {}", g.d_alpha, da);
            prop_assert!(rel_err(g.d_beta, db) <= 1e-5, "beta {} vs {}", g.d_beta, db);
        }
    }
}
