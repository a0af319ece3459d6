//! Scalar-to-scalar MLP remap with batch normalization and a hand-written
//! reverse pass.
//!
//! Layout: `1 -> 3 -> 12 -> 24 -> 24 -> 12 -> 3 -> 1`. Each of the six hidden
//! layers is affine, batch-normalized and rectified; the final `3 -> 1` layer
//! is affine only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LlfError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::remap::{uniform_grid, Remap, RemapCurve, DEFAULT_TABLE_SIZE};

pub const LAYER_WIDTHS: [usize; 8] = [1, 3, 12, 24, 24, 12, 3, 1];
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const NUM_LINEAR: usize = LAYER_WIDTHS.len() - 1;
const NUM_HIDDEN: usize = NUM_LINEAR - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    n_in: usize,
    n_out: usize,
    /// `n_out x n_in`, row-major
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    scale: Vec<f64>,
    shift: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpRemap {
    linears: Vec<Linear>,
    norms: Vec<BatchNorm>,
    mode: Mode,
}

#[derive(Debug, Clone)]
struct HiddenCache {
    /// normalized pre-activations, batch-major
    xhat: Vec<f64>,
    /// post-ReLU activations, batch-major
    act: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Activations recorded by [`MlpRemap::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    inputs: Vec<f64>,
    hidden: Vec<HiddenCache>,
    outputs: Vec<f64>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.len()
    }
}

/// Gradients of a scalar loss w.r.t. parameters (flat, see
/// [`MlpRemap::params`]) and w.r.t. each input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub params: Vec<f64>,
    pub inputs: Vec<f64>,
}

impl MlpRemap {
    /// He-uniform weights, zero biases, unit batch-norm scale, training mode.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linears = LAYER_WIDTHS
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = (6.0 / n_in as f64).sqrt();
                Linear {
                    n_in,
                    n_out,
                    weight: (0..n_in * n_out)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; n_out],
                }
            })
            .collect();
        Self {
            linears,
            norms: Self::fresh_norms(),
            mode: Mode::Training,
        }
    }

    /// All weights, biases and batch-norm affine parameters zero;
    /// running mean 0 and variance 1.
    pub fn zeros() -> Self {
        let mut m = Self::new(0);
        let n = m.num_params();
        m.set_params(&vec![0.0; n]);
        m
    }

    fn fresh_norms() -> Vec<BatchNorm> {
        LAYER_WIDTHS[1..=NUM_HIDDEN]
            .iter()
            .map(|&w| BatchNorm {
                scale: vec![1.0; w],
                shift: vec![0.0; w],
                running_mean: vec![0.0; w],
                running_var: vec![1.0; w],
            })
            .collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_params(&self) -> usize {
        self.linears
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + self
                .norms
                .iter()
                .map(|n| n.scale.len() + n.shift.len())
                .sum::<usize>()
    }

    /// Flat trainable parameters: for each linear layer its weights then
    /// biases, followed by each batch norm's scale then shift.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.linears {
            p.extend_from_slice(&l.weight);
            p.extend_from_slice(&l.bias);
        }
        for n in &self.norms {
            p.extend_from_slice(&n.scale);
            p.extend_from_slice(&n.shift);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter count mismatch");
        let mut it = p.iter().copied();
        let mut fill = |dst: &mut Vec<f64>| dst.iter_mut().for_each(|d| *d = it.next().unwrap());
        for l in &mut self.linears {
            fill(&mut l.weight);
            fill(&mut l.bias);
        }
        for n in &mut self.norms {
            fill(&mut n.scale);
            fill(&mut n.shift);
        }
    }

    pub fn num_buffers(&self) -> usize {
        self.norms.iter().map(|n| 2 * n.scale.len()).sum()
    }

    /// Running statistics: each batch norm's mean then variance.
    pub fn buffers(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.num_buffers());
        for n in &self.norms {
            b.extend_from_slice(&n.running_mean);
            b.extend_from_slice(&n.running_var);
        }
        b
    }

    pub fn set_buffers(&mut self, b: &[f64]) {
        assert_eq!(b.len(), self.num_buffers(), "buffer count mismatch");
        let mut it = b.iter().copied();
        for n in &mut self.norms {
            n.running_mean
                .iter_mut()
                .for_each(|d| *d = it.next().unwrap());
            n.running_var
                .iter_mut()
                .for_each(|d| *d = it.next().unwrap());
        }
    }

    pub fn forward(&self, deltas: &[f64]) -> Result<ForwardCache> {
        self.forward_mode(deltas, self.mode)
    }

    pub fn forward_mode(&self, deltas: &[f64], mode: Mode) -> Result<ForwardCache> {
        let n = deltas.len();
        if mode == Mode::Training && n < 2 {
            return Err(LlfError::BatchTooSmall(n));
        }
        let mut act = deltas.to_vec();
        let mut hidden = Vec::with_capacity(NUM_HIDDEN);
        for (lin, bn) in self.linears.iter().zip(&self.norms) {
            let z = lin.forward(&act, n);
            let w = lin.n_out;
            let (mean, var) = match mode {
                Mode::Training => batch_stats(&z, n, w),
                Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = z;
            let mut next = vec![0.0; n * w];
            for (xr, ar) in xhat.chunks_exact_mut(w).zip(next.chunks_exact_mut(w)) {
                for j in 0..w {
                    xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    ar[j] = (bn.scale[j] * xr[j] + bn.shift[j]).max(0.0);
                }
            }
            hidden.push(HiddenCache {
                xhat,
                act: next.clone(),
                mean,
                var,
                inv_std,
            });
            act = next;
        }
        let outputs = self.linears[NUM_LINEAR - 1].forward(&act, n);
        Ok(ForwardCache {
            mode,
            inputs: deltas.to_vec(),
            hidden,
            outputs,
        })
    }

    /// Reverse pass for a forward cache produced by this network.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<MlpGrad> {
        let n = cache.inputs.len();
        if upstream.len() != n || cache.hidden.len() != NUM_HIDDEN {
            return Err(LlfError::MissingCache);
        }
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(NUM_LINEAR);
        let mut bn_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(NUM_HIDDEN);

        let last = &self.linears[NUM_LINEAR - 1];
        let (dw, db, mut dact) = last.backward(&cache.hidden[NUM_HIDDEN - 1].act, upstream, n);
        grads.push((dw, db));

        for l in (0..NUM_HIDDEN).rev() {
            let hc = &cache.hidden[l];
            let bn = &self.norms[l];
            let w = self.linears[l].n_out;
            let mut dscale = vec![0.0; w];
            let mut dshift = vec![0.0; w];
            // dxhat in place of dact
            for ((d, xr), ar) in dact
                .chunks_exact_mut(w)
                .zip(hc.xhat.chunks_exact(w))
                .zip(hc.act.chunks_exact(w))
            {
                for j in 0..w {
                    let dy = if ar[j] > 0.0 { d[j] } else { 0.0 };
                    dscale[j] += dy * xr[j];
                    dshift[j] += dy;
                    d[j] = dy * bn.scale[j];
                }
            }
            let dz = match cache.mode {
                Mode::Inference => {
                    let mut dz = dact;
                    for row in dz.chunks_exact_mut(w) {
                        for j in 0..w {
                            row[j] *= hc.inv_std[j];
                        }
                    }
                    dz
                }
                Mode::Training => {
                    let mut sum_d = vec![0.0; w];
                    let mut sum_dx = vec![0.0; w];
                    for (d, xr) in dact.chunks_exact(w).zip(hc.xhat.chunks_exact(w)) {
                        for j in 0..w {
                            sum_d[j] += d[j];
                            sum_dx[j] += d[j] * xr[j];
                        }
                    }
                    let nf = n as f64;
                    let mut dz = dact;
                    for (row, xr) in dz.chunks_exact_mut(w).zip(hc.xhat.chunks_exact(w)) {
                        for j in 0..w {
                            row[j] =
                                hc.inv_std[j] / nf * (nf * row[j] - sum_d[j] - xr[j] * sum_dx[j]);
                        }
                    }
                    dz
                }
            };
            bn_grads.push((dscale, dshift));
            let prev_act: &[f64] = if l == 0 {
                &cache.inputs
            } else {
                &cache.hidden[l - 1].act
            };
            let (dw, db, dprev) = self.linears[l].backward(prev_act, &dz, n);
            grads.push((dw, db));
            dact = dprev;
        }
        grads.reverse();
        bn_grads.reverse();

        let mut params = Vec::with_capacity(self.num_params());
        for (dw, db) in grads {
            params.extend(dw);
            params.extend(db);
        }
        for (ds, dh) in bn_grads {
            params.extend(ds);
            params.extend(dh);
        }
        Ok(MlpGrad {
            params,
            inputs: dact,
        })
    }

    /// Exponential moving average of the cached batch statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Training {
            return;
        }
        for (bn, hc) in self.norms.iter_mut().zip(&cache.hidden) {
            for j in 0..bn.running_mean.len() {
                bn.running_mean[j] =
                    (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * hc.mean[j];
                bn.running_var[j] =
                    (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * hc.var[j];
            }
        }
    }

    /// Copy the cached batch statistics into the running statistics, so that
    /// inference on that batch reproduces the training-mode output exactly.
    pub fn freeze_stats(&mut self, cache: &ForwardCache) {
        for (bn, hc) in self.norms.iter_mut().zip(&cache.hidden) {
            bn.running_mean.clone_from(&hc.mean);
            bn.running_var.clone_from(&hc.var);
        }
    }

    /// Freeze statistics on the uniform grid and switch to inference.
    pub fn freeze_on_grid(&mut self, n: usize) -> Result<()> {
        let cache = self.forward_mode(&uniform_grid(n), Mode::Training)?;
        self.freeze_stats(&cache);
        self.mode = Mode::Inference;
        Ok(())
    }

    /// Outputs on the uniform grid using the current mode.
    pub fn tabulate(&self, n: usize) -> Result<Vec<f64>> {
        Ok(self.forward(&uniform_grid(n))?.outputs)
    }

    pub fn export_curve(&self, n: usize) -> Result<RemapCurve> {
        if self.mode != Mode::Inference {
            return Err(LlfError::TrainingMode);
        }
        RemapCurve::from_values(self.tabulate(n)?)
    }
}

impl Remap for MlpRemap {
    /// Single-sample evaluation with the running statistics.
    fn eval(&self, delta: f64) -> f64 {
        self.forward_mode(&[delta], Mode::Inference)
            .expect("inference accepts single samples")
            .outputs[0]
    }
}

impl Linear {
    fn forward(&self, input: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.n_out];
        for (x, o) in input
            .chunks_exact(self.n_in)
            .zip(out.chunks_exact_mut(self.n_out))
        {
            for (j, oj) in o.iter_mut().enumerate() {
                let row = &self.weight[j * self.n_in..(j + 1) * self.n_in];
                *oj = self.bias[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        out
    }

    /// Returns `(dW, db, dInput)`.
    fn backward(&self, input: &[f64], dout: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.n_out];
        let mut dx = vec![0.0; n * self.n_in];
        for ((x, d), dxr) in input
            .chunks_exact(self.n_in)
            .zip(dout.chunks_exact(self.n_out))
            .zip(dx.chunks_exact_mut(self.n_in))
        {
            for j in 0..self.n_out {
                let g = d[j];
                db[j] += g;
                let row = &self.weight[j * self.n_in..(j + 1) * self.n_in];
                let drow = &mut dw[j * self.n_in..(j + 1) * self.n_in];
                for i in 0..self.n_in {
                    drow[i] += g * x[i];
                    dxr[i] += g * row[i];
                }
            }
        }
        (dw, db, dx)
    }
}

/// Per-feature mean and biased variance of a batch-major buffer.
fn batch_stats(z: &[f64], n: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mut mean = vec![0.0; w];
    for row in z.chunks_exact(w) {
        for j in 0..w {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; w];
    for row in z.chunks_exact(w) {
        for j in 0..w {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    (mean, var)
}

/// Stopping tolerance of the identity pretraining (max-abs on the grid).
pub const PRETRAIN_TOLERANCE: f64 = 5e-3;
pub const PRETRAIN_MAX_STEPS: usize = 20_000;
const PRETRAIN_BATCH: usize = 256;
const PRETRAIN_CHECK_EVERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub steps: usize,
    pub max_error: f64,
}

/// Fit `m(d) = d` on `[-1, 1]` with Adam (lr 1e-3) on stratified uniform
/// batches. The error is measured on the 1024-point grid with grid batch
/// statistics; on success those statistics are frozen and the network is
/// returned in inference mode.
pub fn pretrain_identity(mut m: MlpRemap, seed: u64) -> Result<(MlpRemap, PretrainOutcome)> {
    m.set_mode(Mode::Training);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(AdamConfig::with_lr(1e-3), m.num_params());
    let grid = uniform_grid(DEFAULT_TABLE_SIZE);
    let width = 2.0 / PRETRAIN_BATCH as f64;
    let mut params = m.params();
    let mut max_error = f64::INFINITY;

    for step in 0..=PRETRAIN_MAX_STEPS {
        if step % PRETRAIN_CHECK_EVERY == 0 {
            let cache = m.forward_mode(&grid, Mode::Training)?;
            max_error = cache
                .outputs
                .iter()
                .zip(&grid)
                .map(|(o, d)| (o - d).abs())
                .fold(0.0, f64::max);
            if max_error <= PRETRAIN_TOLERANCE {
                m.freeze_stats(&cache);
                m.set_mode(Mode::Inference);
                return Ok((
                    m,
                    PretrainOutcome {
                        steps: step,
                        max_error,
                    },
                ));
            }
        }
        if step == PRETRAIN_MAX_STEPS {
            break;
        }
        let batch: Vec<f64> = (0..PRETRAIN_BATCH)
            .map(|i| -1.0 + (i as f64 + rng.gen::<f64>()) * width)
            .collect();
        let cache = m.forward(&batch)?;
        let nf = batch.len() as f64;
        let upstream: Vec<f64> = cache
            .outputs
            .iter()
            .zip(&batch)
            .map(|(o, d)| 2.0 * (o - d) / nf)
            .collect();
        let g = m.backward(&cache, &upstream)?;
        m.update_running_stats(&cache);
        adam.step(&mut params, &g.params);
        m.set_params(&params);
    }
    Err(LlfError::PretrainDiverged {
        steps: PRETRAIN_MAX_STEPS,
        achieved: max_error,
    })
}


#[cfg(test)]
mod pretrain_tests {
    use super::*;
    use crate::remap::check_monotonic;

    #[test]
    fn pretrained_network_approximates_identity() {
        let (m, outcome) = pretrain_identity(MlpRemap::new(42), 42).unwrap();
        assert_eq!(m.mode(), Mode::Inference);
        assert!(outcome.max_error <= PRETRAIN_TOLERANCE);
        let curve = m.export_curve(DEFAULT_TABLE_SIZE).unwrap();
        let worst = curve
            .grid
            .iter()
            .zip(&curve.values)
            .map(|(d, v)| (d - v).abs())
            .fold(0.0, f64::max);
        assert!(worst <= PRETRAIN_TOLERANCE, "{worst}");
        assert!(m.eval(0.0).abs() <= 5e-3);
        assert!((m.eval(1.0) - 1.0).abs() <= 5e-3);
        // reported rather than asserted: tiny ripples are admissible
        let report = check_monotonic(&curve);
        eprintln!(
            "pretrain: {} steps, max err {:.2e}, monotonic {} ({} violations)",
            outcome.steps,
            outcome.max_error,
            report.is_monotonic,
            report.violations.len()
        );
    }
}
