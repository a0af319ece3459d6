//! End-to-end training of the remap and the affine output layer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LlfError, Result};
use crate::image::Image;
use crate::imageio::PairedDataset;
use crate::llf::{llf_fast, llf_fast_with_tape, LlfConfig};
use crate::metrics::{mse, mse_backward, mssim, mssim_backward, SsimParams};
use crate::optim::{Adam, AdamConfig};
use crate::remap::mlp::{pretrain_identity, ForwardCache, MlpRemap, Mode, PretrainOutcome};
use crate::remap::{
    check_monotonic, uniform_grid, MonotonicityReport, OrigRemap, RemapCurve, TabulatedRemap,
    DEFAULT_TABLE_SIZE,
};

/// Lower bound kept on the remap threshold and exponent during training.
pub const MIN_POSITIVE: f64 = 1e-3;

/// Affine output stage `x * gamma + omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub gamma: f64,
    pub omega: f64,
}

impl NormLayer {
    pub fn new(gamma: f64, omega: f64) -> Self {
        Self { gamma, omega }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0)
    }

    pub fn apply(&self, img: &Image) -> Image {
        img.map(|v| v * self.gamma + self.omega)
    }
}

impl Default for NormLayer {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemapKind {
    Orig,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub llf: LlfConfig,
    pub remap_kind: RemapKind,
    pub norm_layer: bool,
    pub seed: u64,
    pub table_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 300,
            llf: LlfConfig::default(),
            remap_kind: RemapKind::Mlp,
            norm_layer: true,
            seed: 0,
            table_size: DEFAULT_TABLE_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(LlfError::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        if self.epochs == 0 {
            return Err(LlfError::InvalidParameter(
                "epochs must be at least 1".into(),
            ));
        }
        if self.table_size < 2 {
            return Err(LlfError::InvalidParameter(
                "table_size must be at least 2".into(),
            ));
        }
        self.llf.validate()
    }
}

/// The trainable remap.
#[derive(Debug, Clone, PartialEq)]
pub enum RemapModel {
    Orig(OrigRemap),
    Mlp(MlpRemap),
}

impl RemapModel {
    pub fn kind(&self) -> RemapKind {
        match self {
            RemapModel::Orig(_) => RemapKind::Orig,
            RemapModel::Mlp(_) => RemapKind::Mlp,
        }
    }

    fn num_params(&self) -> usize {
        match self {
            RemapModel::Orig(_) => 3,
            RemapModel::Mlp(m) => m.num_params(),
        }
    }

    /// Table values in the current mode, with the MLP forward cache when
    /// the network is training.
    fn tabulate(&self, n: usize) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        match self {
            RemapModel::Orig(r) => Ok((
                uniform_grid(n).into_iter().map(|d| r.eval(d)).collect(),
                None,
            )),
            RemapModel::Mlp(m) => {
                let cache = m.forward(&uniform_grid(n))?;
                let values = cache.outputs().to_vec();
                let cache = (m.mode() == Mode::Training).then_some(cache);
                Ok((values, cache))
            }
        }
    }

    pub fn table(&self, n: usize) -> Result<TabulatedRemap> {
        TabulatedRemap::new(self.tabulate(n)?.0)
    }

    pub fn curve(&self, n: usize) -> Result<RemapCurve> {
        match self {
            RemapModel::Orig(r) => RemapCurve::tabulate(r, n),
            RemapModel::Mlp(m) => m.export_curve(n),
        }
    }
}

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    /// `1 - MSSIM`
    pub ssim: f64,
}

/// `MSE + 1 - MSSIM` and its gradient with respect to `out`.
pub fn loss(out: &Image, target: &Image) -> Result<(LossTerms, Image)> {
    let p = SsimParams::default();
    let m = mse(out, target)?;
    let s = mssim(out, target, &p)?;
    let d_mse = mse_backward(out, target)?;
    let d_ssim = mssim_backward(out, target, &p, -1.0)?;
    let grad = d_mse.zip_map(&d_ssim, |a, b| a + b)?;
    let terms = LossTerms {
        total: m + (1.0 - s),
        mse: m,
        ssim: 1.0 - s,
    };
    Ok((terms, grad))
}

/// Remap plus affine layer; the quantity being optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub remap: RemapModel,
    pub norm: NormLayer,
    /// Whether `norm` is trained; a disabled layer stays at identity.
    pub norm_enabled: bool,
    pub llf: LlfConfig,
    pub table_size: usize,
}

/// Loss and gradient of one training step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: LossTerms,
    pub grad: Vec<f64>,
    cache: Option<ForwardCache>,
}

impl Pipeline {
    pub fn num_params(&self) -> usize {
        self.remap.num_params() + if self.norm_enabled { 2 } else { 0 }
    }

    /// Flat parameters: the remap's, then `gamma, omega` when enabled.
    pub fn params(&self) -> Vec<f64> {
        let mut p = match &self.remap {
            RemapModel::Orig(r) => vec![r.sigma, r.alpha, r.beta],
            RemapModel::Mlp(m) => m.params(),
        };
        if self.norm_enabled {
            p.extend([self.norm.gamma, self.norm.omega]);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let n = self.remap.num_params();
        match &mut self.remap {
            RemapModel::Orig(r) => {
                r.sigma = p[0];
                r.alpha = p[1];
                r.beta = p[2];
            }
            RemapModel::Mlp(m) => m.set_params(&p[..n]),
        }
        if self.norm_enabled {
            self.norm = NormLayer::new(p[n], p[n + 1]);
        }
    }

    /// Output for the current mode of the remap.
    pub fn forward(&self, img: &Image) -> Result<Image> {
        let table = self.remap.table(self.table_size)?;
        Ok(self.norm.apply(&llf_fast(img, &table, &self.llf)?))
    }

    /// Loss against `target` and its gradient with respect to [`Self::params`].
    pub fn step(&self, input: &Image, target: &Image) -> Result<StepResult> {
        let (values, cache) = self.remap.tabulate(self.table_size)?;
        let table = TabulatedRemap::new(values)?;
        let (filtered, tape) = llf_fast_with_tape(input, &table, &self.llf)?;
        let out = self.norm.apply(&filtered);
        let (terms, d_out) = loss(&out, target)?;

        let gamma = self.norm.gamma;
        let d_filtered = d_out.map(|g| g * gamma);
        let d_table = tape.backward(&d_filtered)?;
        let mut grad = match &self.remap {
            RemapModel::Orig(r) => {
                let mut g = vec![0.0; 3];
                for (d, &dt) in uniform_grid(self.table_size).into_iter().zip(&d_table) {
                    let pg = r.grad(d);
                    g[0] += dt * pg.d_sigma;
                    g[1] += dt * pg.d_alpha;
                    g[2] += dt * pg.d_beta;
                }
                g
            }
            RemapModel::Mlp(m) => {
                let c = cache.as_ref().ok_or(LlfError::TrainingMode)?;
                m.backward(c, &d_table)?.params
            }
        };
        if self.norm_enabled {
            let d_gamma: f64 = d_out
                .data()
                .iter()
                .zip(filtered.data())
                .map(|(g, f)| g * f)
                .sum();
            grad.extend([d_gamma, d_out.sum()]);
        }
        Ok(StepResult {
            loss: terms,
            grad,
            cache,
        })
    }
}

/// Per-epoch training record, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mse_term: f64,
    pub mssim_term: f64,
    /// Steps in which a remap parameter was pushed back into its domain.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub projections: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub remap: RemapModel,
    /// `None` when trained without the affine layer.
    pub norm: Option<NormLayer>,
    pub config: TrainConfig,
    /// Mean loss of the finished model over the training pairs.
    pub final_loss: Option<f64>,
    pub history: Vec<EpochLoss>,
    pub monotonicity: MonotonicityReport,
    pub pretrain: Option<PretrainOutcome>,
}

impl TrainedModel {
    pub fn from_parts(
        remap: RemapModel,
        norm: Option<NormLayer>,
        config: TrainConfig,
    ) -> Result<Self> {
        let monotonicity = check_monotonic(&remap.curve(config.table_size)?);
        Ok(Self {
            remap,
            norm,
            config,
            final_loss: None,
            history: Vec::new(),
            monotonicity,
            pretrain: None,
        })
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline {
            remap: self.remap.clone(),
            norm: self.norm.unwrap_or_default(),
            norm_enabled: self.norm.is_some(),
            llf: self.config.llf,
            table_size: self.config.table_size,
        }
    }

    pub fn curve(&self) -> Result<RemapCurve> {
        self.remap.curve(self.config.table_size)
    }

    /// Filter, then the affine layer.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.pipeline().forward(img)
    }
}

fn project(remap: &mut RemapModel) -> bool {
    let RemapModel::Orig(r) = remap else {
        return false;
    };
    let before = *r;
    r.sigma = r.sigma.max(MIN_POSITIVE);
    r.alpha = r.alpha.max(MIN_POSITIVE);
    r.beta = r.beta.max(0.0);
    *r != before
}

/// Initial remap for a configuration: the identity-shaped three-parameter
/// remap, or an identity-pretrained network.
pub fn initial_remap(kind: RemapKind, seed: u64) -> Result<(RemapModel, Option<PretrainOutcome>)> {
    match kind {
        RemapKind::Orig => Ok((RemapModel::Orig(OrigRemap::identity()), None)),
        RemapKind::Mlp => {
            let (mut m, outcome) = pretrain_identity(MlpRemap::new(seed), seed)?;
            log::info!(
                "identity pretraining: {} steps, max error {:.2e}",
                outcome.steps,
                outcome.max_error
            );
            m.set_mode(Mode::Training);
            Ok((RemapModel::Mlp(m), Some(outcome)))
        }
    }
}

/// Train from the configuration's initial remap.
pub fn fit(data: &PairedDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LlfError::EmptyDataset);
    }
    let (remap, pretrain) = initial_remap(cfg.remap_kind, cfg.seed)?;
    let mut model = fit_from(data, cfg, remap)?;
    model.pretrain = pretrain;
    Ok(model)
}

/// Train starting from a given remap (an MLP must be in training mode).
pub fn fit_from(
    data: &PairedDataset,
    cfg: &TrainConfig,
    remap: RemapModel,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LlfError::EmptyDataset);
    }
    let mut pipe = Pipeline {
        remap,
        norm: NormLayer::identity(),
        norm_enabled: cfg.norm_layer,
        llf: cfg.llf,
        table_size: cfg.table_size,
    };
    let mut adam = Adam::new(cfg.adam, pipe.num_params());
    let mut params = pipe.params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_mse, mut sum_ssim) = (0.0, 0.0, 0.0);
        let mut projections = 0;
        for &i in &order {
            let pair = &data.pairs[i];
            let step = pipe.step(&pair.input, &pair.target)?;
            if !step.loss.total.is_finite() || step.grad.iter().any(|g| !g.is_finite()) {
                return Err(LlfError::NonFiniteLoss {
                    epoch,
                    pair: i,
                    mse: step.loss.mse,
                    mssim: 1.0 - step.loss.ssim,
                });
            }
            sum += step.loss.total;
            sum_mse += step.loss.mse;
            sum_ssim += step.loss.ssim;
            if let (RemapModel::Mlp(m), Some(c)) = (&mut pipe.remap, &step.cache) {
                m.update_running_stats(c);
            }
            adam.step(&mut params, &step.grad);
            pipe.set_params(&params);
            if project(&mut pipe.remap) {
                projections += 1;
                params = pipe.params();
            }
        }
        if projections > 0 {
            log::info!("epoch {epoch}: remap parameters projected in {projections} steps");
        }
        let n = data.len() as f64;
        let record = EpochLoss {
            epoch,
            mean_loss: sum / n,
            mse_term: sum_mse / n,
            mssim_term: sum_ssim / n,
            projections,
        };
        log::debug!("epoch {epoch}: loss {:.6e}", record.mean_loss);
        history.push(record);
    }

    if let RemapModel::Mlp(m) = &mut pipe.remap {
        m.freeze_on_grid(cfg.table_size)?;
    }
    let mut final_loss = 0.0;
    for pair in &data.pairs {
        let out = pipe.forward(&pair.input)?;
        final_loss += loss(&out, &pair.target)?.0.total;
    }
    final_loss /= data.len() as f64;

    let monotonicity = check_monotonic(&pipe.remap.curve(cfg.table_size)?);
    Ok(TrainedModel {
        remap: pipe.remap,
        norm: cfg.norm_layer.then_some(pipe.norm),
        config: *cfg,
        final_loss: Some(final_loss),
        history,
        monotonicity,
        pretrain: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub ssim: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub mean_mse: f64,
    pub std_mse: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// SSIM and MSE of `produce(input)` against each target.
pub fn evaluate_with(
    data: &PairedDataset,
    produce: impl Fn(&Image) -> Result<Image> + Sync,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if data.is_empty() {
        return Err(LlfError::EmptyDataset);
    }
    let p = SsimParams::default();
    let pairs = data
        .pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let out = produce(&pair.input)?;
            Ok(PairMetrics {
                index,
                input: pair.input_path.as_ref().map(|p| p.display().to_string()),
                ssim: mssim(&out, &pair.target, &p)?,
                mse: mse(&out, &pair.target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ssims: Vec<f64> = pairs.iter().map(|p| p.ssim).collect();
    let mses: Vec<f64> = pairs.iter().map(|p| p.mse).collect();
    let (mean_ssim, std_ssim) = mean_std(&ssims);
    let (mean_mse, std_mse) = mean_std(&mses);
    Ok(EvalReport {
        pairs,
        mean_ssim,
        std_ssim,
        mean_mse,
        std_mse,
    })
}

pub fn evaluate(data: &PairedDataset, model: &TrainedModel) -> Result<EvalReport> {
    let pipe = model.pipeline();
    let table = pipe.remap.table(pipe.table_size)?;
    evaluate_with(data, |img| {
        Ok(pipe.norm.apply(&llf_fast(img, &table, &pipe.llf)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::{synth_pair, synth_phantom, Split, SynthStyleParams};
    use rand::Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn norm_layer_is_exact() {
        let img = random_image(1, 5, 4);
        let out = NormLayer::new(2.0, 0.1).apply(&img);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert_eq!(*b, a * 2.0 + 0.1);
        }
    }

    #[test]
    fn loss_examples() {
        let t = random_image(2, 16, 16);
        let (l, g) = loss(&t, &t).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        let shifted = t.map(|v| v + 0.1);
        let (l, _) = loss(&shifted, &t).unwrap();
        assert!((l.mse - 0.01).abs() < 1e-15);
        assert!(loss(&Image::zeros(10, 10), &Image::zeros(10, 10)).is_err());
        assert!(loss(&t, &Image::zeros(16, 15)).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let out = random_image(3, 16, 16);
        let target = random_image(4, 16, 16);
        let (_, g) = loss(&out, &target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let (x, y) = (rng.gen_range(0..16), rng.gen_range(0..16));
            let mut p = out.clone();
            let mut m = out.clone();
            p.set(x, y, out.get(x, y) + h);
            m.set(x, y, out.get(x, y) - h);
            let fd = (loss(&p, &target).unwrap().0.total - loss(&m, &target).unwrap().0.total)
                / (2.0 * h);
            let an = g.get(x, y);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            assert!(rel <= 1e-5, "{fd} vs {an}");
        }
    }

    fn orig_pipeline(norm: NormLayer, norm_enabled: bool) -> Pipeline {
        Pipeline {
            remap: RemapModel::Orig(OrigRemap::identity()),
            norm,
            norm_enabled,
            llf: LlfConfig::default(),
            table_size: DEFAULT_TABLE_SIZE,
        }
    }

    #[test]
    fn identity_forward_examples() {
        let img = synth_phantom(4, 32, 32).unwrap();
        let id = orig_pipeline(NormLayer::identity(), true);
        assert!(id.forward(&img).unwrap().max_abs_diff(&img) <= 1e-12);
        let affine = orig_pipeline(NormLayer::new(2.0, 0.1), true)
            .forward(&img)
            .unwrap();
        let filtered = orig_pipeline(NormLayer::identity(), true)
            .forward(&img)
            .unwrap();
        for (a, b) in filtered.data().iter().zip(affine.data()) {
            assert_eq!(*b, a * 2.0 + 0.1);
        }
    }

    #[test]
    fn norm_gradient_examples() {
        // with a zero filter output the gamma gradient vanishes
        let zero = Image::zeros(16, 16);
        let d_out = Image::filled(16, 16, 1.0);
        let d_gamma: f64 = d_out
            .data()
            .iter()
            .zip(zero.data())
            .map(|(g, f)| g * f)
            .sum();
        assert_eq!(d_gamma, 0.0);
        assert_eq!(d_out.sum(), 256.0);
    }

    #[test]
    fn fit_is_reproducible_and_finite() {
        let style = SynthStyleParams {
            sigma: 0.2,
            alpha: 0.5,
            beta: 1.5,
            gamma: 1.1,
            omega: 0.02,
        };
        let pairs = (0..2)
            .map(|s| synth_pair(s, 24, 24, &style).unwrap())
            .collect();
        let data = PairedDataset::from_images(pairs, Split::Train).unwrap();
        let cfg = TrainConfig {
            adam: AdamConfig::with_lr(5e-3),
            epochs: 3,
            remap_kind: RemapKind::Orig,
            ..TrainConfig::default()
        };
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|h| h.mean_loss.is_finite()));
        assert!(a.history[2].mean_loss < a.history[0].mean_loss);
    }

    #[test]
    fn disabled_norm_layer_stays_identity() {
        let style = SynthStyleParams {
            sigma: 0.2,
            alpha: 0.5,
            beta: 1.5,
            gamma: 1.3,
            omega: 0.05,
        };
        let data =
            PairedDataset::from_images(vec![synth_pair(1, 20, 20, &style).unwrap()], Split::Train)
                .unwrap();
        let cfg = TrainConfig {
            adam: AdamConfig::with_lr(1e-2),
            epochs: 2,
            remap_kind: RemapKind::Orig,
            norm_layer: false,
            ..TrainConfig::default()
        };
        let model = fit(&data, &cfg).unwrap();
        assert_eq!(model.norm, None);
        assert_eq!(model.pipeline().norm, NormLayer::identity());
    }

    #[test]
    fn config_validation() {
        let bad_lr = TrainConfig {
            adam: AdamConfig::with_lr(0.0),
            ..TrainConfig::default()
        };
        assert!(bad_lr.validate().is_err());
        let bad_epochs = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad_epochs.validate().is_err());
        let empty = PairedDataset::from_images(vec![], Split::Train).unwrap();
        assert!(matches!(
            fit(&empty, &TrainConfig::default()),
            Err(LlfError::EmptyDataset)
        ));
    }

    #[test]
    fn evaluating_the_generator_is_perfect() {
        let style = SynthStyleParams {
            sigma: 0.2,
            alpha: 0.3,
            beta: 2.0,
            gamma: 1.2,
            omega: 0.05,
        };
        let pairs: Vec<_> = (0..2)
            .map(|s| synth_pair(s, 24, 24, &style).unwrap())
            .collect();
        let data = PairedDataset::from_images(pairs, Split::Test).unwrap();
        let remap = style.remap().unwrap();
        let report = evaluate_with(&data, |img| {
            Ok(style
                .norm()
                .apply(&crate::llf::llf_naive(img, &remap, &LlfConfig::default())?))
        })
        .unwrap();
        assert!((report.mean_ssim - 1.0).abs() <= 1e-9);
        assert!(report.mean_mse <= 1e-12);

        let single = PairedDataset::from_images(
            vec![data.pairs[0].input.clone(); 1]
                .into_iter()
                .map(|i| (i.clone(), i))
                .collect(),
            Split::Test,
        )
        .unwrap();
        let r = evaluate_with(&single, |img| Ok(img.clone())).unwrap();
        assert_eq!(r.std_ssim, 0.0);
        assert_eq!(r.std_mse, 0.0);
    }
}
