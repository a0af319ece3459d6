use llf_core::baseline::{apply_baseline, METHOD_NOTE};
use llf_core::imageio::{PairedDataset, Split};
use llf_core::model::load_model;
use llf_core::remap::RemapCurve;
use llf_core::train::{evaluate, evaluate_with, EvalReport, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{write_json, CliResult, EvalArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub model: String,
    pub data_dir: String,
    pub config: TrainConfig,
    pub metrics: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineMetrics>,
    /// Trained mean SSIM strictly above the baseline's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_beats_baseline: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub method: String,
    pub curve: String,
    pub metrics: EvalReport,
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let data = PairedDataset::load_dir(&args.data_dir, Split::Test)?;
    let metrics = evaluate(&data, &model)?;
    let baseline = match &args.baseline_curve {
        Some(path) => {
            let curve = RemapCurve::read_csv(path)?;
            let llf = model.config.llf;
            Some(BaselineMetrics {
                method: METHOD_NOTE.into(),
                curve: path.display().to_string(),
                metrics: evaluate_with(&data, |img| apply_baseline(img, &curve, &llf))?,
            })
        }
        None => None,
    };
    println!(
        "mean_ssim={:.6} std_ssim={:.6} mean_mse={:.6e} std_mse={:.6e}",
        metrics.mean_ssim, metrics.std_ssim, metrics.mean_mse, metrics.std_mse
    );
    if let Some(b) = &baseline {
        println!(
            "baseline mean_ssim={:.6} mean_mse={:.6e}",
            b.metrics.mean_ssim, b.metrics.mean_mse
        );
    }
    let output = EvalOutput {
        model: args.model.display().to_string(),
        data_dir: args.data_dir.display().to_string(),
        config: model.config,
        model_beats_baseline: baseline
            .as_ref()
            .map(|b| metrics.mean_ssim > b.metrics.mean_ssim),
        metrics,
        baseline,
    };
    write_json(&args.report, &output)
}
