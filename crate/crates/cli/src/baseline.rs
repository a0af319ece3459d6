use llf_core::baseline::{apply_baseline, fit_gradient_remap_pairs, METHOD_NOTE};
use llf_core::imageio::{load_image, save_image, BitDepth, PairedDataset, Split};
use llf_core::llf::LlfConfig;
use llf_core::remap::{check_monotonic, MonotonicityReport};
use llf_core::train::{evaluate_with, EvalReport};
use serde::{Deserialize, Serialize};

use crate::{create_dir, write_json, BaselineArgs, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub method: String,
    pub bins: usize,
    pub lut_levels: usize,
    pub degenerate: bool,
    pub monotonicity: MonotonicityReport,
    pub metrics: EvalReport,
}

pub fn run(args: &BaselineArgs) -> CliResult<()> {
    let data = match (&args.input, &args.target, &args.data_dir) {
        (Some(i), Some(t), None) => {
            PairedDataset::from_images(vec![(load_image(i)?, load_image(t)?)], Split::Test)?
        }
        (None, None, Some(d)) => PairedDataset::load_dir(d, Split::Train)?,
        _ => unreachable!("clap enforces exactly one source"),
    };
    let llf = LlfConfig::with_lut_levels(args.lut_levels);
    llf.validate()?;
    let refs: Vec<_> = data.pairs.iter().map(|p| (&p.input, &p.target)).collect();
    let fit = fit_gradient_remap_pairs(&refs, args.bins)?;
    let monotonicity = check_monotonic(&fit.curve);
    assert!(
        monotonicity.is_monotonic,
        "baseline curve must be monotonic"
    );

    create_dir(&args.out)?;
    fit.curve.write_csv(&args.out.join("baseline_curve.csv"))?;
    let metrics = evaluate_with(&data, |img| apply_baseline(img, &fit.curve, &llf))?;
    if args.input.is_some() {
        let out = apply_baseline(&data.pairs[0].input, &fit.curve, &llf)?;
        save_image(
            &out,
            &args.out.join("baseline_output.pgm"),
            BitDepth::Sixteen,
        )?;
    }
    println!(
        "baseline mean_ssim={:.6} mean_mse={:.6e} degenerate={}",
        metrics.mean_ssim, metrics.mean_mse, fit.degenerate
    );
    let report = BaselineReport {
        method: METHOD_NOTE.into(),
        bins: args.bins,
        lut_levels: args.lut_levels,
        degenerate: fit.degenerate,
        monotonicity,
        metrics,
    };
    write_json(&args.out.join("baseline_report.json"), &report)
}
