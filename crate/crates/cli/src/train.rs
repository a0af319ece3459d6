use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use llf_core::imageio::{PairedDataset, Split};
use llf_core::llf::LlfConfig;
use llf_core::model::{loss_log, save_model};
use llf_core::optim::AdamConfig;
use llf_core::remap::MonotonicityReport;
use llf_core::train::{fit, NormLayer, RemapKind, TrainConfig, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::{sibling, write_file, write_json, CliError, CliResult};

/// Remap family and whether the affine layer is trained: `M|N`, `M|-`,
/// `R|N`, `R|-` (also `mlp-norm`, `orig-nonorm`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub remap: RemapKind,
    pub norm: bool,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let (remap, norm) = lower
            .split_once(['|', '-', '_'])
            .filter(|(_, n)| !n.is_empty())
            .or_else(|| lower.strip_suffix('-').map(|r| (r, "-")))
            .ok_or_else(|| {
                format!("unknown configuration {s:?}; expected one of M|N, M|-, R|N, R|-")
            })?;
        let remap = match remap {
            "m" | "mlp" => RemapKind::Mlp,
            "r" | "orig" => RemapKind::Orig,
            _ => return Err(format!("unknown remap family in {s:?}")),
        };
        let norm = match norm {
            "n" | "norm" => true,
            "-" | "nonorm" => false,
            _ => return Err(format!("unknown norm setting in {s:?}")),
        };
        Ok(Self { remap, norm })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = match self.remap {
            RemapKind::Mlp => 'M',
            RemapKind::Orig => 'R',
        };
        write!(f, "{r}|{}", if self.norm { 'N' } else { '-' })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// M|N, M|-, R|N or R|- (default M|N).
    #[arg(long)]
    pub config: Option<Variant>,
    /// JSON file with any of the other options; flags take precedence.
    #[arg(long)]
    pub config_file: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lut_levels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Remap table size used during training and export.
    #[arg(long)]
    pub table_size: Option<usize>,
    /// Model manifest path; sidecar files are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

/// Contents of `--config-file`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub config: Option<Variant>,
    pub data_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lut_levels: Option<usize>,
    pub seed: Option<u64>,
    pub table_size: Option<usize>,
    pub out: Option<PathBuf>,
}

impl TrainFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let err = |reason: String| CliError::ConfigFile {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub variant: Variant,
    pub config: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl TrainPlan {
    /// Flags over file over defaults.
    pub fn resolve(args: &TrainArgs) -> CliResult<Self> {
        let file = match &args.config_file {
            Some(p) => TrainFile::load(p)?,
            None => TrainFile::default(),
        };
        let defaults = TrainConfig::default();
        let variant = args.config.or(file.config).unwrap_or(Variant {
            remap: defaults.remap_kind,
            norm: defaults.norm_layer,
        });
        let config = TrainConfig {
            adam: AdamConfig::with_lr(args.lr.or(file.lr).unwrap_or(defaults.adam.lr)),
            epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
            llf: LlfConfig {
                lut_levels: args
                    .lut_levels
                    .or(file.lut_levels)
                    .unwrap_or(defaults.llf.lut_levels),
                ..defaults.llf
            },
            remap_kind: variant.remap,
            norm_layer: variant.norm,
            seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
            table_size: args
                .table_size
                .or(file.table_size)
                .unwrap_or(defaults.table_size),
        };
        config.validate()?;
        Ok(Self {
            variant,
            config,
            data_dir: args.data_dir.clone().or(file.data_dir),
            out: args.out.clone().or(file.out),
        })
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        format!(
            "config={} lr={} epochs={} lut_levels={} table_size={} seed={}",
            self.variant, c.adam.lr, c.epochs, c.llf.lut_levels, c.table_size, c.seed
        )
    }
}

/// Remap curve audit written by `train` and `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub config: TrainConfig,
    pub norm: Option<NormLayer>,
    pub monotonicity: MonotonicityReport,
}

impl CurveReport {
    pub fn of(model: &TrainedModel) -> Self {
        Self {
            config: model.config,
            norm: model.norm,
            monotonicity: model.monotonicity.clone(),
        }
    }
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let plan = TrainPlan::resolve(args)?;
    println!("{}", plan.summary());
    if args.dry_run {
        return Ok(());
    }
    let data_dir = plan
        .data_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("--data-dir is required".into()))?;
    let out = plan
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let data = PairedDataset::load_dir(data_dir, Split::Train)?;
    log::info!(
        "training on {} pairs from {}",
        data.len(),
        data_dir.display()
    );
    let model = fit(&data, &plan.config)?;

    save_model(&model, out)?;
    write_file(&sibling(out, "loss.jsonl"), loss_log(&model.history))?;
    model.curve()?.write_csv(&sibling(out, "curve.csv"))?;
    write_json(&sibling(out, "monotonicity.json"), &CurveReport::of(&model))?;

    println!(
        "final_loss={:.6e} monotonic={} violations={}",
        model.final_loss.unwrap_or(f64::NAN),
        model.monotonicity.is_monotonic,
        model.monotonicity.violations.len()
    );
    if !model.monotonicity.is_monotonic {
        log::warn!("learned remap is not monotonic");
    }
    Ok(())
}
