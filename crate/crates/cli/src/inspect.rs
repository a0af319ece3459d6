use llf_core::model::load_model;

use crate::train::CurveReport;
use crate::{write_json, CliResult, InspectArgs};

pub fn run(args: &InspectArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    model.curve()?.write_csv(&args.curve)?;
    let report = CurveReport::of(&model);
    write_json(&args.report, &report)?;
    let m = &report.monotonicity;
    println!(
        "monotonic={} violations={}",
        m.is_monotonic,
        m.violations.len()
    );
    Ok(())
}
