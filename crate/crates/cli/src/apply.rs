use llf_core::imageio::{load_image, save_image};
use llf_core::llf::llf_fast_dump;
use llf_core::model::load_model;

use crate::{create_dir, ApplyArgs, CliResult};

pub fn run(args: &ApplyArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let input = load_image(&args.input)?;
    let out = match &args.dump_pyramid {
        Some(dir) => {
            create_dir(dir)?;
            let pipe = model.pipeline();
            let table = pipe.remap.table(pipe.table_size)?;
            pipe.norm
                .apply(&llf_fast_dump(&input, &table, &pipe.llf, dir)?)
        }
        None => model.apply(&input)?,
    };
    save_image(&out, &args.output, args.depth)?;
    Ok(())
}
