use llf_core::imageio::{save_image, synth_pair, BitDepth, SynthStyleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{create_dir, write_json, CliError, CliResult, SynthArgs};

/// `manifest.json` of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub style: SynthStyleParams,
    pub pairs: Vec<SynthEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub input: String,
    pub target: String,
    pub phantom_seed: u64,
}

/// Per-pair phantom seeds drawn from the dataset seed.
pub fn phantom_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

pub fn run(args: &SynthArgs) -> CliResult<()> {
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let style = SynthStyleParams {
        sigma: args.sigma,
        alpha: args.alpha,
        beta: args.beta,
        gamma: args.gamma,
        omega: args.omega,
    };
    style.remap()?;
    create_dir(&args.out_dir)?;
    let mut pairs = Vec::with_capacity(args.count);
    for (i, phantom_seed) in phantom_seeds(args.seed, args.count).into_iter().enumerate() {
        let (input, target) = synth_pair(phantom_seed, args.size, args.size, &style)?;
        let entry = SynthEntry {
            input: format!("input_{i:04}.{}", args.format),
            target: format!("target_{i:04}.{}", args.format),
            phantom_seed,
        };
        save_image(&input, &args.out_dir.join(&entry.input), BitDepth::Sixteen)?;
        save_image(
            &target,
            &args.out_dir.join(&entry.target),
            BitDepth::Sixteen,
        )?;
        pairs.push(entry);
    }
    let manifest = SynthManifest {
        seed: args.seed,
        width: args.size,
        height: args.size,
        style,
        pairs,
    };
    write_json(&args.out_dir.join("manifest.json"), &manifest)?;
    println!("wrote {} pairs to {}", args.count, args.out_dir.display());
    Ok(())
}
