//! Generates the synthetic biased dataset and reports how the two reference
//! oracles score on it.
//!
//! ```text
//! cargo run --release --example gen_data -- /tmp/privpool-data 0.9
//! ```

use std::path::PathBuf;

use privpool::data::{generate, Dataset, GenConfig, KeypointPatchOracle, Split, TextureOracle};

fn main() -> privpool::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "privpool-data".into()));
    let bias = args.next().map(|b| b.parse().expect("bias must be a number")).unwrap_or(0.9);
    let cfg = GenConfig { bias, ..GenConfig::default() };

    let manifest = generate(&cfg, &out, true)?;
    println!("wrote {} classes to {}", manifest.num_classes(), out.display());

    let ds = Dataset::open(&out)?;
    let train = ds.load_split(Split::Train)?;
    let texture = TextureOracle::fit(&train, manifest.num_classes());
    let patch = KeypointPatchOracle::fit(&train, manifest.num_classes());
    println!("{:<11} {:>6} {:>9} {:>9}", "split", "n", "texture", "keypoint");
    for split in Split::ALL {
        let samples = ds.load_split(split)?;
        println!(
            "{:<11} {:>6} {:>9.3} {:>9.3}",
            split.as_str(),
            samples.len(),
            texture.accuracy(&samples),
            patch.accuracy(&samples)
        );
    }
    Ok(())
}
