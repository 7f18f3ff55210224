//! Writes input, overlay, mean-attention and per-map PNGs for a few test
//! samples. Uses the checkpoint given on the command line, or trains a
//! short avg_pr model when none is given.
//!
//! ```text
//! cargo run --release --example attention_export -- [out-dir] [checkpoint-dir]
//! ```

use std::path::PathBuf;

use privpool::data::{Split, KEYPOINT_NAMES};
use privpool::eval::{export_attention, DEFAULT_BOX_THRESHOLD};
use privpool::experiment::{ComparisonConfig, SplitData};
use privpool::model::Model;
use privpool::pooling::PoolMode;
use privpool::train::train;

const SAMPLES: usize = 6;
const QUICK_EPOCHS: usize = 20;

fn main() -> privpool::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "privpool-attention".into()));
    let cfg = ComparisonConfig::default();
    let data = SplitData::generate(&cfg.data)?;
    let model = match args.next() {
        Some(ckpt) => Model::load(&PathBuf::from(ckpt))?,
        None => {
            let mut model = Model::init(cfg.model(PoolMode::AvgPr), 0)?;
            let train_cfg = privpool::train::TrainConfig { epochs: QUICK_EPOCHS, ..cfg.train(0) };
            println!("training avg_pr for {QUICK_EPOCHS} epochs");
            train(&mut model, data.get(Split::Train), &train_cfg, None)?;
            model
        }
    };
    let names: Vec<String> = KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect();
    let samples = &data.get(Split::TestTrans)[..SAMPLES];
    let boxes = export_attention(&model, samples, &names, &out, DEFAULT_BOX_THRESHOLD)?;
    for (i, b) in boxes.iter().enumerate() {
        println!("sample {i}: attention box x {}..{}, y {}..{}", b.x0, b.x1, b.y0, b.y1);
    }
    println!("wrote {} images to {}", std::fs::read_dir(&out).map(|d| d.count()).unwrap_or(0), out.display());
    Ok(())
}
