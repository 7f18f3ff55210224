//! Generates the default biased dataset in memory, trains one model and
//! evaluates it on the cis and trans test splits, with and without
//! attention crop-refeed. The checkpoint and metrics go to the output
//! directory.
//!
//! ```text
//! cargo run --release --example train_and_eval -- [pool] [epochs] [out-dir]
//! ```

use std::path::PathBuf;

use privpool::data::Split;
use privpool::eval::{evaluate, EvalOptions};
use privpool::experiment::{ComparisonConfig, SplitData};
use privpool::model::Model;
use privpool::pooling::PoolMode;
use privpool::train::{train, CHECKPOINT_DIR};

fn main() -> privpool::Result<()> {
    let mut args = std::env::args().skip(1);
    let pool: PoolMode = args.next().map(|p| p.parse().expect("pool mode")).unwrap_or(PoolMode::AvgPr);
    let mut cfg = ComparisonConfig::default();
    if let Some(e) = args.next() {
        cfg.train_base.epochs = e.parse().expect("epochs");
    }
    let out = PathBuf::from(args.next().unwrap_or_else(|| "privpool-run".into()));

    let data = SplitData::generate(&cfg.data)?;
    let mut model = Model::init(cfg.model(pool), 0)?;
    println!("{pool}: {} parameters, {} epochs", model.num_params(), cfg.train_base.epochs);
    let summary = train(&mut model, data.get(Split::Train), &cfg.train(0), Some(&out))?;
    println!(
        "ce {:.3} -> {:.3}, attention loss {:.3} -> {:.3} over {} iterations",
        summary.head_mean(10, |l| l.ce),
        summary.tail_mean(10, |l| l.ce),
        summary.head_mean(10, |l| l.attn),
        summary.tail_mean(10, |l| l.attn),
        summary.iterations
    );
    for split in [Split::TestCis, Split::TestTrans] {
        let plain = evaluate(&model, data.get(split), split.as_str(), &EvalOptions::default())?;
        print!("{:<10} top-1 {:.3} mean per-class {:.3}", split.as_str(), plain.top1, plain.mean_per_class);
        if pool.uses_attention() {
            let opts = EvalOptions { crop_refeed: true, ..EvalOptions::default() };
            let crop = evaluate(&model, data.get(split), split.as_str(), &opts)?;
            print!("; with crop-refeed {:.3}", crop.top1);
        }
        println!();
    }
    println!("checkpoint in {}", out.join(CHECKPOINT_DIR).display());
    Ok(())
}
