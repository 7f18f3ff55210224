//! Trains every pooling mode on the synthetic biased dataset and compares
//! accuracy on seen (cis) and unseen (trans) background contexts.
//!
//! ```text
//! cargo run --release --example bias_experiment -- [epochs] [seeds] [modes] [train-json] [model-json]
//! ```
//!
//! Defaults are the settings of the acceptance comparison. The optional JSON
//! objects override fields of the training and model configurations, e.g.
//! `'{"lr":0.02,"loss":{"keypoint_supervision":false}}'`.

use privpool::experiment::{mean, run_trial, with_overrides, ComparisonConfig, SplitData};
use privpool::pooling::PoolMode;

fn main() -> privpool::Result<()> {
    let mut cfg = ComparisonConfig::default();
    let mut args = std::env::args().skip(1);
    if let Some(e) = args.next() {
        cfg.train_base.epochs = e.parse().expect("epochs");
    }
    if let Some(s) = args.next() {
        cfg.seeds = s.parse().expect("seeds");
    }
    let modes: Vec<PoolMode> = match args.next() {
        Some(list) => list.split(',').map(|m| m.parse().expect("pool mode")).collect(),
        None => PoolMode::ALL.to_vec(),
    };
    let json = |a: Option<String>| -> serde_json::Value {
        a.map(|s| serde_json::from_str(&s).expect("JSON object")).unwrap_or_default()
    };
    let train_over = json(args.next());
    let model_over = json(args.next());
    cfg.train_base = with_overrides(&cfg.train_base, &train_over)?;

    let data = SplitData::generate(&cfg.data)?;
    println!("{:<8} {:>4} {:>7} {:>7} {:>7} {:>7} {:>6}", "mode", "seed", "cis", "trans", "ce", "attn", "secs");
    for mode in modes {
        let mut rows = Vec::new();
        for seed in 0..cfg.seeds {
            let model = with_overrides(&cfg.model(mode), &model_over)?;
            let r = run_trial(mode.as_str(), &data, &model, &cfg.train(seed))?;
            println!(
                "{:<8} {:>4} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>6.1}",
                r.label, r.seed, r.cis, r.trans, r.final_ce, r.final_attn, r.seconds
            );
            rows.push(r);
        }
        println!(
            "{:<8} mean {:>7.3} {:>7.3}",
            mode.as_str(),
            mean(rows.iter().map(|r| r.cis)),
            mean(rows.iter().map(|r| r.trans))
        );
    }
    Ok(())
}
