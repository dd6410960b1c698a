//! Desk-scale end-to-end run on a synthetic corpus.
//!
//! `cargo run --release -p uavtype-core --example desk_run -- [epochs] [hidden]`

use std::time::Instant;

use uavtype_core::config::RunConfig;
use uavtype_core::eval::class_metrics;
use uavtype_core::pipeline::{load_corpus, run_single};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut config = RunConfig::default();
    // same training settings as configs/desk.toml
    config.train.epochs = 30;
    config.train.hidden = 64;
    if let Some(e) = args.get(1) {
        config.train.epochs = e.parse().expect("epochs");
    }
    if let Some(h) = args.get(2) {
        config.train.hidden = h.parse().expect("hidden");
    }
    let start = Instant::now();
    let corpus = load_corpus(&config).expect("corpus");
    println!("corpus: {} flights in {:.1?}", corpus.len(), start.elapsed());
    let report = run_single(&config, &corpus).expect("run");
    let cm = report.pooled;
    println!("pooled confusion: {:?}", cm.0);
    for (c, m) in class_metrics(&cm).iter().enumerate() {
        println!("class {c}: P {:.3} R {:.3} F {:.3}", m.precision, m.recall, m.f);
    }
    println!(
        "macro F {:.4} ± {:.4} in {:.1?}",
        report.aggregate.macro_f.mean,
        report.aggregate.macro_f.std,
        start.elapsed()
    );
}
