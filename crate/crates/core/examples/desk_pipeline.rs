//! Runs the desk-scale pipeline for one seed and prints per-config accuracy.
//!
//! `cargo run --release -p udta-core --example desk_pipeline -- [seed] [config...]`

use std::time::Instant;

use udta::arch::Config;
use udta::pipeline::{run_full, PipelineConfig};

fn main() -> udta::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let configs: Vec<Config> = std::env::args().skip(2).map(|s| Config::parse(&s)).collect::<udta::Result<_>>()?;
    let configs = if configs.is_empty() { Config::TABLE.to_vec() } else { configs };
    let cfg = PipelineConfig::desk(seed);
    let start = Instant::now();
    let mut sink = |m: &udta::train::EpochMetrics| {
        eprintln!(
            "{:>16} {:>3} loss {:.4} top1 {:?} bb_flops {} ({} ms)",
            m.stage, m.epoch, m.loss, m.top1, m.backbone_backward_flops, m.wall_ms
        )
    };
    let out = run_full(&cfg, &configs, &mut sink)?;
    println!("ae mse trained {:?} random {:?}", out.autoencoders.trained_mse, out.autoencoders.random_mse);
    for r in &out.runs {
        println!("{:>18} top1 {:.4}", r.config.label(), r.report.final_top1.unwrap_or(f64::NAN));
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
