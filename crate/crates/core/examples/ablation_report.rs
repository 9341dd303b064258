//! Multi-seed ablation over all variants, printed as a markdown table.
//!
//! `cargo run --release --example ablation_report -- [n_seeds] [--desk]`
//! The desk preset takes about two minutes per seed on one core.

use anyhow::Result;
use coldproxy::config::RunConfig;
use coldproxy::datagen::generate_corpus;
use coldproxy::evalkit::run_ablation;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = if args.iter().any(|a| a == "--desk") {
        RunConfig::desk()
    } else {
        RunConfig::tiny()
    }
    .harmonized();
    let n: u64 = args.iter().find_map(|a| a.parse().ok()).unwrap_or(2);
    let corpus = generate_corpus(&cfg.generation)?;
    let seeds: Vec<u64> = (1..=n).collect();
    let report = run_ablation(&corpus, &cfg, &seeds)?;
    println!("{}", report.to_markdown());
    Ok(())
}
