//! Trains every ranker variant on one seed and prints cold/warm AUC.

use anyhow::Result;
use coldproxy::config::RunConfig;
use coldproxy::datagen::generate_corpus;
use coldproxy::pipeline::{build_seed_artifacts, prepare, train_and_eval};
use coldproxy::ranker::Variant;

fn main() -> Result<()> {
    let cfg = RunConfig::tiny().harmonized();
    let corpus = generate_corpus(&cfg.generation)?;
    let (splits, table) = prepare(&corpus, &cfg)?;
    let arts = build_seed_artifacts(&corpus, &table, &cfg)?;
    println!("{:<22} {:>8} {:>8}", "variant", "cold", "warm");
    for v in Variant::ALL {
        let (_, auc) = train_and_eval(&corpus, &splits, &arts, &cfg, v, &["cold", "warm"])?;
        println!("{:<22} {:>8.4} {:>8.4}", v.to_string(), auc["cold"], auc["warm"]);
    }
    Ok(())
}
