//! Generates a synthetic corpus and writes it to disk.
//!
//! `cargo run --example generate_corpus -- [out_dir] [--irregular]`

use anyhow::Result;
use coldproxy::datagen::{generate_corpus, save_corpus, split_train_eval, GenConfig, IdSpaceMode};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.iter().find(|a| !a.starts_with("--")).cloned().unwrap_or_else(|| "corpus".into());
    let mut cfg = GenConfig::default();
    if args.iter().any(|a| a == "--irregular") {
        cfg.id_space_mode = IdSpaceMode::Irregular;
    }
    let corpus = generate_corpus(&cfg)?;
    let splits = split_train_eval(&corpus)?;
    println!(
        "{} users, {} items ({} cold), {} interactions",
        corpus.users.len(),
        corpus.items.len(),
        corpus.cold_items().count(),
        corpus.interactions.len()
    );
    println!(
        "train {} / eval warm {} / eval cold {}",
        splits.train.len(),
        splits.eval_warm.len(),
        splits.eval_cold.len()
    );
    let ctr = corpus.interactions.iter().map(|i| f64::from(i.label)).sum::<f64>() / corpus.interactions.len() as f64;
    println!("click rate {ctr:.3}, config hash {}", corpus.config_hash());
    save_corpus(&corpus, out.as_ref())?;
    println!("wrote {out}/");
    Ok(())
}
