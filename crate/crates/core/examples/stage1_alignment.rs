//! Coarse alignment: trains the content encoder against the frozen ID table
//! and reports how well the proxies retrieve their own ID embedding.

use anyhow::Result;
use coldproxy::align1::{mean_cosine, retrieval_eval, train_stage1};
use coldproxy::config::RunConfig;
use coldproxy::datagen::generate_corpus;
use coldproxy::pipeline::id_table;

fn main() -> Result<()> {
    let cfg = RunConfig::tiny().harmonized();
    let corpus = generate_corpus(&cfg.generation)?;
    let table = id_table(&corpus, &cfg)?;
    let out = train_stage1(&corpus, &table, &cfg.encoder, &cfg.stage1)?;
    for (e, l) in out.epoch_losses.iter().enumerate() {
        println!("epoch {:>2} loss {l:.4}", e + 1);
    }
    println!("top-1 retrieval {:.3}", retrieval_eval(&out.proxies, &table, 1)?);
    println!("top-5 retrieval {:.3}", retrieval_eval(&out.proxies, &table, 5)?);
    println!("mean cosine     {:.3}", mean_cosine(&out.proxies, &table)?);
    Ok(())
}
