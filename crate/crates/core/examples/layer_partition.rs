//! Clusters the encoder's layers into three groups and picks one medoid layer
//! per group; those layers feed the fine adaptor.

use anyhow::Result;
use coldproxy::align1::train_stage1;
use coldproxy::align2::{adaptor_param_count, AdaptorParams};
use coldproxy::config::RunConfig;
use coldproxy::datagen::generate_corpus;
use coldproxy::pipeline::{id_table, stage2_partition};

fn main() -> Result<()> {
    let cfg = RunConfig::tiny().harmonized();
    let corpus = generate_corpus(&cfg.generation)?;
    let table = id_table(&corpus, &cfg)?;
    let stage1 = train_stage1(&corpus, &table, &cfg.encoder, &cfg.stage1)?;
    let part = stage2_partition(&stage1.encoder, &corpus, &cfg)?;
    println!("layer clusters {:?}", part.assignments);
    println!("medoid layers  {:?}", part.layers);
    let d = cfg.encoder.d_id;
    let adaptor = AdaptorParams::init(3 * cfg.encoder.d_hidden, cfg.stage2.adaptor_hidden, d, d, cfg.stage2.seed);
    println!(
        "adaptor parameters {} (encoder has {})",
        adaptor_param_count(&adaptor),
        coldproxy::diffcore::Parameters::num_parameters(&stage1.encoder.params)
    );
    Ok(())
}
