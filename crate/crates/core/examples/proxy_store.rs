//! Generates coarse and fine proxies for cold items, stores them, and looks
//! one up again.

use anyhow::Result;
use coldproxy::config::RunConfig;
use coldproxy::datagen::{generate_corpus, Item};
use coldproxy::diffcore::Parameters;
use coldproxy::pipeline::{build_seed_artifacts, prepare, train_and_eval};
use coldproxy::proxystore::{batch_generate, write_proxies, GenerationArtifacts, ProxyStore};
use coldproxy::ranker::Variant;

fn main() -> Result<()> {
    let cfg = RunConfig::tiny().harmonized();
    let corpus = generate_corpus(&cfg.generation)?;
    let (splits, table) = prepare(&corpus, &cfg)?;
    let arts = build_seed_artifacts(&corpus, &table, &cfg)?;
    let (trained, _) = train_and_eval(&corpus, &splits, &arts, &cfg, Variant::V5StructureReuse, &[])?;
    let adaptor = trained.ranker.params.adaptor.as_ref().expect("v5 has an adaptor");

    let encoder_hash = arts.stage1.encoder.params.content_hash();
    let gen = GenerationArtifacts {
        encoder: &arts.stage1.encoder,
        partition: &arts.partition,
        adaptor,
        expected_stage1_hash: encoder_hash,
        stage2_hash: adaptor.content_hash(),
    };
    let cold: Vec<Item> = corpus.cold_items().cloned().collect();
    let records = batch_generate(&cold, &gen, 1)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("store.bin");
    let manifest = write_proxies(&records, &path)?;
    println!(
        "{} records, {} bytes each, sha256 {}",
        manifest.count, manifest.record_width, manifest.checksum
    );
    let store = ProxyStore::open(&path)?;
    let rec = store.lookup(cold[0].item_id)?;
    println!("item {} v{} coarse[..4] {:?}", rec.item_id, rec.version, &rec.p_coarse[..4]);
    Ok(())
}
