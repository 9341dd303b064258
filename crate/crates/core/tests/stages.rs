//! Behavioural checks of individual stages on small or default corpora.

use std::collections::BTreeMap;

use coldproxy::align1::{preprocess_id_table, retrieval_eval, train_stage1, IdEmbeddingTable};
use coldproxy::align2::{emit_fine_proxies, gate_fuse, partition_layers, pooled_cache, AdaptorParams};
use coldproxy::config::RunConfig;
use coldproxy::datagen::{generate_corpus, split_train_eval, Corpus, GenConfig, IdSpaceMode, IdTableEntry, Item};
use coldproxy::diffcore::{ops, Parameters};
use coldproxy::encoder::{Encoder, EncoderConfig};
use coldproxy::evalkit::{auc, kmeans_silhouette, project_2d};
use coldproxy::pipeline::{build_seed_artifacts, id_table, prepare, probe_items, train_and_eval, with_model_seed};
use coldproxy::proxystore::{batch_generate, checksum, GenerationArtifacts};
use coldproxy::ranker::{train_ranker, ItemInputs, Variant};
use coldproxy::ProxyMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ops::l2_normalize(&v).unwrap().0
}

fn tiny() -> (RunConfig, Corpus) {
    let cfg = RunConfig::tiny().harmonized();
    let corpus = generate_corpus(&cfg.generation).unwrap();
    (cfg, corpus)
}

#[test]
fn oracle_features_reach_the_planted_ceiling() {
    // logistic regression on [u * v, scalars], which can express u . v + w . s exactly
    let corpus = generate_corpus(&GenConfig::default()).unwrap();
    let splits = split_train_eval(&corpus).unwrap();
    let feats = |k: usize| {
        let it = &corpus.interactions[k];
        let u = &corpus.user(it.user_id).latent;
        let v = &corpus.item(it.item_id).latent;
        let mut f: Vec<f64> = u.iter().zip(v).map(|(a, b)| a * b).collect();
        f.extend_from_slice(&it.context.scalars);
        f
    };
    let train: Vec<(Vec<f64>, f64)> = splits
        .train
        .indices
        .iter()
        .map(|&k| (feats(k), f64::from(corpus.interactions[k].label)))
        .collect();
    let dim = train[0].0.len();
    let mut w = vec![0.0; dim + 1];
    for _ in 0..300 {
        let mut g = vec![0.0; dim + 1];
        for (x, y) in &train {
            let p = ops::sigmoid(ops::dot(&w[..dim], x) + w[dim]);
            ops::axpy(p - y, x, &mut g[..dim]);
            g[dim] += p - y;
        }
        ops::axpy(-1.0 / train.len() as f64, &g, &mut w);
    }
    let eval = splits.eval_warm.union(&splits.eval_cold);
    let scores: Vec<f64> = eval.indices.iter().map(|&k| ops::dot(&w[..dim], &feats(k)) + w[dim]).collect();
    let labels: Vec<u8> = eval.indices.iter().map(|&k| corpus.interactions[k].label).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!(a >= 0.80, "oracle AUC {a}");
}

#[test]
fn random_proxies_retrieve_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1000;
    let entries: Vec<IdTableEntry> = (0..n)
        .map(|i| IdTableEntry {
            item_id: i,
            e_raw: unit(&mut rng, 16),
            update_count: 10,
        })
        .collect();
    let table: IdEmbeddingTable = preprocess_id_table(&entries, 5).unwrap();
    let proxies: ProxyMap = (0..n).map(|i| (i, unit(&mut rng, 16))).collect();
    let top1 = retrieval_eval(&proxies, &table, 1).unwrap();
    let p = 1.0 / f64::from(n);
    let sd = (p * (1.0 - p) / f64::from(n)).sqrt();
    assert!((top1 - p).abs() <= 3.0 * sd, "top-1 {top1}");
}

#[test]
fn stage1_covers_cold_items_with_unit_proxies() {
    let (cfg, corpus) = tiny();
    let table = id_table(&corpus, &cfg).unwrap();
    let out = train_stage1(&corpus, &table, &cfg.encoder, &cfg.stage1).unwrap();
    assert!(out.epoch_losses.last().unwrap() <= &out.epoch_losses[0]);
    assert_eq!(out.proxies.len(), corpus.items.len());
    for item in corpus.cold_items() {
        assert!(table.target(item.item_id).is_none());
        let p = &out.proxies[&item.item_id];
        assert!((ops::dot(p, p).sqrt() - 1.0).abs() < 1e-6);
    }
}

fn encoder(n_layers: usize, vocab: usize) -> Encoder {
    Encoder::new(
        EncoderConfig {
            n_layers,
            vocab_size: vocab,
            ..EncoderConfig::default()
        },
        1,
    )
    .unwrap()
}

#[test]
fn three_layer_encoder_keeps_every_layer() {
    let (_, corpus) = tiny();
    let enc = encoder(3, corpus.config.vocab_size);
    let part = partition_layers(&enc, &probe_items(&corpus, 32, 1), 1, 100).unwrap();
    assert_eq!(part.layers, vec![1, 2, 3]);
}

#[test]
fn default_partition_is_ordered() {
    let corpus = generate_corpus(&GenConfig::default()).unwrap();
    let enc = encoder(8, corpus.config.vocab_size);
    let probe = probe_items(&corpus, 64, 1);
    let part = partition_layers(&enc, &probe, 1, 100).unwrap();
    let l = &part.layers;
    assert!(l[0] < l[1] && l[1] < l[2], "{l:?}");
    println!("layers {l:?}, span {}", l[2] - l[0]);
}

#[test]
fn fine_proxies_cover_cold_items_and_depend_only_on_content() {
    let (_, corpus) = tiny();
    let enc = encoder(4, corpus.config.vocab_size);
    let part = partition_layers(&enc, &probe_items(&corpus, 32, 1), 1, 100).unwrap();
    let mut items = corpus.items.clone();
    let twin = Item {
        item_id: items.len() as u32,
        ..items.last().unwrap().clone()
    };
    items.push(twin.clone());
    let pooled = pooled_cache(&enc, &items, &part).unwrap();
    let coarse: ProxyMap = items
        .iter()
        .map(|i| (i.item_id, enc.proxy(&enc.build_prompt(i).unwrap()).unwrap()))
        .collect();
    let d = enc.config.d_id;
    let mut p = AdaptorParams::init(3 * enc.config.d_hidden, 8, d, d, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    p.wg.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
    let fine = emit_fine_proxies(&items, &pooled, &coarse, &p).unwrap();
    assert!(corpus.cold_items().all(|i| fine[&i.item_id].len() == d));
    assert_eq!(fine[&twin.item_id], fine[&(twin.item_id - 1)]);
}

#[test]
fn gate_matches_straight_line_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, df) = (5, 5);
    let mut p = AdaptorParams::init(6, 4, d, df, 0);
    for x in p.wg.data_mut().iter_mut().chain(p.wc.data_mut()) {
        *x = rng.random_range(-1.0..1.0);
    }
    for _ in 0..20 {
        let c = unit(&mut rng, d);
        let raw: Vec<f64> = (0..df).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (fine, gate) = gate_fuse(&c, &raw, &p).unwrap();
        let cat: Vec<f64> = c.iter().chain(&raw).copied().collect();
        for j in 0..df {
            let mut s = 0.0;
            for (i, x) in cat.iter().enumerate() {
                s += x * p.wg.data()[i * df + j];
            }
            let r = 1.0 / (1.0 + (-s).exp());
            let mut f = r * raw[j];
            for (i, x) in c.iter().enumerate() {
                f += x * p.wc.data()[i * df + j];
            }
            assert!((gate[j] - r).abs() < 1e-12);
            assert!((fine[j] - f).abs() < 1e-12);
        }
    }
}

#[test]
fn clustered_projection_separates_better_than_irregular() {
    let sil = |mode| {
        let corpus = generate_corpus(&GenConfig {
            id_space_mode: mode,
            ..GenConfig::default()
        })
        .unwrap();
        let table = preprocess_id_table(&corpus.id_table, 5).unwrap();
        let topics: BTreeMap<u32, u32> = corpus.items.iter().map(|i| (i.item_id, i.topic_id)).collect();
        let pts = project_2d(&table.targets, &topics).unwrap();
        let flat: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.x, p.y]).collect();
        kmeans_silhouette(&flat, 3, 0).unwrap()
    };
    let (c, i) = (sil(IdSpaceMode::Clustered), sil(IdSpaceMode::Irregular));
    assert!(c > i, "clustered {c} irregular {i}");
}

#[test]
fn ranker_loss_mostly_decreases() {
    // base needs no upstream artifacts, so this runs on the default corpus
    let cfg = RunConfig::desk().harmonized();
    let corpus = generate_corpus(&cfg.generation).unwrap();
    let splits = split_train_eval(&corpus).unwrap();
    let inputs = ItemInputs::build(Variant::Base, corpus.items.len(), None, None, None).unwrap();
    let mut fractions: Vec<f64> = (1..=3)
        .map(|seed| {
            let mut rc = with_model_seed(&cfg, seed).ranker;
            rc.variant = Variant::Base;
            let t = train_ranker(&corpus, &splits.train, &inputs, &rc, cfg.stage2.adaptor_hidden).unwrap();
            let pairs = t.epoch_losses.windows(2).count();
            t.epoch_losses.windows(2).filter(|w| w[1] <= w[0]).count() as f64 / pairs as f64
        })
        .collect();
    fractions.sort_by(f64::total_cmp);
    assert!(fractions[1] >= 0.8, "{fractions:?}");
}

#[test]
fn batch_generation_is_complete_and_repeatable() {
    let (cfg, corpus) = tiny();
    let (splits, table) = prepare(&corpus, &cfg).unwrap();
    let arts = build_seed_artifacts(&corpus, &table, &cfg).unwrap();
    let (trained, _) = train_and_eval(&corpus, &splits, &arts, &cfg, Variant::V5StructureReuse, &[]).unwrap();
    let adaptor = trained.ranker.params.adaptor.as_ref().unwrap();
    let gen = GenerationArtifacts {
        encoder: &arts.stage1.encoder,
        partition: &arts.partition,
        adaptor,
        expected_stage1_hash: arts.stage1.encoder.params.content_hash(),
        stage2_hash: adaptor.content_hash(),
    };
    let cold: Vec<Item> = corpus.cold_items().cloned().collect();
    let a = batch_generate(&cold, &gen, 1).unwrap();
    let b = batch_generate(&cold, &gen, 1).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.p_fine.is_some() && !r.p_coarse.is_empty()));

    let stale = GenerationArtifacts {
        expected_stage1_hash: "0".repeat(64),
        ..gen
    };
    assert!(matches!(
        batch_generate(&cold, &stale, 1),
        Err(coldproxy::Error::HashMismatch(_))
    ));
}

#[test]
fn checksum_tracks_every_byte() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bytes: Vec<u8> = (0..4096).map(|_| rng.random()).collect();
    let base = checksum(&bytes);
    assert_eq!(base, checksum(&bytes.clone()));
    for _ in 0..64 {
        let mut m = bytes.clone();
        let k = rng.random_range(0..m.len());
        m[k] ^= 1 << rng.random_range(0..8);
        assert_ne!(checksum(&m), base);
    }
}
