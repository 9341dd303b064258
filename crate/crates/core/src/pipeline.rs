//! In-memory orchestration of the two alignment stages and the ranker.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align1::{self, preprocess_id_table, IdEmbeddingTable, Stage1Output};
use crate::align2::{partition_layers, pooled_cache, LayerPartition};
use crate::config::RunConfig;
use crate::datagen::{split_train_eval, Corpus, InteractionSet, Item, Splits};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evalkit::auc;
use crate::ranker::{examples, fit_content_mapper, train_ranker, ItemInputs, Ranker, TrainedRanker, Variant};
use crate::ProxyMap;

/// Everything upstream of the ranker that depends on the model seed.
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub stage1: Stage1Output,
    pub partition: LayerPartition,
    /// `[z^(l1), z^(l2), z^(l3)]` from the frozen Stage-1 encoder.
    pub pooled: ProxyMap,
    /// Final-layer pooled states of an encoder that never saw the ID table.
    pub content: ProxyMap,
    /// `content` regressed onto the ID targets.
    pub mapped: ProxyMap,
}

/// Probe set for the layer partition: `size` warm items drawn by `seed`.
pub fn probe_items(corpus: &Corpus, size: usize, seed: u64) -> Vec<Item> {
    let mut warm: Vec<&Item> = corpus.warm_items().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9B0B_E5E7);
    warm.shuffle(&mut rng);
    warm.into_iter().take(size).cloned().collect()
}

pub fn content_features(corpus: &Corpus, cfg: &RunConfig) -> Result<ProxyMap> {
    let enc = Encoder::new(cfg.encoder.clone(), cfg.stage1.seed)?;
    let last = enc.config.n_layers;
    corpus
        .items
        .iter()
        .map(|item| {
            let z = enc.pooled_layers(&enc.build_prompt(item)?, &[last])?;
            Ok((item.item_id, z.into_iter().next().unwrap_or_default()))
        })
        .collect()
}

/// Frozen content features regressed onto the ID targets.
pub fn mapped_content(content: &ProxyMap, table: &IdEmbeddingTable, cfg: &RunConfig) -> Result<ProxyMap> {
    fit_content_mapper(
        content,
        table,
        cfg.ranker.mapper_hidden,
        cfg.ranker.mapper_epochs,
        cfg.ranker.lr,
        cfg.ranker.seed,
    )
}

pub fn id_table(corpus: &Corpus, cfg: &RunConfig) -> Result<IdEmbeddingTable> {
    preprocess_id_table(&corpus.id_table, cfg.stage1.tau)
}

pub fn stage2_partition(encoder: &Encoder, corpus: &Corpus, cfg: &RunConfig) -> Result<LayerPartition> {
    cfg.stage2.validate()?;
    let probe = probe_items(corpus, cfg.stage2.probe_size, cfg.stage2.seed);
    partition_layers(encoder, &probe, cfg.stage2.seed, cfg.stage2.kmeans_max_iters)
}

pub fn build_seed_artifacts(corpus: &Corpus, table: &IdEmbeddingTable, cfg: &RunConfig) -> Result<SeedArtifacts> {
    let stage1 = align1::train_stage1(corpus, table, &cfg.encoder, &cfg.stage1)?;
    let partition = stage2_partition(&stage1.encoder, corpus, cfg)?;
    let pooled = pooled_cache(&stage1.encoder, &corpus.items, &partition)?;
    let content = content_features(corpus, cfg)?;
    let mapped = mapped_content(&content, table, cfg)?;
    Ok(SeedArtifacts {
        seed: cfg.stage1.seed,
        stage1,
        partition,
        pooled,
        content,
        mapped,
    })
}

pub fn variant_inputs(corpus: &Corpus, arts: &SeedArtifacts, variant: Variant) -> Result<ItemInputs> {
    let content = match variant {
        Variant::V2MlpMap => Some(&arts.mapped),
        _ => Some(&arts.content),
    };
    ItemInputs::build(
        variant,
        corpus.items.len(),
        content,
        Some(&arts.stage1.proxies),
        Some(&arts.pooled),
    )
}

/// Inputs for `variant` computed from individually loaded stage artifacts.
/// `encoder` is required from v3 on and `partition` from v4 on.
pub fn item_inputs(
    corpus: &Corpus,
    table: &IdEmbeddingTable,
    cfg: &RunConfig,
    variant: Variant,
    encoder: Option<&Encoder>,
    partition: Option<&LayerPartition>,
) -> Result<ItemInputs> {
    let content = match variant {
        Variant::V1ContentFeature => Some(content_features(corpus, cfg)?),
        Variant::V2MlpMap => Some(mapped_content(&content_features(corpus, cfg)?, table, cfg)?),
        _ => None,
    };
    let need_encoder = || encoder.ok_or_else(|| Error::Precondition(format!("{variant} needs the Stage-1 encoder")));
    let coarse = if variant.uses_coarse() {
        Some(align1::coarse_proxies(need_encoder()?, corpus)?)
    } else {
        None
    };
    let pooled = if variant.uses_fine() {
        let part = partition.ok_or_else(|| Error::Precondition(format!("{variant} needs the layer partition")))?;
        Some(pooled_cache(need_encoder()?, &corpus.items, part)?)
    } else {
        None
    };
    ItemInputs::build(variant, corpus.items.len(), content.as_ref(), coarse.as_ref(), pooled.as_ref())
}

/// Evaluation split by name: `cold`, `warm` or `global` (their union).
pub fn split_by_name(splits: &Splits, name: &str) -> Result<InteractionSet> {
    match name {
        "cold" => Ok(splits.eval_cold.clone()),
        "warm" => Ok(splits.eval_warm.clone()),
        "global" => Ok(splits.eval_warm.union(&splits.eval_cold)),
        other => Err(Error::Input(format!("unknown split `{other}` (cold|warm|global)"))),
    }
}

/// One scored evaluation row.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreRow {
    pub user_id: u32,
    pub item_id: u32,
    pub split: String,
    pub score: f64,
    pub label: u8,
}

pub fn score_split(
    ranker: &Ranker,
    inputs: &ItemInputs,
    corpus: &Corpus,
    set: &InteractionSet,
    split: &str,
) -> Result<Vec<ScoreRow>> {
    if set.is_empty() {
        return Err(Error::EmptySplit(format!("eval split `{split}`")));
    }
    let ex = examples(corpus, set);
    let scores = ranker.predict(inputs, &ex)?;
    Ok(ex
        .iter()
        .zip(scores)
        .map(|(e, score)| ScoreRow {
            user_id: e.user,
            item_id: e.item,
            split: split.to_string(),
            score,
            label: e.label,
        })
        .collect())
}

pub fn split_auc(rows: &[ScoreRow]) -> Result<f64> {
    let s: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let y: Vec<u8> = rows.iter().map(|r| r.label).collect();
    auc(&s, &y)
}

/// Trains one variant and returns its AUC on each named split.
pub fn train_and_eval(
    corpus: &Corpus,
    splits: &Splits,
    arts: &SeedArtifacts,
    cfg: &RunConfig,
    variant: Variant,
    split_names: &[&str],
) -> Result<(TrainedRanker, BTreeMap<String, f64>)> {
    let inputs = variant_inputs(corpus, arts, variant)?;
    let mut rcfg = cfg.ranker.clone();
    rcfg.variant = variant;
    let trained = train_ranker(corpus, &splits.train, &inputs, &rcfg, cfg.stage2.adaptor_hidden)?;
    let mut out = BTreeMap::new();
    for &name in split_names {
        let set = split_by_name(splits, name)?;
        let rows = score_split(&trained.ranker, &inputs, corpus, &set, name)?;
        out.insert(name.to_string(), split_auc(&rows)?);
    }
    Ok((trained, out))
}

/// Corpus-level preparation shared by every seed.
pub fn prepare(corpus: &Corpus, cfg: &RunConfig) -> Result<(Splits, IdEmbeddingTable)> {
    Ok((split_train_eval(corpus)?, id_table(corpus, cfg)?))
}

/// `cfg` with every model seed set to `seed`; the corpus seed is untouched.
pub fn with_model_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.stage1.seed = seed;
    c.stage2.seed = seed;
    c.ranker.seed = seed;
    c
}
