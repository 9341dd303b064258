//! Stage 1: ID-table preprocessing, the in-batch contrastive alignment loss
//! and the trainer that produces coarse proxies for every item.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, IdTableEntry};
use crate::diffcore::{ops, AdamW, AdamWConfig};
use crate::encoder::{Encoder, EncoderConfig, PromptTokens};
use crate::error::{Error, Result};
use crate::ProxyMap;

/// Tolerance on the unit-norm precondition of [`pal_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    /// Minimum update count for an ID row to serve as a target.
    pub tau: u32,
    pub temperature: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            tau: 5,
            temperature: 0.07,
            batch_size: 512,
            lr: 1e-4,
            weight_decay: 0.0,
            epochs: 10,
            seed: 1,
        }
    }
}

impl Stage1Config {
    /// Settings that converge within a few minutes on one core.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "in-batch negatives need >= 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        AdamWConfig::new(self.lr, self.weight_decay).validate()
    }
}

/// Raw rows plus the filtered, unit-norm alignment targets.
#[derive(Clone, Debug, PartialEq)]
pub struct IdEmbeddingTable {
    pub d: usize,
    pub entries: BTreeMap<u32, IdTableEntry>,
    pub targets: BTreeMap<u32, Vec<f64>>,
}

impl IdEmbeddingTable {
    pub fn target(&self, item_id: u32) -> Option<&[f64]> {
        self.targets.get(&item_id).map(|v| v.as_slice())
    }
}

pub fn preprocess_id_table(raw: &[IdTableEntry], tau: u32) -> Result<IdEmbeddingTable> {
    let first = raw
        .first()
        .ok_or_else(|| Error::EmptyTable("raw ID table has no rows".into()))?;
    let d = first.e_raw.len();
    let mut entries = BTreeMap::new();
    let mut targets = BTreeMap::new();
    for e in raw {
        if e.e_raw.len() != d {
            return Err(Error::shape("preprocess_id_table", &[e.e_raw.len()], &[d]));
        }
        entries.insert(e.item_id, e.clone());
        if e.update_count < tau {
            continue;
        }
        let (unit, _) = ops::l2_normalize(&e.e_raw)
            .map_err(|_| Error::Degenerate(format!("zero-norm ID row for item {}", e.item_id)))?;
        targets.insert(e.item_id, unit);
    }
    if targets.is_empty() {
        return Err(Error::EmptyTable(format!(
            "every item has fewer than tau={tau} updates"
        )));
    }
    Ok(IdEmbeddingTable { d, entries, targets })
}

fn check_batch(h: &[Vec<f64>], e: &[Vec<f64>]) -> Result<usize> {
    if h.is_empty() || h.len() != e.len() {
        return Err(Error::shape("pal_loss", &[h.len()], &[e.len()]));
    }
    let d = h[0].len();
    for (k, row) in h.iter().chain(e).enumerate() {
        if row.len() != d {
            return Err(Error::shape("pal_loss", &[row.len()], &[d]));
        }
        let n = ops::dot(row, row).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Precondition(format!(
                "pal_loss row {} has norm {n}",
                k % h.len()
            )));
        }
    }
    Ok(d)
}

/// Mean over the batch of `-log softmax_j(h_i . e_j / tau_c)[i]`.
pub fn pal_loss(h: &[Vec<f64>], e: &[Vec<f64>], tau_c: f64) -> Result<f64> {
    Ok(pal_loss_grad(h, e, tau_c)?.0)
}

/// Loss and its gradient with respect to every `h_i`; targets are constants.
pub fn pal_loss_grad(h: &[Vec<f64>], e: &[Vec<f64>], tau_c: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(tau_c > 0.0) {
        return Err(Error::config("temperature", "must be > 0"));
    }
    let d = check_batch(h, e)?;
    let b = h.len();
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; d]; b];
    let mut row = vec![0.0; b];
    for i in 0..b {
        for (j, s) in row.iter_mut().enumerate() {
            *s = ops::dot(&h[i], &e[j]) / tau_c;
        }
        loss += ops::logsumexp(&row) - row[i];
        ops::softmax_inplace(&mut row);
        row[i] -= 1.0;
        for (j, &ds) in row.iter().enumerate() {
            ops::axpy(ds / (tau_c * b as f64), &e[j], &mut grads[i]);
        }
    }
    Ok((loss / b as f64, grads))
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub encoder: Encoder,
    pub proxies: ProxyMap,
    pub epoch_losses: Vec<f64>,
}

/// Coarse proxies of every item in the corpus.
pub fn coarse_proxies(encoder: &Encoder, corpus: &Corpus) -> Result<ProxyMap> {
    corpus
        .items
        .iter()
        .map(|item| {
            let p = encoder.build_prompt(item)?;
            let h = encoder.proxy(&p).map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("item {}: {m}", item.item_id)),
                other => other,
            })?;
            Ok((item.item_id, h))
        })
        .collect()
}

pub fn train_stage1(
    corpus: &Corpus,
    table: &IdEmbeddingTable,
    enc_cfg: &EncoderConfig,
    cfg: &Stage1Config,
) -> Result<Stage1Output> {
    cfg.validate()?;
    let mut encoder = Encoder::new(enc_cfg.clone(), cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57A6_E001);

    let mut pool: Vec<(PromptTokens, &[f64])> = Vec::new();
    for item in corpus.warm_items() {
        if let Some(t) = table.target(item.item_id) {
            pool.push((encoder.build_prompt(item)?, t));
        }
    }
    if pool.len() < 2 {
        return Err(Error::EmptyTable("fewer than 2 warm items carry ID targets".into()));
    }
    let batch = if pool.len() < cfg.batch_size {
        log::warn!(
            "only {} warm items with targets; batch size reduced from {}",
            pool.len(),
            cfg.batch_size
        );
        pool.len()
    } else {
        cfg.batch_size
    };

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        // a trailing partial batch joins the previous one
        let n_batches = (order.len() / batch).max(1);
        for bi in 0..n_batches {
            let end = if bi + 1 == n_batches { order.len() } else { (bi + 1) * batch };
            let idx = &order[bi * batch..end];
            let tapes = idx
                .iter()
                .map(|&k| encoder.forward_train(&pool[k].0))
                .collect::<Result<Vec<_>>>()?;
            let h: Vec<Vec<f64>> = tapes.iter().map(|t| t.h_tilde.clone()).collect();
            let e: Vec<Vec<f64>> = idx.iter().map(|&k| pool[k].1.to_vec()).collect();
            let (loss, dh) = pal_loss_grad(&h, &e, cfg.temperature)?;
            let mut grads = encoder.params.zeros_like();
            for (tape, g) in tapes.iter().zip(&dh) {
                encoder.backward(tape, g, &mut grads);
            }
            opt.step(&mut encoder.params, &grads)?;
            total += loss;
            steps += 1;
        }
        let mean = total / steps as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("stage-1 loss at epoch {epoch}")));
        }
        log::info!("stage1 epoch {} loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
    }

    let proxies = coarse_proxies(&encoder, corpus)?;
    Ok(Stage1Output {
        encoder,
        proxies,
        epoch_losses,
    })
}

/// Fraction of target items whose own row is among the `k` highest-scoring
/// rows for their proxy. Ties go to the smaller item id.
pub fn retrieval_eval(proxies: &ProxyMap, table: &IdEmbeddingTable, k: usize) -> Result<f64> {
    let n = table.targets.len();
    if k == 0 || k > n {
        return Err(Error::Input(format!("k={k} outside 1..={n}")));
    }
    let rows: Vec<(u32, &Vec<f64>)> = table.targets.iter().map(|(&i, v)| (i, v)).collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for &(id, _) in &rows {
        let Some(p) = proxies.get(&id) else { continue };
        let own = ops::dot(p, &table.targets[&id]);
        let better = rows
            .iter()
            .filter(|&&(j, e)| {
                let s = ops::dot(p, e);
                s > own || (s == own && j < id)
            })
            .count();
        total += 1;
        if better < k {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input("no proxies share ids with the table".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean cosine between proxy and target over items present in both.
pub fn mean_cosine(proxies: &ProxyMap, table: &IdEmbeddingTable) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (id, e) in &table.targets {
        if let Some(p) = proxies.get(id) {
            let np = ops::dot(p, p).sqrt();
            sum += ops::dot(p, e) / np.max(ops::L2_MIN_NORM);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("no proxies share ids with the table".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::datagen::{generate_corpus, GenConfig};
    use crate::diffcore::gradcheck::{rel_err, DEFAULT_EPS};

    fn entry(id: u32, e: Vec<f64>, n: u32) -> IdTableEntry {
        IdTableEntry {
            item_id: id,
            e_raw: e,
            update_count: n,
        }
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        ops::l2_normalize(&v).unwrap().0
    }

    #[test]
    fn threshold_and_normalization() {
        let t = preprocess_id_table(&[entry(0, vec![3.0, 4.0], 10), entry(1, vec![1.0, 0.0], 3)], 5)
            .unwrap();
        assert_eq!(t.targets.keys().copied().collect::<Vec<_>>(), vec![0]);
        assert!((t.targets[&0][0] - 0.6).abs() < 1e-12);
        assert!((t.targets[&0][1] - 0.8).abs() < 1e-12);
        assert_eq!(t.entries.len(), 2);
    }

    #[test]
    fn zero_row_and_empty_table_errors() {
        match preprocess_id_table(&[entry(7, vec![0.0, 0.0], 9)], 5) {
            Err(Error::Degenerate(m)) => assert!(m.contains('7')),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            preprocess_id_table(&[entry(1, vec![1.0], 1)], 5),
            Err(Error::EmptyTable(_))
        ));
    }

    #[test]
    fn closed_form_two_item_batch() {
        let h = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = pal_loss(&h, &h, 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        let l = pal_loss(&h, &h, 0.5).unwrap();
        assert!((l - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn single_item_batch_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = vec![unit(&mut rng, 5)];
        let e = vec![unit(&mut rng, 5)];
        assert_eq!(pal_loss(&h, &e, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn non_unit_rows_are_rejected() {
        let h = vec![vec![2.0, 0.0]];
        assert!(matches!(pal_loss(&h, &h, 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 5;
        let h: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 4)).collect();
        let e: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 4)).collect();
        let (_, g) = pal_loss_grad(&h, &e, 0.3).unwrap();
        // the precondition is bypassed by evaluating the unchecked formula
        let f = |h: &[Vec<f64>]| -> f64 {
            let mut total = 0.0;
            for i in 0..b {
                let row: Vec<f64> = (0..b).map(|j| ops::dot(&h[i], &e[j]) / 0.3).collect();
                total += ops::logsumexp(&row) - row[i];
            }
            total / b as f64
        };
        let mut worst: f64 = 0.0;
        for i in 0..b {
            for c in 0..4 {
                let mut hp = h.clone();
                hp[i][c] += DEFAULT_EPS;
                let mut hm = h.clone();
                hm[i][c] -= DEFAULT_EPS;
                let num = (f(&hp) - f(&hm)) / (2.0 * DEFAULT_EPS);
                worst = worst.max(rel_err(g[i][c], num));
            }
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn retrieval_of_targets_themselves_is_perfect() {
        let c = generate_corpus(&GenConfig::tiny()).unwrap();
        let t = preprocess_id_table(&c.id_table, 5).unwrap();
        let proxies: ProxyMap = t.targets.clone();
        assert_eq!(retrieval_eval(&proxies, &t, 1).unwrap(), 1.0);
        assert!((mean_cosine(&proxies, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(retrieval_eval(&proxies, &t, t.targets.len() + 1).is_err());
    }
}
