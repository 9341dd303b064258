//! Metrics, the 2-D projection export and the ablation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::align1::{mean_cosine, retrieval_eval};
use crate::align2::kmeans;
use crate::config::RunConfig;
use crate::datagen::Corpus;
use crate::error::{Error, Result};
use crate::pipeline;
use crate::ranker::Variant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Variants trained by `ablation`, in report order.
    pub variants: Vec<Variant>,
    pub n_seeds: usize,
    /// Seeds used by `ablation` are `first_seed..first_seed + n_seeds`.
    pub first_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            n_seeds: 3,
            first_seed: 1,
        }
    }
}

/// Area under the ROC curve via average ranks (ties count one half).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mean_rank * pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::shape("silhouette", &[points.len()], &[labels.len()]));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::UndefinedMetric("silhouette needs >= 2 clusters".into()));
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let n = points.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                let d: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sums[labels[j]] += d;
            }
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette of a k-means partition of `points`.
pub fn kmeans_silhouette(points: &[Vec<f64>], k: usize, seed: u64) -> Result<f64> {
    let km = kmeans(points, k, seed, 100)?;
    silhouette(points, &km.assignments)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub item_id: u32,
    pub x: f64,
    pub y: f64,
    pub topic_id: u32,
}

/// Top-two principal components of `vectors`. Each axis is oriented so that
/// its largest-magnitude loading is positive.
pub fn project_2d(vectors: &BTreeMap<u32, Vec<f64>>, topics: &BTreeMap<u32, u32>) -> Result<Vec<ProjectedPoint>> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::Input(format!("projection needs >= 3 vectors, got {n}")));
    }
    let dim = vectors.values().next().map_or(0, |v| v.len());
    if dim < 2 || vectors.values().any(|v| v.len() != dim) {
        return Err(Error::shape("project_2d", &[dim], &[2]));
    }
    let mut mean = vec![0.0; dim];
    for v in vectors.values() {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = vectors
        .values()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for c in &centered {
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += c[i] * c[j] / n as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[idx[0]];
    if !(eig.eigenvalues[idx[1]] > 1e-12 * top.max(1.0)) {
        return Err(Error::Degenerate("embedding set has rank < 2".into()));
    }
    let axes: Vec<Vec<f64>> = idx[..2]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = (0..dim)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
                .expect("dim >= 2");
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(vectors
        .keys()
        .zip(&centered)
        .map(|(&id, c)| ProjectedPoint {
            item_id: id,
            x: crate::diffcore::ops::dot(c, &axes[0]),
            y: crate::diffcore::ops::dot(c, &axes[1]),
            topic_id: topics.get(&id).copied().unwrap_or(0),
        })
        .collect())
}

pub fn projection_csv(points: &[ProjectedPoint]) -> String {
    let mut s = String::from("item_id,x,y,topic_id\n");
    for p in points {
        let _ = writeln!(s, "{},{:?},{:?},{}", p.item_id, p.x, p.y, p.topic_id);
    }
    s
}

/// One trained-and-evaluated cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub split: String,
    pub seed: u64,
    pub auc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub split: String,
    pub median_auc: Option<f64>,
    /// Median over seeds of `AUC(variant) - AUC(base)`.
    pub median_delta: Option<f64>,
    pub n_ok: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub seed: u64,
    pub top1: f64,
    pub mean_cosine: f64,
    pub epoch_losses: Vec<f64>,
    pub partition: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
    pub stage1: Vec<Stage1Summary>,
}

pub const SPLITS: [&str; 3] = ["cold", "warm", "global"];

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl ExperimentReport {
    pub fn auc(&self, variant: Variant, split: &str, seed: u64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.split == split && c.seed == seed)
            .and_then(|c| c.auc)
    }

    pub fn row(&self, variant: Variant, split: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant && r.split == split)
    }

    /// Recomputes the summary table from the cells.
    pub fn summarize(&mut self) {
        let mut variants: Vec<Variant> = Vec::new();
        for c in &self.cells {
            if !variants.contains(&c.variant) {
                variants.push(c.variant);
            }
        }
        self.summary.clear();
        for &v in &variants {
            for split in SPLITS {
                let mut aucs: Vec<f64> = self.seeds.iter().filter_map(|&s| self.auc(v, split, s)).collect();
                let mut deltas: Vec<f64> = self
                    .seeds
                    .iter()
                    .filter_map(|&s| {
                        let a = self.auc(v, split, s)?;
                        if v == Variant::Base {
                            return Some(0.0);
                        }
                        Some(a - self.auc(Variant::Base, split, s)?)
                    })
                    .collect();
                let n_ok = aucs.len();
                self.summary.push(SummaryRow {
                    variant: v,
                    split: split.to_string(),
                    median_auc: median(&mut aucs),
                    median_delta: median(&mut deltas),
                    n_ok,
                });
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |x: Option<f64>, signed: bool| match (x, signed) {
            (Some(v), true) => format!("{v:+.4}"),
            (Some(v), false) => format!("{v:.4}"),
            (None, _) => "failed".to_string(),
        };
        let mut s = String::new();
        let _ = writeln!(s, "# Ablation report\n");
        let _ = writeln!(s, "config `{}`, seeds {:?}, medians over seeds\n", self.config_hash, self.seeds);
        let _ = writeln!(
            s,
            "| variant | AUC cold | dAUC cold | AUC warm | dAUC warm | AUC global | dAUC global |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.summary {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        for v in variants {
            let _ = write!(s, "| {v} ");
            for split in SPLITS {
                let r = self.row(v, split);
                let _ = write!(
                    s,
                    "| {} | {} ",
                    fmt(r.and_then(|r| r.median_auc), false),
                    fmt(r.and_then(|r| r.median_delta), true)
                );
            }
            let _ = writeln!(s, "|");
        }
        if !self.stage1.is_empty() {
            let _ = writeln!(s, "\n| seed | stage-1 top-1 | mean cosine | layers |");
            let _ = writeln!(s, "|---|---|---|---|");
            for st in &self.stage1 {
                let _ = writeln!(
                    s,
                    "| {} | {:.4} | {:.4} | {:?} |",
                    st.seed, st.top1, st.mean_cosine, st.partition
                );
            }
        }
        let failed: Vec<&Cell> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        if !failed.is_empty() {
            let _ = writeln!(s, "\nFailed cells:\n");
            for c in failed {
                let _ = writeln!(
                    s,
                    "- {} / {} / seed {}: {}",
                    c.variant,
                    c.split,
                    c.seed,
                    c.error.as_deref().unwrap_or("")
                );
            }
        }
        s
    }
}

/// Wall-clock time of one stage of an ablation run. Kept out of the report so
/// that reports stay byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub seed: u64,
    /// `upstream` (Stage 1, partition, content features) or a variant name.
    pub stage: String,
    pub secs: f64,
}

/// Trains every variant in `cfg.eval.variants` for each seed on a fixed
/// corpus. A failing stage marks the affected cells and the run continues.
pub fn run_ablation(corpus: &Corpus, cfg: &RunConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    Ok(run_ablation_timed(corpus, cfg, seeds)?.0)
}

pub fn run_ablation_timed(corpus: &Corpus, cfg: &RunConfig, seeds: &[u64]) -> Result<(ExperimentReport, Vec<StageTiming>)> {
    let (splits, table) = pipeline::prepare(corpus, cfg)?;
    let mut timings = Vec::new();
    let mut report = ExperimentReport {
        config_hash: cfg.hash(),
        seeds: seeds.to_vec(),
        ..Default::default()
    };
    for &seed in seeds {
        let scfg = pipeline::with_model_seed(cfg, seed);
        let t0 = Instant::now();
        let built = pipeline::build_seed_artifacts(corpus, &table, &scfg);
        timings.push(StageTiming {
            seed,
            stage: "upstream".into(),
            secs: t0.elapsed().as_secs_f64(),
        });
        let arts = match built {
            Ok(a) => a,
            Err(e) => {
                log::error!("seed {seed}: upstream stages failed: {e}");
                for &v in &cfg.eval.variants {
                    for split in SPLITS {
                        report.cells.push(Cell {
                            variant: v,
                            split: split.into(),
                            seed,
                            auc: None,
                            error: Some(format!("{}: {e}", e.class())),
                        });
                    }
                }
                continue;
            }
        };
        report.stage1.push(Stage1Summary {
            seed,
            top1: retrieval_eval(&arts.stage1.proxies, &table, 1)?,
            mean_cosine: mean_cosine(&arts.stage1.proxies, &table)?,
            epoch_losses: arts.stage1.epoch_losses.clone(),
            partition: arts.partition.layers.clone(),
        });
        for &v in &cfg.eval.variants {
            let t0 = Instant::now();
            let result = pipeline::train_and_eval(corpus, &splits, &arts, &scfg, v, &SPLITS);
            timings.push(StageTiming {
                seed,
                stage: v.short().into(),
                secs: t0.elapsed().as_secs_f64(),
            });
            match result {
                Ok((_, aucs)) => {
                    log::info!("seed {seed} {v}: {aucs:?}");
                    for split in SPLITS {
                        report.cells.push(Cell {
                            variant: v,
                            split: split.into(),
                            seed,
                            auc: aucs.get(split).copied(),
                            error: None,
                        });
                    }
                }
                Err(e) => {
                    log::error!("seed {seed} {v}: {e}");
                    for split in SPLITS {
                        report.cells.push(Cell {
                            variant: v,
                            split: split.into(),
                            seed,
                            auc: None,
                            error: Some(format!("{}: {e}", e.class())),
                        });
                    }
                }
            }
        }
    }
    report.summarize();
    Ok((report, timings))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn auc_reference_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn silhouette_of_separated_blobs_is_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = Vec::new();
        let mut lab = Vec::new();
        for c in 0..3 {
            for _ in 0..20 {
                pts.push(vec![c as f64 * 10.0 + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
                lab.push(c);
            }
        }
        assert!(silhouette(&pts, &lab).unwrap() > 0.9);
        assert!(kmeans_silhouette(&pts, 3, 0).unwrap() > 0.9);
    }

    #[test]
    fn projection_of_centered_plane_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts: Vec<Vec<f64>> = (0..10)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0) * 0.3])
            .collect();
        let mean: Vec<f64> = (0..2).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 10.0).collect();
        for p in &mut pts {
            p[0] -= mean[0];
            p[1] -= mean[1];
        }
        let map: BTreeMap<u32, Vec<f64>> = pts.iter().cloned().enumerate().map(|(i, v)| (i as u32, v)).collect();
        let out = project_2d(&map, &BTreeMap::new()).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                let d1 = ((out[i].x - out[j].x).powi(2) + (out[i].y - out[j].y).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
        assert_eq!(projection_csv(&out), projection_csv(&project_2d(&map, &BTreeMap::new()).unwrap()));
    }

    #[test]
    fn rank_one_input_is_degenerate() {
        let map: BTreeMap<u32, Vec<f64>> = (0..5).map(|i| (i, vec![i as f64, 2.0 * i as f64])).collect();
        assert!(matches!(project_2d(&map, &BTreeMap::new()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn base_delta_is_zero_and_report_round_trips() {
        let mut r = ExperimentReport {
            config_hash: "abc".into(),
            seeds: vec![1, 2],
            ..Default::default()
        };
        for (s, b, v) in [(1, 0.51, 0.6), (2, 0.49, 0.62)] {
            for split in SPLITS {
                r.cells.push(Cell { variant: Variant::Base, split: split.into(), seed: s, auc: Some(b), error: None });
                r.cells.push(Cell { variant: Variant::V3Coarse, split: split.into(), seed: s, auc: Some(v), error: None });
            }
        }
        r.summarize();
        assert_eq!(r.row(Variant::Base, "cold").unwrap().median_delta, Some(0.0));
        let dv = r.row(Variant::V3Coarse, "cold").unwrap().median_delta.unwrap();
        assert!((dv - 0.11).abs() < 1e-12);
        let back = ExperimentReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_markdown().contains("| v3 "));
    }
}
