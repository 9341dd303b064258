//! Synthetic multimodal recommendation corpus with planted latent structure.
//!
//! Every item has a latent vector whose first coordinate is an item quality
//! term (users all weigh it with coefficient 1) and whose remaining coordinates
//! carry taste. Content tokens are drawn from a topic vocabulary tilted by the
//! taste vector, "image" patches are a noisy linear view of the whole latent,
//! and clicks follow `Bernoulli(sigmoid(u . v + w . scalars + eps))`.
//!
//! The ID-embedding target table mimics a snapshot of a production ranker:
//! its direction encodes taste, its magnitude grows with quality (and hence
//! popularity), and unseen cold items only have an untrained random row.

mod io;
mod split;

pub use io::{load_corpus, load_id_table, save_corpus, save_id_table};
pub use split::{split_train_eval, InteractionSet, Splits};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::ops;
use crate::error::{Error, Result};

/// Geometry of the latent item space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdSpaceMode {
    /// Topics nest inside three well separated families.
    Clustered,
    /// Isotropic latents with only a faint topic offset.
    Irregular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub d_latent: usize,
    pub vocab_size: usize,
    pub tokens_per_item: usize,
    pub n_interactions: usize,
    pub cold_fraction: f64,
    pub history_len: usize,
    pub id_space_mode: IdSpaceMode,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Width of the ID-embedding target table.
    pub d_id: usize,
    pub n_patches: usize,
    pub d_patch: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 1000,
            n_topics: 10,
            d_latent: 16,
            vocab_size: 500,
            tokens_per_item: 16,
            n_interactions: 200_000,
            cold_fraction: 0.2,
            history_len: 20,
            id_space_mode: IdSpaceMode::Clustered,
            noise_sigma: 0.3,
            seed: 1,
            d_id: 32,
            n_patches: 4,
            d_patch: 8,
        }
    }
}

impl GenConfig {
    /// Small corpus for smoke tests: 200 users, 100 items.
    pub fn tiny() -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            n_topics: 5,
            vocab_size: 120,
            n_interactions: 8000,
            ..Self::default()
        }
    }

    pub fn n_cold(&self) -> usize {
        (self.cold_fraction * self.n_items as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_topics", self.n_topics),
            ("vocab_size", self.vocab_size),
            ("tokens_per_item", self.tokens_per_item),
            ("n_interactions", self.n_interactions),
            ("history_len", self.history_len),
            ("d_id", self.d_id),
            ("n_patches", self.n_patches),
            ("d_patch", self.d_patch),
        ];
        for (field, v) in counts {
            if v < 1 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.d_latent < 2 {
            return Err(Error::config("d_latent", "must be >= 2 (quality + taste)"));
        }
        if !(self.cold_fraction > 0.0 && self.cold_fraction < 1.0) {
            return Err(Error::config(
                "cold_fraction",
                format!("must lie in (0,1), got {}", self.cold_fraction),
            ));
        }
        let n_cold = self.n_cold();
        if n_cold == 0 || n_cold >= self.n_items {
            return Err(Error::config(
                "cold_fraction",
                format!("yields {n_cold} cold items out of {}", self.n_items),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub user_id: u32,
    #[serde(with = "io::reals")]
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: u32,
    pub topic_id: u32,
    #[serde(with = "io::reals")]
    pub latent: Vec<f64>,
    pub content_tokens: Vec<u32>,
    /// Row-major `n_patches x d_patch`.
    #[serde(with = "io::reals")]
    pub image_patches: Vec<f64>,
    pub is_cold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    /// Most recent clicked items, oldest first.
    pub history: Vec<u32>,
    /// One-hot hour bucket (4) followed by one-hot device bucket (2).
    #[serde(with = "io::reals")]
    pub scalars: Vec<f64>,
}

pub const N_HOUR_BUCKETS: usize = 4;
pub const N_DEVICE_BUCKETS: usize = 2;
pub const N_SCALARS: usize = N_HOUR_BUCKETS + N_DEVICE_BUCKETS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub interaction_id: u64,
    pub user_id: u32,
    pub item_id: u32,
    pub timestamp: u64,
    pub context: ContextFeatures,
    pub label: u8,
}

/// One row of the raw ID-embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdTableEntry {
    pub item_id: u32,
    #[serde(with = "io::reals")]
    pub e_raw: Vec<f64>,
    pub update_count: u32,
}

/// The planted click model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    #[serde(with = "io::reals")]
    pub context_weights: Vec<f64>,
    #[serde(with = "io::real")]
    pub noise_sigma: f64,
}

impl ClickModel {
    /// Noise-free logit `u . v + w . scalars`.
    pub fn logit(&self, user: &[f64], item: &[f64], scalars: &[f64]) -> f64 {
        ops::dot(user, item) + ops::dot(&self.context_weights, scalars)
    }

    pub fn sample_label<R: Rng + ?Sized>(&self, logit: f64, rng: &mut R) -> u8 {
        let eps: f64 = StandardNormal.sample(rng);
        let p = ops::sigmoid(logit + self.noise_sigma * eps);
        u8::from(rng.random::<f64>() < p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: GenConfig,
    pub users: Vec<User>,
    pub items: Vec<Item>,
    pub interactions: Vec<Interaction>,
    pub id_table: Vec<IdTableEntry>,
    pub click_model: ClickModel,
    /// Interactions at or after this timestamp are held out for evaluation.
    pub cutoff: u64,
}

impl Corpus {
    pub fn item(&self, id: u32) -> &Item {
        &self.items[id as usize]
    }

    pub fn user(&self, id: u32) -> &User {
        &self.users[id as usize]
    }

    pub fn warm_items(&self) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(|i| !i.is_cold)
    }

    pub fn cold_items(&self) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(|i| i.is_cold)
    }

    pub fn config_hash(&self) -> String {
        crate::config::hash_json(&self.config)
    }
}

// Planted-world constants.
const QUALITY_SIGMA: f64 = 0.8;
const TASTE_LOGIT_STD: f64 = 2.0;
const TOPIC_MIX: f64 = 0.8;
const TOKEN_TILT: f64 = 1.0;
const IMAGE_NOISE: f64 = 0.1;
const SNAPSHOT_NOISE: f64 = 0.05;
const MAGNITUDE_KAPPA: f64 = 0.6;
const POPULARITY_GAMMA: f64 = 0.5;
const COLD_EXPOSURE: f64 = 0.5;
const EVAL_TIME_FRACTION: f64 = 0.2;
const TIME_HORIZON: u64 = 1_000_000;
const N_FAMILIES: usize = 3;
// clustered-mode variance split of each taste coordinate
const FAMILY_VAR: f64 = 0.70;
const TOPIC_VAR: f64 = 0.12;
const ITEM_VAR: f64 = 0.18;
// irregular-mode topic offset variance
const IRREGULAR_TOPIC_VAR: f64 = 0.05;

fn normal_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Generates a corpus. Deterministic in `config`.
pub fn generate_corpus(config: &GenConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let taste_dim = config.d_latent - 1;

    let users = gen_users(config, &mut rng);
    let items = gen_items(config, &mut rng)?;

    let click_model = ClickModel {
        context_weights: (0..N_SCALARS)
            .map(|j| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if j < N_HOUR_BUCKETS {
                    -0.2 + 0.15 * z
                } else {
                    0.1 * z
                }
            })
            .collect(),
        noise_sigma: config.noise_sigma,
    };

    let cutoff = ((1.0 - EVAL_TIME_FRACTION) * TIME_HORIZON as f64) as u64;
    let mut schedule = schedule_interactions(config, &items, cutoff, &mut rng)?;
    ensure_train_coverage(&items, &mut schedule, cutoff, &mut rng);

    // labels and histories, chronological per user
    let mut interactions = Vec::with_capacity(schedule.len());
    let device_pref: Vec<usize> = (0..config.n_users)
        .map(|_| rng.random_range(0..N_DEVICE_BUCKETS))
        .collect();
    let mut clicked: Vec<Vec<u32>> = vec![Vec::new(); config.n_users];
    for s in &schedule {
        let user = &users[s.user as usize];
        let item = &items[s.item as usize];
        let mut scalars = vec![0.0; N_SCALARS];
        let hour = ((s.timestamp / 997) % N_HOUR_BUCKETS as u64) as usize;
        scalars[hour] = 1.0;
        let device = if rng.random_bool(0.9) {
            device_pref[s.user as usize]
        } else {
            rng.random_range(0..N_DEVICE_BUCKETS)
        };
        scalars[N_HOUR_BUCKETS + device] = 1.0;

        let past = &clicked[s.user as usize];
        let history = past[past.len().saturating_sub(config.history_len)..].to_vec();
        let logit = click_model.logit(&user.latent, &item.latent, &scalars);
        let label = click_model.sample_label(logit, &mut rng);
        if label == 1 {
            clicked[s.user as usize].push(s.item);
        }
        interactions.push(Interaction {
            interaction_id: interactions.len() as u64,
            user_id: s.user,
            item_id: s.item,
            timestamp: s.timestamp,
            context: ContextFeatures { history, scalars },
            label,
        });
    }

    let id_table = gen_id_table(config, &items, &interactions, cutoff, taste_dim, &mut rng);

    Ok(Corpus {
        config: config.clone(),
        users,
        items,
        interactions,
        id_table,
        click_model,
        cutoff,
    })
}

fn gen_users<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Vec<User> {
    let taste_dim = config.d_latent - 1;
    let std = TASTE_LOGIT_STD / (taste_dim as f64).sqrt();
    (0..config.n_users)
        .map(|u| {
            let mut latent = Vec::with_capacity(config.d_latent);
            latent.push(1.0);
            latent.extend(normal_vec(taste_dim, std, rng));
            User {
                user_id: u as u32,
                latent,
            }
        })
        .collect()
}

/// Centers of a randomly rotated regular simplex, so every pair of families
/// is equally far apart. Each center has squared norm `FAMILY_VAR * dim`.
fn family_centers<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    if n > dim {
        return (0..n).map(|_| normal_vec(dim, FAMILY_VAR.sqrt(), rng)).collect();
    }
    // Gram-Schmidt on Gaussian draws
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = normal_vec(dim, 1.0, rng);
        for b in &basis {
            let c = ops::dot(&v, b);
            ops::axpy(-c, b, &mut v);
        }
        let norm = ops::dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| basis.iter().map(|b| b[j]).sum::<f64>() / n as f64)
        .collect();
    let spread = 1.0 - 1.0 / n as f64;
    let scale = if spread > 0.0 { (FAMILY_VAR * dim as f64 / spread).sqrt() } else { 0.0 };
    basis
        .iter()
        .map(|b| b.iter().zip(&mean).map(|(x, m)| scale * (x - m)).collect())
        .collect()
}

fn gen_items<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Result<Vec<Item>> {
    let taste_dim = config.d_latent - 1;
    let n_fam = N_FAMILIES.min(config.n_topics);

    // topic geometry
    let families = family_centers(n_fam, taste_dim, rng);
    let topic_var = match config.id_space_mode {
        IdSpaceMode::Clustered => TOPIC_VAR,
        IdSpaceMode::Irregular => IRREGULAR_TOPIC_VAR,
    };
    let topic_offsets: Vec<Vec<f64>> = (0..config.n_topics)
        .map(|_| normal_vec(taste_dim, topic_var.sqrt(), rng))
        .collect();

    // topic vocabularies and word directions for the latent tilt
    let words_per_topic = (config.vocab_size / config.n_topics).max(1);
    let mut vocab: Vec<u32> = (0..config.vocab_size as u32).collect();
    vocab.shuffle(rng);
    let topic_words: Vec<Vec<u32>> = (0..config.n_topics)
        .map(|k| {
            (0..words_per_topic)
                .map(|j| vocab[(k * words_per_topic + j) % config.vocab_size])
                .collect()
        })
        .collect();
    let word_dirs: Vec<Vec<f64>> = (0..config.vocab_size)
        .map(|_| normal_vec(taste_dim, 1.0 / (taste_dim as f64).sqrt(), rng))
        .collect();

    // fixed "camera": latent -> flattened patches
    let patch_len = config.n_patches * config.d_patch;
    let camera = normal_vec(patch_len * config.d_latent, 1.0 / (config.d_latent as f64).sqrt(), rng);

    let n_warm = config.n_items - config.n_cold();
    let mut items = Vec::with_capacity(config.n_items);
    for i in 0..config.n_items {
        let topic = rng.random_range(0..config.n_topics);
        let mut latent = Vec::with_capacity(config.d_latent);
        let quality: f64 = StandardNormal.sample(rng);
        latent.push(QUALITY_SIGMA * quality);
        let taste: Vec<f64> = match config.id_space_mode {
            IdSpaceMode::Clustered => {
                let fam = &families[topic % n_fam];
                let noise = normal_vec(taste_dim, ITEM_VAR.sqrt(), rng);
                (0..taste_dim)
                    .map(|j| fam[j] + topic_offsets[topic][j] + noise[j])
                    .collect()
            }
            IdSpaceMode::Irregular => {
                let noise = normal_vec(taste_dim, (1.0 - IRREGULAR_TOPIC_VAR).sqrt(), rng);
                (0..taste_dim)
                    .map(|j| topic_offsets[topic][j] + noise[j])
                    .collect()
            }
        };
        latent.extend_from_slice(&taste);

        let words = &topic_words[topic];
        let tilt: Vec<f64> = words
            .iter()
            .map(|&w| (TOKEN_TILT * ops::dot(&word_dirs[w as usize], &taste)).exp())
            .collect();
        let topic_dist = WeightedIndex::new(&tilt)
            .map_err(|e| Error::Input(format!("token distribution: {e}")))?;
        let content_tokens = (0..config.tokens_per_item)
            .map(|_| {
                if rng.random_bool(TOPIC_MIX) {
                    words[topic_dist.sample(rng)]
                } else {
                    rng.random_range(0..config.vocab_size as u32)
                }
            })
            .collect();

        let mut image_patches = vec![0.0; patch_len];
        for (p, out) in image_patches.iter_mut().enumerate() {
            let row = &camera[p * config.d_latent..(p + 1) * config.d_latent];
            let z: f64 = StandardNormal.sample(rng);
            *out = ops::dot(row, &latent) + IMAGE_NOISE * z;
        }

        items.push(Item {
            item_id: i as u32,
            topic_id: topic as u32,
            latent,
            content_tokens,
            image_patches,
            is_cold: i >= n_warm,
        });
    }
    Ok(items)
}

struct Scheduled {
    user: u32,
    item: u32,
    timestamp: u64,
}

fn schedule_interactions<R: Rng + ?Sized>(
    config: &GenConfig,
    items: &[Item],
    cutoff: u64,
    rng: &mut R,
) -> Result<Vec<Scheduled>> {
    let popularity = |it: &Item| (POPULARITY_GAMMA * it.latent[0]).exp();
    let warm: Vec<&Item> = items.iter().filter(|i| !i.is_cold).collect();
    let cold: Vec<&Item> = items.iter().filter(|i| i.is_cold).collect();
    let to_err = |e: rand_distr::weighted::Error| Error::Input(format!("popularity: {e}"));
    let warm_dist = WeightedIndex::new(warm.iter().map(|i| popularity(i))).map_err(to_err)?;
    let cold_dist = WeightedIndex::new(cold.iter().map(|i| popularity(i))).map_err(to_err)?;

    let base = config.n_interactions / config.n_users;
    let extra = config.n_interactions % config.n_users;
    let mut out = Vec::with_capacity(config.n_interactions);
    for u in 0..config.n_users {
        let n = base + usize::from(u < extra);
        let mut times: Vec<u64> = (0..n).map(|_| rng.random_range(0..TIME_HORIZON)).collect();
        times.sort_unstable();
        for k in 1..times.len() {
            if times[k] <= times[k - 1] {
                times[k] = times[k - 1] + 1;
            }
        }
        for t in times {
            let item = if t >= cutoff && rng.random_bool(COLD_EXPOSURE) {
                cold[cold_dist.sample(rng)].item_id
            } else {
                warm[warm_dist.sample(rng)].item_id
            };
            out.push(Scheduled {
                user: u as u32,
                item,
                timestamp: t,
            });
        }
    }
    Ok(out)
}

/// Reassigns training interactions so every warm item has at least one.
fn ensure_train_coverage<R: Rng + ?Sized>(
    items: &[Item],
    schedule: &mut [Scheduled],
    cutoff: u64,
    rng: &mut R,
) {
    let mut counts = vec![0usize; items.len()];
    let train_idx: Vec<usize> = (0..schedule.len())
        .filter(|&k| schedule[k].timestamp < cutoff)
        .collect();
    for &k in &train_idx {
        counts[schedule[k].item as usize] += 1;
    }
    for it in items.iter().filter(|i| !i.is_cold) {
        if counts[it.item_id as usize] > 0 || train_idx.is_empty() {
            continue;
        }
        // a donor interaction whose item keeps at least one
        for _ in 0..train_idx.len() * 4 {
            let k = train_idx[rng.random_range(0..train_idx.len())];
            let donor = schedule[k].item as usize;
            if counts[donor] > 1 {
                counts[donor] -= 1;
                schedule[k].item = it.item_id;
                counts[it.item_id as usize] = 1;
                break;
            }
        }
    }
}

fn gen_id_table<R: Rng + ?Sized>(
    config: &GenConfig,
    items: &[Item],
    interactions: &[Interaction],
    cutoff: u64,
    taste_dim: usize,
    rng: &mut R,
) -> Vec<IdTableEntry> {
    let mut counts = vec![0u32; items.len()];
    for it in interactions.iter().filter(|i| i.timestamp < cutoff) {
        counts[it.item_id as usize] += 1;
    }
    let map = normal_vec(config.d_id * taste_dim, 1.0 / (taste_dim as f64).sqrt(), rng);
    items
        .iter()
        .map(|item| {
            let e_raw = if item.is_cold {
                // untrained row of a freshly inserted id
                normal_vec(config.d_id, 0.01, rng)
            } else {
                let taste = &item.latent[1..];
                let magnitude = (MAGNITUDE_KAPPA * item.latent[0]).exp();
                (0..config.d_id)
                    .map(|r| {
                        let z: f64 = StandardNormal.sample(rng);
                        magnitude
                            * (ops::dot(&map[r * taste_dim..(r + 1) * taste_dim], taste)
                                + SNAPSHOT_NOISE * z)
                    })
                    .collect()
            };
            IdTableEntry {
                item_id: item.item_id,
                e_raw,
                update_count: counts[item.item_id as usize],
            }
        })
        .collect()
}
