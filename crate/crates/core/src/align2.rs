//! Stage 2: layer-subgroup selection, the multi-granularity adaptor and the
//! residual gate that turn coarse proxies into fine proxies.
//!
//! The adaptor itself is trained jointly with the ranker (see
//! [`crate::ranker`]); this module owns its parameters, the batched forward
//! and backward passes, and the frozen-encoder feature cache it consumes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::hash_json;
use crate::datagen::Item;
use crate::diffcore::ops::{self, gemm};
use crate::diffcore::{Parameters, Tensor};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::ProxyMap;

pub const N_GROUPS: usize = 3;
pub const MIN_PROBE_ITEMS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub probe_size: usize,
    pub kmeans_max_iters: usize,
    /// Hidden width of the adaptor MLP.
    pub adaptor_hidden: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            probe_size: 64,
            kmeans_max_iters: 100,
            adaptor_hidden: 8,
            seed: 1,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.probe_size < MIN_PROBE_ITEMS {
            return Err(Error::config(
                "probe_size",
                format!("must be >= {MIN_PROBE_ITEMS}"),
            ));
        }
        if self.adaptor_hidden == 0 || self.kmeans_max_iters == 0 {
            return Err(Error::config("adaptor_hidden", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from a k-means++ start.
///
/// A cluster that loses all its points has its centroid moved onto the point
/// currently farthest from its own centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::Input(format!("kmeans needs n >= k >= 1, got n={n}, k={k}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("kmeans", &[dim], &[points.iter().map(|p| p.len()).max().unwrap_or(0)]));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("kmeans points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            centroids.len() % n
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments: Vec<usize> = Vec::new();
    let mut inertia = Vec::new();
    for _ in 0..max_iters {
        let mut cost = 0.0;
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (c, d) = nearest(p, &centroids);
                cost += d;
                c
            })
            .collect();
        inertia.push(cost);
        if next == assignments {
            break;
        }
        assignments = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            ops::axpy(1.0, p, &mut sums[c]);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignments[a]]);
                        let db = sq_dist(&points[b], &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                centroids[c] = points[far].clone();
            }
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        inertia,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    /// Selected layers, ascending, 1-based.
    pub layers: Vec<usize>,
    /// Cluster of each layer `1..=L`.
    pub assignments: Vec<usize>,
    pub probe_hash: String,
    pub seed: u64,
}

/// Probe-set mean of `g(H^(l))` for `l = 1..=L`.
pub fn layer_features(encoder: &Encoder, probe: &[&Item]) -> Result<Vec<Vec<f64>>> {
    let n_layers = encoder.config.n_layers;
    let layers: Vec<usize> = (1..=n_layers).collect();
    let d = encoder.config.d_hidden;
    let mut feats = vec![vec![0.0; d]; n_layers];
    for item in probe {
        let pooled = encoder.pooled_layers(&encoder.build_prompt(item)?, &layers)?;
        for (f, z) in feats.iter_mut().zip(&pooled) {
            ops::axpy(1.0, z, f);
        }
    }
    for f in &mut feats {
        f.iter_mut().for_each(|x| *x /= probe.len() as f64);
    }
    Ok(feats)
}

pub fn partition_layers(encoder: &Encoder, probe_items: &[Item], seed: u64, max_iters: usize) -> Result<LayerPartition> {
    let n_layers = encoder.config.n_layers;
    if n_layers < N_GROUPS {
        return Err(Error::config("n_layers", format!("need >= {N_GROUPS} layers")));
    }
    if probe_items.len() < MIN_PROBE_ITEMS {
        return Err(Error::Input(format!(
            "probe set has {} items, need >= {MIN_PROBE_ITEMS}",
            probe_items.len()
        )));
    }
    let mut probe: Vec<&Item> = probe_items.iter().collect();
    probe.sort_by_key(|i| i.item_id);
    let ids: Vec<u32> = probe.iter().map(|i| i.item_id).collect();
    let probe_hash = hash_json(&ids);

    if n_layers == N_GROUPS {
        return Ok(LayerPartition {
            layers: (1..=n_layers).collect(),
            assignments: (0..n_layers).collect(),
            probe_hash,
            seed,
        });
    }
    let feats = layer_features(encoder, &probe)?;
    let km = kmeans(&feats, N_GROUPS, seed, max_iters)?;
    let mut layers: Vec<usize> = (0..N_GROUPS)
        .map(|c| {
            (0..n_layers)
                .filter(|&l| km.assignments[l] == c)
                .min_by(|&a, &b| {
                    sq_dist(&feats[a], &km.centroids[c]).total_cmp(&sq_dist(&feats[b], &km.centroids[c]))
                })
                .map(|l| l + 1)
                .ok_or_else(|| Error::Degenerate(format!("layer cluster {c} is empty")))
        })
        .collect::<Result<_>>()?;
    layers.sort_unstable();
    if layers.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Degenerate("medoid layers are not distinct".into()));
    }
    Ok(LayerPartition {
        layers,
        assignments: km.assignments,
        probe_hash,
        seed,
    })
}

/// Frozen-encoder features `[z^(l1), z^(l2), z^(l3)]` of every item.
pub fn pooled_cache(encoder: &Encoder, items: &[Item], partition: &LayerPartition) -> Result<ProxyMap> {
    items
        .iter()
        .map(|item| {
            let z = encoder.pooled_layers(&encoder.build_prompt(item)?, &partition.layers)?;
            Ok((item.item_id, z.concat()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// `d x d~`, identity at initialization when `d~ = d`.
    pub wc: Tensor,
    /// `(d + d~) x d~`.
    pub wg: Tensor,
}

impl AdaptorParams {
    pub fn init(d_in: usize, hidden: usize, d: usize, d_fine: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xADA9_7000);
        let mut wc = Tensor::zeros(&[d, d_fine]);
        for i in 0..d.min(d_fine) {
            wc.data_mut()[i * d_fine + i] = 1.0;
        }
        Self {
            w1: Tensor::randn(&[d_in, hidden], (2.0 / d_in as f64).sqrt(), &mut rng),
            b1: Tensor::filled(&[hidden], 0.01),
            w2: Tensor::randn(&[hidden, d_fine], 1.0 / (hidden as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(&[d_fine]),
            wc,
            wg: Tensor::zeros(&[d + d_fine, d_fine]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d(&self) -> usize {
        self.wc.rows()
    }

    pub fn d_fine(&self) -> usize {
        self.wc.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl Parameters for AdaptorParams {
    fn names(&self) -> Vec<String> {
        ["w1", "b1", "w2", "b2", "wc", "wg"].iter().map(|s| s.to_string()).collect()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.wc, &self.wg]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wc,
            &mut self.wg,
        ]
    }
}

/// Intermediate values of a batched adaptor + gate pass over `n` rows.
#[derive(Clone, Debug)]
pub struct AdaptorPass {
    pub n: usize,
    z: Vec<f64>,
    coarse: Vec<f64>,
    hidden: Vec<f64>,
    pub raw: Vec<f64>,
    pub gate: Vec<f64>,
    /// Row-major `n x d~`.
    pub fine: Vec<f64>,
}

/// `p_raw_fine = phi~(z)` for a batch of rows `z` (`n x 3D`).
fn adaptor_hidden(z: &[f64], n: usize, p: &AdaptorParams) -> (Vec<f64>, Vec<f64>) {
    let (din, hdim, df) = (p.d_in(), p.w1.cols(), p.d_fine());
    let mut hidden = vec![0.0; n * hdim];
    for r in 0..n {
        hidden[r * hdim..(r + 1) * hdim].copy_from_slice(p.b1.data());
    }
    gemm(false, false, n, din, hdim, 1.0, z, p.w1.data(), 1.0, &mut hidden);
    ops::relu_inplace(&mut hidden);
    let mut raw = vec![0.0; n * df];
    for r in 0..n {
        raw[r * df..(r + 1) * df].copy_from_slice(p.b2.data());
    }
    gemm(false, false, n, hdim, df, 1.0, &hidden, p.w2.data(), 1.0, &mut raw);
    (hidden, raw)
}

pub fn adaptor_forward(z: &[f64], coarse: &[f64], n: usize, p: &AdaptorParams) -> Result<AdaptorPass> {
    let (d, df) = (p.d(), p.d_fine());
    if z.len() != n * p.d_in() || coarse.len() != n * d {
        return Err(Error::shape("adaptor_forward", &[z.len(), coarse.len()], &[n * p.d_in(), n * d]));
    }
    let (hidden, raw) = adaptor_hidden(z, n, p);
    let mut cat = vec![0.0; n * (d + df)];
    for r in 0..n {
        cat[r * (d + df)..r * (d + df) + d].copy_from_slice(&coarse[r * d..(r + 1) * d]);
        cat[r * (d + df) + d..(r + 1) * (d + df)].copy_from_slice(&raw[r * df..(r + 1) * df]);
    }
    let mut gate = ops::matmul(&cat, p.wg.data(), n, d + df, df);
    gate.iter_mut().for_each(|s| *s = ops::sigmoid(*s));
    let mut fine = ops::matmul(coarse, p.wc.data(), n, d, df);
    for ((f, &g), &x) in fine.iter_mut().zip(&gate).zip(&raw) {
        *f += g * x;
    }
    Ok(AdaptorPass {
        n,
        z: z.to_vec(),
        coarse: coarse.to_vec(),
        hidden,
        raw,
        gate,
        fine,
    })
}

/// Accumulates adaptor gradients for upstream `d p_fine` (`n x d~`). The
/// coarse proxies and the encoder features are constants.
pub fn adaptor_backward(pass: &AdaptorPass, d_fine: &[f64], p: &AdaptorParams, g: &mut AdaptorParams) {
    let d_raw = gate_backward(pass.n, &pass.coarse, &pass.raw, &pass.gate, d_fine, p, g);
    mlp_backward(pass.n, &pass.z, &pass.hidden, &d_raw, p, g);
}

/// Backward of the gate over `n` rows; returns `d p_raw_fine`.
fn gate_backward(
    n: usize,
    coarse: &[f64],
    raw: &[f64],
    gate: &[f64],
    d_fine: &[f64],
    p: &AdaptorParams,
    g: &mut AdaptorParams,
) -> Vec<f64> {
    let (d, df) = (p.d(), p.d_fine());
    gemm(true, false, d, n, df, 1.0, coarse, d_fine, 1.0, g.wc.data_mut());
    let mut d_raw = vec![0.0; n * df];
    let mut d_s = vec![0.0; n * df];
    for k in 0..n * df {
        let r = gate[k];
        d_raw[k] = d_fine[k] * r;
        d_s[k] = d_fine[k] * raw[k] * r * (1.0 - r);
    }
    let mut cat = vec![0.0; n * (d + df)];
    for r in 0..n {
        cat[r * (d + df)..r * (d + df) + d].copy_from_slice(&coarse[r * d..(r + 1) * d]);
        cat[r * (d + df) + d..(r + 1) * (d + df)].copy_from_slice(&raw[r * df..(r + 1) * df]);
    }
    gemm(true, false, d + df, n, df, 1.0, &cat, &d_s, 1.0, g.wg.data_mut());
    // gate input reaches p_raw_fine through the lower block of W_g
    let wg_fine = &p.wg.data()[d * df..];
    gemm(false, true, n, df, df, 1.0, &d_s, wg_fine, 1.0, &mut d_raw);
    d_raw
}

fn mlp_backward(n: usize, z: &[f64], hidden: &[f64], d_raw: &[f64], p: &AdaptorParams, g: &mut AdaptorParams) {
    let (din, hdim, df) = (p.d_in(), p.w1.cols(), p.d_fine());
    gemm(true, false, hdim, n, df, 1.0, hidden, d_raw, 1.0, g.w2.data_mut());
    for r in 0..n {
        ops::axpy(1.0, &d_raw[r * df..(r + 1) * df], g.b2.data_mut());
    }
    let mut d_h = vec![0.0; n * hdim];
    gemm(false, true, n, df, hdim, 1.0, d_raw, p.w2.data(), 0.0, &mut d_h);
    ops::relu_backward_inplace(hidden, &mut d_h);
    gemm(true, false, din, n, hdim, 1.0, z, &d_h, 1.0, g.w1.data_mut());
    for r in 0..n {
        ops::axpy(1.0, &d_h[r * hdim..(r + 1) * hdim], g.b1.data_mut());
    }
}

/// Gradients of `d_raw . fine_adaptor(z1, z2, z3)` into `w1, b1, w2, b2`.
pub fn fine_adaptor_backward(z1: &[f64], z2: &[f64], z3: &[f64], d_raw: &[f64], p: &AdaptorParams, g: &mut AdaptorParams) -> Result<()> {
    let z = [z1, z2, z3].concat();
    if z.len() != p.d_in() || d_raw.len() != p.d_fine() {
        return Err(Error::shape("fine_adaptor_backward", &[z.len(), d_raw.len()], &[p.d_in(), p.d_fine()]));
    }
    let (hidden, _) = adaptor_hidden(&z, 1, p);
    mlp_backward(1, &z, &hidden, d_raw, p, g);
    Ok(())
}

/// Gradients of `d_fine . gate_fuse(coarse, raw).0` into `wc, wg`; returns
/// the gradient with respect to `raw`.
pub fn gate_fuse_backward(coarse: &[f64], raw: &[f64], d_fine: &[f64], p: &AdaptorParams, g: &mut AdaptorParams) -> Result<Vec<f64>> {
    let (_, gate) = gate_fuse(coarse, raw, p)?;
    if d_fine.len() != p.d_fine() {
        return Err(Error::shape("gate_fuse_backward", &[d_fine.len()], &[p.d_fine()]));
    }
    Ok(gate_backward(1, coarse, raw, &gate, d_fine, p, g))
}

/// `phi~(Concat(z1, z2, z3))` for one item.
pub fn fine_adaptor(z1: &[f64], z2: &[f64], z3: &[f64], p: &AdaptorParams) -> Result<Vec<f64>> {
    let z = [z1, z2, z3].concat();
    if z.len() != p.d_in() || z1.len() != z2.len() || z2.len() != z3.len() {
        return Err(Error::shape("fine_adaptor", &[z1.len(), z2.len(), z3.len()], &[p.d_in()]));
    }
    Ok(adaptor_hidden(&z, 1, p).1)
}

/// `p_fine = W_c p_coarse + r * p_raw_fine`, `r = sigmoid(W_g [p_coarse, p_raw_fine])`.
///
/// Returns `(p_fine, r)`.
pub fn gate_fuse(coarse: &[f64], raw: &[f64], p: &AdaptorParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, df) = (p.d(), p.d_fine());
    if coarse.len() != d || raw.len() != df {
        return Err(Error::shape("gate_fuse", &[coarse.len(), raw.len()], &[d, df]));
    }
    let cat = [coarse, raw].concat();
    let mut r = vec![0.0; df];
    ops::matvec_rowvec(&cat, p.wg.data(), &mut r);
    r.iter_mut().for_each(|s| *s = ops::sigmoid(*s));
    let mut fine = vec![0.0; df];
    ops::matvec_rowvec(coarse, p.wc.data(), &mut fine);
    for ((f, &g), &x) in fine.iter_mut().zip(&r).zip(raw) {
        *f += g * x;
    }
    Ok((fine, r))
}

/// Fine proxies of every item, computed row by row from the cached features.
pub fn emit_fine_proxies(items: &[Item], pooled: &ProxyMap, coarse: &ProxyMap, p: &AdaptorParams) -> Result<ProxyMap> {
    let mut out = BTreeMap::new();
    let third = p.d_in() / N_GROUPS;
    for item in items {
        let id = item.item_id;
        let missing = |what: &str| Error::MissingProxy {
            item_id: id,
            variant: what.into(),
        };
        let z = pooled.get(&id).ok_or_else(|| missing("pooled features"))?;
        let c = coarse.get(&id).ok_or_else(|| missing("coarse"))?;
        if z.len() != p.d_in() {
            return Err(Error::shape("emit_fine_proxies", &[z.len()], &[p.d_in()]));
        }
        let raw = fine_adaptor(&z[..third], &z[third..2 * third], &z[2 * third..], p)?;
        out.insert(id, gate_fuse(c, &raw, p)?.0);
    }
    Ok(out)
}

/// Parameter count of the adaptor and gate.
pub fn adaptor_param_count(p: &AdaptorParams) -> usize {
    p.num_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_parameters, DEFAULT_EPS};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn separated_pairs_form_two_clusters() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 10.0], vec![10.0, 10.1]];
        let km = kmeans(&pts, 2, 3, 100).unwrap();
        assert_eq!(km.assignments[0], km.assignments[1]);
        assert_eq!(km.assignments[2], km.assignments[3]);
        assert_ne!(km.assignments[0], km.assignments[2]);
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]];
        let km = kmeans(&pts, 1, 0, 100).unwrap();
        assert!((km.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!((km.centroids[0][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..20 {
            let pts: Vec<Vec<f64>> = (0..40).map(|_| rand_vec(&mut rng, 3)).collect();
            let km = kmeans(&pts, 4, s, 100).unwrap();
            assert!(km.inertia.windows(2).all(|w| w[1] <= w[0]), "{:?}", km.inertia);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(kmeans(&[vec![1.0]], 2, 0, 10).is_err());
    }

    #[test]
    fn zero_weights_give_zero_raw_fine() {
        let mut p = AdaptorParams::init(6, 4, 3, 3, 1);
        p.zero();
        let z = vec![0.5; 2];
        assert_eq!(fine_adaptor(&z, &z, &z, &p).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gate_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AdaptorParams::init(6, 4, 3, 3, 1);
        let c = rand_vec(&mut rng, 3);
        let raw = rand_vec(&mut rng, 3);
        // W_g = 0 and W_c = I at init
        let (fine, r) = gate_fuse(&c, &raw, &p).unwrap();
        for k in 0..3 {
            assert_eq!(r[k], 0.5);
            assert!((fine[k] - (c[k] + 0.5 * raw[k])).abs() < 1e-15);
        }
        let (fine, _) = gate_fuse(&c, &[0.0; 3], &p).unwrap();
        assert_eq!(fine, c);
    }

    #[test]
    fn batched_pass_matches_single_item_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = AdaptorParams::init(9, 5, 4, 4, 2);
        for x in p.wg.data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let n = 3;
        let z = rand_vec(&mut rng, n * 9);
        let c = rand_vec(&mut rng, n * 4);
        let pass = adaptor_forward(&z, &c, n, &p).unwrap();
        for r in 0..n {
            let zr = &z[r * 9..(r + 1) * 9];
            let raw = fine_adaptor(&zr[..3], &zr[3..6], &zr[6..], &p).unwrap();
            let (fine, gate) = gate_fuse(&c[r * 4..(r + 1) * 4], &raw, &p).unwrap();
            for k in 0..4 {
                assert!((pass.fine[r * 4 + k] - fine[k]).abs() < 1e-12);
                assert!(gate[k] > 0.0 && gate[k] < 1.0);
            }
        }
    }

    #[test]
    fn adaptor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = AdaptorParams::init(12, 6, 4, 4, 3);
        for x in p.wg.data_mut().iter_mut().chain(p.wc.data_mut()) {
            *x = rng.random_range(-0.5..0.5);
        }
        let n = 4;
        let z = rand_vec(&mut rng, n * 12);
        let c = rand_vec(&mut rng, n * 4);
        let w = rand_vec(&mut rng, n * 4);
        let pass = adaptor_forward(&z, &c, n, &p).unwrap();
        let mut g = p.zeros_like();
        adaptor_backward(&pass, &w, &p, &mut g);
        let report = check_parameters(
            "adaptor",
            &mut p,
            &g,
            |prm| Ok(ops::dot(&adaptor_forward(&z, &c, n, prm)?.fine, &w)),
            DEFAULT_EPS,
            500,
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn split_backward_matches_fused_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = AdaptorParams::init(9, 5, 4, 4, 1);
        for x in p.wg.data_mut().iter_mut().chain(p.wc.data_mut()) {
            *x = rng.random_range(-0.5..0.5);
        }
        let z = rand_vec(&mut rng, 9);
        let c = rand_vec(&mut rng, 4);
        let w = rand_vec(&mut rng, 4);
        let pass = adaptor_forward(&z, &c, 1, &p).unwrap();
        let mut fused = p.zeros_like();
        adaptor_backward(&pass, &w, &p, &mut fused);

        let raw = fine_adaptor(&z[..3], &z[3..6], &z[6..], &p).unwrap();
        let mut split = p.zeros_like();
        let d_raw = gate_fuse_backward(&c, &raw, &w, &p, &mut split).unwrap();
        fine_adaptor_backward(&z[..3], &z[3..6], &z[6..], &d_raw, &p, &mut split).unwrap();
        for (a, b) in fused.tensors().iter().zip(split.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
