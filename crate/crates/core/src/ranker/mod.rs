//! DIN-style CTR ranker with user/item ID tables, target attention over the
//! click history and explicit pairwise field interactions, plus the proxy
//! injection variants of the ablation ladder.
//!
//! Input layout of the first MLP layer is split in two blocks. The base block
//! `[e_u, s_i, a, e_u.s_i, e_u.a, s_i.a, scalars]` is shared by every
//! variant; the extra block holds proxy fields, their products with all
//! earlier fields, and concat-only vectors. Extra-block weights start at zero,
//! so a freshly initialized variant predicts exactly what the base model with
//! the same seed predicts.

mod mlp;

pub use mlp::{Mlp, MlpPass};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align1::IdEmbeddingTable;
use crate::align2::{adaptor_backward, adaptor_forward, AdaptorParams, AdaptorPass};
use crate::datagen::{Corpus, InteractionSet};
use crate::diffcore::ops::{self, gemm};
use crate::diffcore::{AdamW, AdamWConfig, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::ProxyMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    V1ContentFeature,
    V2MlpMap,
    V3Coarse,
    V4ConcatFine,
    V5StructureReuse,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::V1ContentFeature,
        Variant::V2MlpMap,
        Variant::V3Coarse,
        Variant::V4ConcatFine,
        Variant::V5StructureReuse,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::V1ContentFeature => "v1",
            Variant::V2MlpMap => "v2",
            Variant::V3Coarse => "v3",
            Variant::V4ConcatFine => "v4",
            Variant::V5StructureReuse => "v5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| {
                v.short() == s
                    || serde_json::to_value(v).ok().and_then(|x| x.as_str().map(|x| x == s)) == Some(true)
            })
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }

    pub fn uses_content(self) -> bool {
        matches!(self, Variant::V1ContentFeature | Variant::V2MlpMap)
    }

    pub fn uses_coarse(self) -> bool {
        matches!(self, Variant::V3Coarse | Variant::V4ConcatFine | Variant::V5StructureReuse)
    }

    pub fn uses_fine(self) -> bool {
        matches!(self, Variant::V4ConcatFine | Variant::V5StructureReuse)
    }

    fn n_extra_fields(self) -> usize {
        match self {
            Variant::Base => 0,
            Variant::V5StructureReuse => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    pub d: usize,
    pub variant: Variant,
    pub mlp_hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub emb_init_std: f64,
    /// Hidden width of the v2 content-to-ID regression MLP.
    pub mapper_hidden: usize,
    pub mapper_epochs: usize,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            d: 32,
            variant: Variant::V5StructureReuse,
            mlp_hidden: vec![128, 64],
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 5,
            batch_size: 512,
            emb_init_std: 0.1,
            mapper_hidden: 64,
            mapper_epochs: 300,
            seed: 1,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("d", "must be >= 1"));
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
            return Err(Error::config("mlp_hidden", "need at least one non-zero layer"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs", "epochs and batch_size must be >= 1"));
        }
        AdamWConfig::new(self.lr, self.weight_decay).validate()
    }
}

/// Per-item side inputs consumed by the proxy variants, row `k` = item `k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemInputs {
    /// v1: raw pooled content `n x D`; v2: mapped vectors `n x d`.
    pub content: Option<Tensor>,
    /// `n x d` coarse proxies.
    pub coarse: Option<Tensor>,
    /// `n x 3D` frozen multi-layer features feeding the adaptor.
    pub pooled: Option<Tensor>,
}

fn dense(map: &ProxyMap, n_items: usize, variant: Variant, what: &str) -> Result<Tensor> {
    let width = map.values().next().map(|v| v.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(n_items * width);
    for id in 0..n_items as u32 {
        let v = map.get(&id).ok_or_else(|| Error::MissingProxy {
            item_id: id,
            variant: format!("{variant} ({what})"),
        })?;
        if v.len() != width {
            return Err(Error::shape(what, &[v.len()], &[width]));
        }
        data.extend_from_slice(v);
    }
    Tensor::new(&[n_items, width], data)
}

impl ItemInputs {
    /// Collects the maps a variant needs; a missing item is reported with the
    /// variant name.
    pub fn build(
        variant: Variant,
        n_items: usize,
        content: Option<&ProxyMap>,
        coarse: Option<&ProxyMap>,
        pooled: Option<&ProxyMap>,
    ) -> Result<Self> {
        let need = |m: Option<&ProxyMap>, what: &str| -> Result<Tensor> {
            let m = m.ok_or_else(|| Error::MissingProxy {
                item_id: 0,
                variant: format!("{variant} ({what})"),
            })?;
            dense(m, n_items, variant, what)
        };
        Ok(Self {
            content: if variant.uses_content() {
                Some(need(content, "content")?)
            } else {
                None
            },
            coarse: if variant.uses_coarse() {
                Some(need(coarse, "coarse")?)
            } else {
                None
            },
            pooled: if variant.uses_fine() {
                Some(need(pooled, "pooled")?)
            } else {
                None
            },
        })
    }
}

/// Sizes the parameter set depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankerShape {
    pub n_users: usize,
    pub n_items: usize,
    pub n_scalars: usize,
    /// Width of `ItemInputs::content` (v1 projects it to `d`).
    pub d_content: usize,
    pub d_pooled: usize,
    pub adaptor_hidden: usize,
}

impl RankerShape {
    pub fn of(corpus: &Corpus, inputs: &ItemInputs, adaptor_hidden: usize) -> Self {
        Self {
            n_users: corpus.users.len(),
            n_items: corpus.items.len(),
            n_scalars: crate::datagen::N_SCALARS,
            d_content: inputs.content.as_ref().map_or(0, |t| t.cols()),
            d_pooled: inputs.pooled.as_ref().map_or(0, |t| t.cols()),
            adaptor_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankerParams {
    pub user_emb: Tensor,
    pub item_emb: Tensor,
    pub att_q: Tensor,
    pub att_k: Tensor,
    pub att_v: Tensor,
    pub w1_base: Tensor,
    pub b1: Tensor,
    /// Remaining hidden layers and the logit head.
    pub tail: Mlp,
    /// First-layer weights of the extra block (zero at init).
    pub w1_extra: Option<Tensor>,
    /// v1 projection of raw content features to `d`.
    pub content_proj: Option<Tensor>,
    /// v5 slot side-information maps (zero at init).
    pub slot_coarse: Option<Tensor>,
    pub slot_fine: Option<Tensor>,
    pub adaptor: Option<AdaptorParams>,
}

fn base_input_width(d: usize, n_scalars: usize) -> usize {
    3 * d + 3 + n_scalars
}

fn extra_input_width(variant: Variant, d: usize) -> usize {
    let n_x = variant.n_extra_fields();
    let products: usize = (3..3 + n_x).sum();
    let concat = if variant == Variant::V4ConcatFine { d } else { 0 };
    n_x * d + products + concat
}

impl RankerParams {
    pub fn init(cfg: &RankerConfig, shape: &RankerShape) -> Self {
        let d = cfg.d;
        let h1 = cfg.mlp_hidden[0];
        let in_b = base_input_width(d, shape.n_scalars);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4A4E_4B00);
        let user_emb = Tensor::randn(&[shape.n_users, d], cfg.emb_init_std, &mut rng);
        let item_emb = Tensor::randn(&[shape.n_items, d], cfg.emb_init_std, &mut rng);
        let sd = 1.0 / (d as f64).sqrt();
        let att_q = Tensor::randn(&[d, d], sd, &mut rng);
        let att_k = Tensor::randn(&[d, d], sd, &mut rng);
        let att_v = Tensor::randn(&[d, d], sd, &mut rng);
        let w1_base = Tensor::randn(&[in_b, h1], (2.0 / in_b as f64).sqrt(), &mut rng);
        let mut sizes = cfg.mlp_hidden.clone();
        sizes.push(1);
        let tail = Mlp::init(&sizes, false, &mut rng);

        let v = cfg.variant;
        let mut extra = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0E47_2A00);
        let content_proj = (v == Variant::V1ContentFeature).then(|| {
            Tensor::randn(&[shape.d_content, d], 1.0 / (shape.d_content.max(1) as f64).sqrt(), &mut extra)
        });
        let is_v5 = v == Variant::V5StructureReuse;
        Self {
            user_emb,
            item_emb,
            att_q,
            att_k,
            att_v,
            w1_base,
            b1: Tensor::zeros(&[h1]),
            tail,
            w1_extra: (v != Variant::Base).then(|| Tensor::zeros(&[extra_input_width(v, d), h1])),
            content_proj,
            slot_coarse: is_v5.then(|| Tensor::zeros(&[d, d])),
            slot_fine: is_v5.then(|| Tensor::zeros(&[d, d])),
            adaptor: v
                .uses_fine()
                .then(|| AdaptorParams::init(shape.d_pooled, shape.adaptor_hidden, d, d, cfg.seed)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Parameters excluding the adaptor.
    pub fn ranker_param_count(&self) -> usize {
        self.num_parameters() - self.adaptor.as_ref().map_or(0, |a| a.num_parameters())
    }

    /// Zeroes every weight that reads a proxy or content input.
    pub fn zero_proxy_weights(&mut self) {
        for t in [&mut self.w1_extra, &mut self.slot_coarse, &mut self.slot_fine]
            .into_iter()
            .flatten()
        {
            t.fill(0.0);
        }
    }
}

impl Parameters for RankerParams {
    fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = ["user_emb", "item_emb", "att_q", "att_k", "att_v", "w1_base", "b1"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        n.extend(self.tail.names().into_iter().map(|s| format!("tail.{s}")));
        for (name, t) in [
            ("w1_extra", &self.w1_extra),
            ("content_proj", &self.content_proj),
            ("slot_coarse", &self.slot_coarse),
            ("slot_fine", &self.slot_fine),
        ] {
            if t.is_some() {
                n.push(name.to_string());
            }
        }
        if let Some(a) = &self.adaptor {
            n.extend(a.names().into_iter().map(|s| format!("adaptor.{s}")));
        }
        n
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.user_emb,
            &self.item_emb,
            &self.att_q,
            &self.att_k,
            &self.att_v,
            &self.w1_base,
            &self.b1,
        ];
        v.extend(self.tail.tensors());
        v.extend(
            [&self.w1_extra, &self.content_proj, &self.slot_coarse, &self.slot_fine]
                .into_iter()
                .flatten(),
        );
        if let Some(a) = &self.adaptor {
            v.extend(a.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.user_emb,
            &mut self.item_emb,
            &mut self.att_q,
            &mut self.att_k,
            &mut self.att_v,
            &mut self.w1_base,
            &mut self.b1,
        ];
        v.extend(self.tail.tensors_mut());
        v.extend(
            [
                &mut self.w1_extra,
                &mut self.content_proj,
                &mut self.slot_coarse,
                &mut self.slot_fine,
            ]
            .into_iter()
            .flatten(),
        );
        if let Some(a) = &mut self.adaptor {
            v.extend(a.tensors_mut());
        }
        v
    }

    /// ID tables are excluded from weight decay so untouched rows stay put.
    fn decay_mask(&self) -> Vec<bool> {
        let mut m: Vec<bool> = self.tensors().iter().map(|t| t.shape().len() >= 2).collect();
        m[0] = false;
        m[1] = false;
        m
    }
}

/// One interaction as seen by the ranker.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub user: u32,
    pub item: u32,
    pub history: &'a [u32],
    pub scalars: &'a [f64],
    pub label: u8,
}

pub fn examples<'a>(corpus: &'a Corpus, set: &InteractionSet) -> Vec<Example<'a>> {
    set.indices
        .iter()
        .map(|&k| {
            let it = &corpus.interactions[k];
            Example {
                user: it.user_id,
                item: it.item_id,
                history: &it.context.history,
                scalars: &it.context.scalars,
                label: it.label,
            }
        })
        .collect()
}

/// Scaled dot-product attention of one target over a history.
///
/// Returns the `d`-vector summary and the attention weights; an empty history
/// gives the zero vector.
pub fn target_attention(
    history: &[Vec<f64>],
    target: &[f64],
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = target.len();
    if wq.shape() != [d, d] || wk.shape() != [d, d] || wv.shape() != [d, d] {
        return Err(Error::shape("target_attention", wq.shape(), &[d, d]));
    }
    if history.is_empty() {
        return Ok((vec![0.0; d], Vec::new()));
    }
    let mut q = vec![0.0; d];
    ops::matvec_rowvec(target, wq.data(), &mut q);
    let scale = 1.0 / (d as f64).sqrt();
    let mut w: Vec<f64> = history
        .iter()
        .map(|h| {
            let mut k = vec![0.0; d];
            ops::matvec_rowvec(h, wk.data(), &mut k);
            ops::dot(&q, &k) * scale
        })
        .collect();
    ops::softmax_inplace(&mut w);
    let mut out = vec![0.0; d];
    for (h, &wj) in history.iter().zip(&w) {
        let mut v = vec![0.0; d];
        ops::matvec_rowvec(h, wv.data(), &mut v);
        ops::axpy(wj, &v, &mut out);
    }
    Ok((out, w))
}

/// Concatenated fields, all pairwise inner products (in `(i, j)`, `i < j`
/// order) and the scalars.
pub fn interaction_input(fields: &[Vec<f64>], scalars: &[f64]) -> Result<Vec<f64>> {
    if fields.len() < 2 {
        return Err(Error::Input("feature interaction needs >= 2 fields".into()));
    }
    let mut x: Vec<f64> = fields.concat();
    for i in 0..fields.len() {
        for j in i + 1..fields.len() {
            if fields[i].len() != fields[j].len() {
                return Err(Error::shape("feature_interaction", &[fields[i].len()], &[fields[j].len()]));
            }
            x.push(ops::dot(&fields[i], &fields[j]));
        }
    }
    x.extend_from_slice(scalars);
    Ok(x)
}

/// Interaction features through a ReLU MLP, giving the logit precursor.
pub fn feature_interaction(fields: &[Vec<f64>], scalars: &[f64], mlp: &Mlp) -> Result<Vec<f64>> {
    let x = interaction_input(fields, scalars)?;
    Ok(mlp.forward(&x, 1)?.output().to_vec())
}

/// Mean binary cross-entropy with probability clipping.
pub fn ctr_loss(p: &[f64], y: &[u8]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Input("ctr_loss on an empty batch".into()));
    }
    if p.len() != y.len() {
        return Err(Error::shape("ctr_loss", &[p.len()], &[y.len()]));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    Ok(p.iter().zip(y).map(|(&p, &y)| ops::bce(p, y as f64)).sum::<f64>() / p.len() as f64)
}

/// Per-item quantities shared by every example of a step.
struct ItemState {
    slots: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    fine: Option<AdaptorPass>,
    /// First extra field of every item (v1..v4, and v5's coarse field).
    extra0: Option<Vec<f64>>,
}

struct BatchPass {
    /// `fields[f]` is `B x d`.
    fields: Vec<Vec<f64>>,
    concat: Option<Vec<f64>>,
    q: Vec<f64>,
    weights: Vec<Vec<f64>>,
    xb: Vec<f64>,
    xx: Vec<f64>,
    h1: Vec<f64>,
    tail: MlpPass,
    probs: Vec<f64>,
}

const BASE_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Clone, Debug, PartialEq)]
pub struct Ranker {
    pub config: RankerConfig,
    pub shape: RankerShape,
    pub params: RankerParams,
}

impl Ranker {
    pub fn new(config: RankerConfig, shape: RankerShape) -> Result<Self> {
        config.validate()?;
        let params = RankerParams::init(&config, &shape);
        Ok(Self { config, shape, params })
    }

    fn check_inputs(&self, inputs: &ItemInputs) -> Result<()> {
        let v = self.config.variant;
        let n = self.shape.n_items;
        let missing = |what: &str| Error::MissingProxy {
            item_id: 0,
            variant: format!("{v} ({what})"),
        };
        let check = |t: &Option<Tensor>, need: bool, width: usize, what: &str| -> Result<()> {
            match (t, need) {
                (Some(t), true) if t.shape() != [n, width] => {
                    Err(Error::shape(what, t.shape(), &[n, width]))
                }
                (None, true) => Err(missing(what)),
                _ => Ok(()),
            }
        };
        let content_w = if v == Variant::V2MlpMap { self.config.d } else { self.shape.d_content };
        check(&inputs.content, v.uses_content(), content_w, "content")?;
        check(&inputs.coarse, v.uses_coarse(), self.config.d, "coarse")?;
        check(&inputs.pooled, v.uses_fine(), self.shape.d_pooled, "pooled")
    }

    fn item_state(&self, p: &RankerParams, inputs: &ItemInputs) -> Result<ItemState> {
        let d = self.config.d;
        let n = self.shape.n_items;
        let v = self.config.variant;
        let fine = match &p.adaptor {
            Some(a) => Some(adaptor_forward(
                inputs.pooled.as_ref().expect("checked").data(),
                inputs.coarse.as_ref().expect("checked").data(),
                n,
                a,
            )?),
            None => None,
        };
        let mut slots = p.item_emb.data().to_vec();
        if let (Some(wc), Some(wf)) = (&p.slot_coarse, &p.slot_fine) {
            let coarse = inputs.coarse.as_ref().expect("checked").data();
            gemm(false, false, n, d, d, 1.0, coarse, wc.data(), 1.0, &mut slots);
            let fp = &fine.as_ref().expect("v5 has an adaptor").fine;
            gemm(false, false, n, d, d, 1.0, fp, wf.data(), 1.0, &mut slots);
        }
        let keys = ops::matmul(&slots, p.att_k.data(), n, d, d);
        let values = ops::matmul(&slots, p.att_v.data(), n, d, d);
        let extra0 = match v {
            Variant::Base => None,
            Variant::V1ContentFeature => {
                let c = inputs.content.as_ref().expect("checked");
                let w = p.content_proj.as_ref().expect("v1 has a projection");
                Some(ops::matmul(c.data(), w.data(), n, c.cols(), d))
            }
            Variant::V2MlpMap => Some(inputs.content.as_ref().expect("checked").data().to_vec()),
            _ => Some(inputs.coarse.as_ref().expect("checked").data().to_vec()),
        };
        Ok(ItemState {
            slots,
            keys,
            values,
            fine,
            extra0,
        })
    }

    fn forward_batch(&self, p: &RankerParams, st: &ItemState, batch: &[Example]) -> Result<BatchPass> {
        let d = self.config.d;
        let v = self.config.variant;
        let bsz = batch.len();
        let n_fields = 3 + v.n_extra_fields();
        let ns = self.shape.n_scalars;
        let scale = 1.0 / (d as f64).sqrt();
        let row = |i: u32| i as usize * d..(i as usize + 1) * d;

        let mut fields = vec![vec![0.0; bsz * d]; n_fields];
        let mut concat = (v == Variant::V4ConcatFine).then(|| vec![0.0; bsz * d]);
        let mut q = vec![0.0; bsz * d];
        let mut weights = Vec::with_capacity(bsz);
        for (b, ex) in batch.iter().enumerate() {
            if ex.user as usize >= self.shape.n_users || ex.item as usize >= self.shape.n_items {
                return Err(Error::Input(format!("unknown user {} or item {}", ex.user, ex.item)));
            }
            if ex.scalars.len() != ns {
                return Err(Error::shape("scalars", &[ex.scalars.len()], &[ns]));
            }
            let out = b * d..(b + 1) * d;
            fields[0][out.clone()].copy_from_slice(p.user_emb.row(ex.user as usize));
            let target = &st.slots[row(ex.item)];
            fields[1][out.clone()].copy_from_slice(target);
            let qb = &mut q[out.clone()];
            ops::matvec_rowvec(target, p.att_q.data(), qb);
            let mut w: Vec<f64> = ex
                .history
                .iter()
                .map(|&h| ops::dot(qb, &st.keys[row(h)]) * scale)
                .collect();
            if !w.is_empty() {
                ops::softmax_inplace(&mut w);
                for (&h, &wj) in ex.history.iter().zip(&w) {
                    ops::axpy(wj, &st.values[row(h)], &mut fields[2][out.clone()]);
                }
            }
            weights.push(w);
            if let Some(e0) = &st.extra0 {
                fields[3][out.clone()].copy_from_slice(&e0[row(ex.item)]);
            }
            if let Some(f) = &st.fine {
                let src = &f.fine[row(ex.item)];
                match v {
                    Variant::V5StructureReuse => fields[4][out].copy_from_slice(src),
                    _ => concat.as_mut().expect("v4")[out].copy_from_slice(src),
                }
            }
        }

        let in_b = base_input_width(d, ns);
        let in_x = extra_input_width(v, d);
        let mut xb = vec![0.0; bsz * in_b];
        let mut xx = vec![0.0; bsz * in_x];
        for (b, ex) in batch.iter().enumerate() {
            let f = |k: usize| &fields[k][b * d..(b + 1) * d];
            let xr = &mut xb[b * in_b..(b + 1) * in_b];
            for k in 0..3 {
                xr[k * d..(k + 1) * d].copy_from_slice(f(k));
            }
            for (m, &(i, j)) in BASE_PAIRS.iter().enumerate() {
                xr[3 * d + m] = ops::dot(f(i), f(j));
            }
            xr[3 * d + 3..].copy_from_slice(ex.scalars);
            if in_x > 0 {
                let xr = &mut xx[b * in_x..(b + 1) * in_x];
                let mut o = 0;
                for k in 3..n_fields {
                    xr[o..o + d].copy_from_slice(f(k));
                    o += d;
                }
                for k in 3..n_fields {
                    for j in 0..k {
                        xr[o] = ops::dot(f(j), f(k));
                        o += 1;
                    }
                }
                if let Some(c) = &concat {
                    xr[o..o + d].copy_from_slice(&c[b * d..(b + 1) * d]);
                }
            }
        }

        let h1w = self.config.mlp_hidden[0];
        let mut h1 = vec![0.0; bsz * h1w];
        for b in 0..bsz {
            h1[b * h1w..(b + 1) * h1w].copy_from_slice(p.b1.data());
        }
        gemm(false, false, bsz, in_b, h1w, 1.0, &xb, p.w1_base.data(), 1.0, &mut h1);
        if let Some(wx) = &p.w1_extra {
            gemm(false, false, bsz, in_x, h1w, 1.0, &xx, wx.data(), 1.0, &mut h1);
        }
        ops::relu_inplace(&mut h1);
        let tail = p.tail.forward(&h1, bsz)?;
        let probs: Vec<f64> = tail.output().iter().map(|&z| ops::clip_prob(ops::sigmoid(z))).collect();
        if probs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("ranker forward".into()));
        }
        Ok(BatchPass {
            fields,
            concat,
            q,
            weights,
            xb,
            xx,
            h1,
            tail,
            probs,
        })
    }

    /// Accumulates gradients of `mean BCE(batch)` into `g`.
    fn backward_batch(
        &self,
        p: &RankerParams,
        inputs: &ItemInputs,
        st: &ItemState,
        batch: &[Example],
        pass: &BatchPass,
        g: &mut RankerParams,
    ) {
        let d = self.config.d;
        let v = self.config.variant;
        let n = self.shape.n_items;
        let bsz = batch.len();
        let n_fields = pass.fields.len();
        let ns = self.shape.n_scalars;
        let scale = 1.0 / (d as f64).sqrt();
        let h1w = self.config.mlp_hidden[0];

        let d_logit: Vec<f64> = pass
            .probs
            .iter()
            .zip(batch)
            .map(|(&pr, ex)| ops::bce_grad(pr, ex.label as f64) * pr * (1.0 - pr) / bsz as f64)
            .collect();
        let mut d_h1 = p.tail.backward(&pass.tail, &d_logit, &mut g.tail);
        ops::relu_backward_inplace(&pass.h1, &mut d_h1);
        for b in 0..bsz {
            ops::axpy(1.0, &d_h1[b * h1w..(b + 1) * h1w], g.b1.data_mut());
        }
        let in_b = base_input_width(d, ns);
        let in_x = extra_input_width(v, d);
        gemm(true, false, in_b, bsz, h1w, 1.0, &pass.xb, &d_h1, 1.0, g.w1_base.data_mut());
        let mut dxb = vec![0.0; bsz * in_b];
        gemm(false, true, bsz, h1w, in_b, 1.0, &d_h1, p.w1_base.data(), 0.0, &mut dxb);
        let mut dxx = vec![0.0; bsz * in_x];
        if let (Some(wx), Some(gx)) = (&p.w1_extra, &mut g.w1_extra) {
            gemm(true, false, in_x, bsz, h1w, 1.0, &pass.xx, &d_h1, 1.0, gx.data_mut());
            gemm(false, true, bsz, h1w, in_x, 1.0, &d_h1, wx.data(), 0.0, &mut dxx);
        }

        let mut d_slots = vec![0.0; n * d];
        let mut d_keys = vec![0.0; n * d];
        let mut d_values = vec![0.0; n * d];
        let mut d_extra0 = vec![0.0; n * d];
        let mut d_fine = vec![0.0; n * d];
        let mut df = vec![vec![0.0; d]; n_fields];
        for (b, ex) in batch.iter().enumerate() {
            let f = |k: usize| &pass.fields[k][b * d..(b + 1) * d];
            for k in 0..n_fields {
                df[k].iter_mut().for_each(|x| *x = 0.0);
            }
            let gb = &dxb[b * in_b..(b + 1) * in_b];
            for k in 0..3 {
                ops::axpy(1.0, &gb[k * d..(k + 1) * d], &mut df[k]);
            }
            for (m, &(i, j)) in BASE_PAIRS.iter().enumerate() {
                let gp = gb[3 * d + m];
                ops::axpy(gp, f(j), &mut df[i]);
                ops::axpy(gp, f(i), &mut df[j]);
            }
            if in_x > 0 {
                let gx = &dxx[b * in_x..(b + 1) * in_x];
                let mut o = 0;
                for k in 3..n_fields {
                    ops::axpy(1.0, &gx[o..o + d], &mut df[k]);
                    o += d;
                }
                for k in 3..n_fields {
                    for j in 0..k {
                        let gp = gx[o];
                        ops::axpy(gp, f(k), &mut df[j]);
                        ops::axpy(gp, f(j), &mut df[k]);
                        o += 1;
                    }
                }
                if pass.concat.is_some() {
                    let t = ex.item as usize;
                    ops::axpy(1.0, &gx[o..o + d], &mut d_fine[t * d..(t + 1) * d]);
                }
            }

            let u = ex.user as usize;
            let t = ex.item as usize;
            ops::axpy(1.0, &df[0], g.user_emb.row_mut(u));
            ops::axpy(1.0, &df[1], &mut d_slots[t * d..(t + 1) * d]);
            if n_fields > 3 {
                ops::axpy(1.0, &df[3], &mut d_extra0[t * d..(t + 1) * d]);
            }
            if n_fields > 4 {
                ops::axpy(1.0, &df[4], &mut d_fine[t * d..(t + 1) * d]);
            }

            // target attention
            let w = &pass.weights[b];
            if !w.is_empty() {
                let da = &df[2];
                let mut dw: Vec<f64> = ex
                    .history
                    .iter()
                    .map(|&h| ops::dot(da, &st.values[h as usize * d..(h as usize + 1) * d]))
                    .collect();
                for (&h, &wj) in ex.history.iter().zip(w) {
                    ops::axpy(wj, da, &mut d_values[h as usize * d..(h as usize + 1) * d]);
                }
                ops::softmax_backward_inplace(w, &mut dw);
                let qb = &pass.q[b * d..(b + 1) * d];
                let mut dq = vec![0.0; d];
                for (&h, &ds) in ex.history.iter().zip(&dw) {
                    let hr = h as usize * d..(h as usize + 1) * d;
                    ops::axpy(ds * scale, &st.keys[hr.clone()], &mut dq);
                    ops::axpy(ds * scale, qb, &mut d_keys[hr]);
                }
                let target = &st.slots[t * d..(t + 1) * d];
                let wq = p.att_q.data();
                let gq = g.att_q.data_mut();
                let ds_t = &mut d_slots[t * d..(t + 1) * d];
                for i in 0..d {
                    ops::axpy(target[i], &dq, &mut gq[i * d..(i + 1) * d]);
                    ds_t[i] += ops::dot(&wq[i * d..(i + 1) * d], &dq);
                }
            }
        }

        gemm(true, false, d, n, d, 1.0, &st.slots, &d_keys, 1.0, g.att_k.data_mut());
        gemm(true, false, d, n, d, 1.0, &st.slots, &d_values, 1.0, g.att_v.data_mut());
        gemm(false, true, n, d, d, 1.0, &d_keys, p.att_k.data(), 1.0, &mut d_slots);
        gemm(false, true, n, d, d, 1.0, &d_values, p.att_v.data(), 1.0, &mut d_slots);

        ops::axpy(1.0, &d_slots, g.item_emb.data_mut());
        if let (Some(wf), Some(gc), Some(gf)) = (&p.slot_fine, &mut g.slot_coarse, &mut g.slot_fine) {
            let coarse = inputs.coarse.as_ref().expect("checked").data();
            let fine = &st.fine.as_ref().expect("v5").fine;
            gemm(true, false, d, n, d, 1.0, coarse, &d_slots, 1.0, gc.data_mut());
            gemm(true, false, d, n, d, 1.0, fine, &d_slots, 1.0, gf.data_mut());
            gemm(false, true, n, d, d, 1.0, &d_slots, wf.data(), 1.0, &mut d_fine);
        }
        if let (Some(gp), Some(c)) = (&mut g.content_proj, &inputs.content) {
            gemm(true, false, c.cols(), n, d, 1.0, c.data(), &d_extra0, 1.0, gp.data_mut());
        }
        if let (Some(a), Some(ga), Some(fp)) = (&p.adaptor, &mut g.adaptor, &st.fine) {
            adaptor_backward(fp, &d_fine, a, ga);
        }
    }

    /// Loss and gradients of one batch under explicit parameters.
    pub fn loss_and_grad(&self, p: &RankerParams, inputs: &ItemInputs, batch: &[Example]) -> Result<(f64, RankerParams)> {
        self.check_inputs(inputs)?;
        let st = self.item_state(p, inputs)?;
        let pass = self.forward_batch(p, &st, batch)?;
        let labels: Vec<u8> = batch.iter().map(|e| e.label).collect();
        let loss = ctr_loss(&pass.probs, &labels)?;
        let mut g = p.zeros_like();
        self.backward_batch(p, inputs, &st, batch, &pass, &mut g);
        Ok((loss, g))
    }

    pub fn loss(&self, p: &RankerParams, inputs: &ItemInputs, batch: &[Example]) -> Result<f64> {
        self.check_inputs(inputs)?;
        let st = self.item_state(p, inputs)?;
        let pass = self.forward_batch(p, &st, batch)?;
        let labels: Vec<u8> = batch.iter().map(|e| e.label).collect();
        ctr_loss(&pass.probs, &labels)
    }

    /// Click probabilities, computed in fixed-size chunks.
    pub fn predict(&self, inputs: &ItemInputs, batch: &[Example]) -> Result<Vec<f64>> {
        self.check_inputs(inputs)?;
        let st = self.item_state(&self.params, inputs)?;
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(4096) {
            out.extend(self.forward_batch(&self.params, &st, chunk)?.probs);
        }
        Ok(out)
    }

    pub fn predict_ctr(&self, inputs: &ItemInputs, example: &Example) -> Result<f64> {
        Ok(self.predict(inputs, std::slice::from_ref(example))?[0])
    }

    /// Fine proxies under the current adaptor, for variants that have one.
    pub fn fine_proxies(&self, inputs: &ItemInputs) -> Result<Option<ProxyMap>> {
        self.check_inputs(inputs)?;
        let Some(f) = self.item_state(&self.params, inputs)?.fine else {
            return Ok(None);
        };
        let d = self.config.d;
        Ok(Some(
            (0..self.shape.n_items)
                .map(|i| (i as u32, f.fine[i * d..(i + 1) * d].to_vec()))
                .collect(),
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRanker {
    pub ranker: Ranker,
    pub epoch_losses: Vec<f64>,
}

pub fn train_ranker(
    corpus: &Corpus,
    train: &InteractionSet,
    inputs: &ItemInputs,
    cfg: &RankerConfig,
    adaptor_hidden: usize,
) -> Result<TrainedRanker> {
    let shape = RankerShape::of(corpus, inputs, adaptor_hidden);
    let mut ranker = Ranker::new(cfg.clone(), shape)?;
    ranker.check_inputs(inputs)?;
    if train.is_empty() {
        return Err(Error::EmptySplit("no training interactions".into()));
    }
    let data = examples(corpus, train);
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A1E_0005);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| data[k]));
            let (loss, g) = ranker.loss_and_grad(&ranker.params, inputs, &batch)?;
            opt.step(&mut ranker.params, &g)?;
            total += loss * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("ranker loss at epoch {epoch}")));
        }
        log::info!("ranker {} epoch {} loss {mean:.5}", cfg.variant, epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(TrainedRanker { ranker, epoch_losses })
}

/// Content-to-ID regression used by the v2 baseline: an MLP from frozen
/// content features to the unit ID targets, fitted by mean squared error on
/// items that have a target.
pub fn fit_content_mapper(
    content: &ProxyMap,
    table: &IdEmbeddingTable,
    hidden: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProxyMap> {
    let train: Vec<(&Vec<f64>, &Vec<f64>)> = table
        .targets
        .iter()
        .filter_map(|(id, e)| content.get(id).map(|z| (z, e)))
        .collect();
    if train.is_empty() {
        return Err(Error::EmptyTable("no content features share ids with the ID table".into()));
    }
    let d_in = train[0].0.len();
    let d = table.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0B2_CF00);
    let mut mlp = Mlp::init(&[d_in, hidden, d], false, &mut rng);
    let n = train.len();
    let x: Vec<f64> = train.iter().flat_map(|(z, _)| z.iter().copied()).collect();
    let y: Vec<f64> = train.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    let mut opt = AdamW::new(AdamWConfig::new(lr, 0.0))?;
    for _ in 0..epochs {
        let pass = mlp.forward(&x, n)?;
        let d_out: Vec<f64> = pass
            .output()
            .iter()
            .zip(&y)
            .map(|(o, t)| 2.0 * (o - t) / n as f64)
            .collect();
        let mut g = mlp.zeros_like();
        mlp.backward(&pass, &d_out, &mut g);
        opt.step(&mut mlp, &g)?;
    }
    content
        .iter()
        .map(|(&id, z)| Ok((id, mlp.forward(z, 1)?.output().to_vec())))
        .collect()
}

#[cfg(test)]
mod tests;
