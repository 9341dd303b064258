//! Small multimodal content encoder: token and patch embeddings, a stack of
//! bidirectional pre-norm transformer blocks, attention pooling `g` with one
//! learned query, and the projection MLP `phi` into the unit sphere of the ID
//! space.
//!
//! Forward passes optionally record a [`EncoderTape`]; `backward` consumes it
//! and accumulates exact gradients into an [`EncoderParams`] of the same
//! shape.

mod prompt;

pub use prompt::{build_prompt, fixed_prompt_len, PromptTokens, Special, N_SPECIAL, SUFFIX};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::ops::{self, gemm};
use crate::diffcore::{Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    /// Content vocabulary; special tokens are appended after it.
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub d_id: usize,
    pub n_patches: usize,
    pub d_patch: usize,
    pub d_ff: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_hidden: 64,
            n_heads: 4,
            vocab_size: 500,
            max_tokens: 32,
            d_id: 32,
            n_patches: 4,
            d_patch: 8,
            d_ff: 128,
        }
    }
}

impl EncoderConfig {
    pub fn total_vocab(&self) -> usize {
        self.vocab_size + N_SPECIAL
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_hidden == 0 || self.d_hidden % self.n_heads != 0 {
            return Err(Error::config(
                "d_hidden",
                format!("{} not divisible by n_heads {}", self.d_hidden, self.n_heads),
            ));
        }
        if self.n_layers < 3 {
            return Err(Error::config("n_layers", "need at least 3 layers"));
        }
        if self.max_tokens <= fixed_prompt_len(self.n_patches) {
            return Err(Error::config("max_tokens", "leaves no room for item text"));
        }
        for (f, v) in [
            ("vocab_size", self.vocab_size),
            ("d_id", self.d_id),
            ("d_patch", self.d_patch),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

const BLOCK_NAMES: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
];

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g,
            &self.ln2_b, &self.ff_w1, &self.ff_b1, &self.ff_w2, &self.ff_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Tensor,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<BlockParams>,
    /// Query of the pooling function `g`.
    pub pool_q: Tensor,
    pub phi_w1: Tensor,
    pub phi_b1: Tensor,
    pub phi_w2: Tensor,
    pub phi_b2: Tensor,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE1C0_DE00);
        let (d, f) = (cfg.d_hidden, cfg.d_ff);
        let sd = 1.0 / (d as f64).sqrt();
        let out_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], sd, &mut rng),
                wk: Tensor::randn(&[d, d], sd, &mut rng),
                wv: Tensor::randn(&[d, d], sd, &mut rng),
                wo: Tensor::randn(&[d, d], sd * out_scale, &mut rng),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                ff_w1: Tensor::randn(&[d, f], (2.0 / d as f64).sqrt(), &mut rng),
                ff_b1: Tensor::zeros(&[f]),
                ff_w2: Tensor::randn(&[f, d], out_scale / (f as f64).sqrt(), &mut rng),
                ff_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            tok_emb: Tensor::randn(&[cfg.total_vocab(), d], 1.0, &mut rng),
            patch_w: Tensor::randn(&[cfg.d_patch, d], 1.0 / (cfg.d_patch as f64).sqrt(), &mut rng),
            patch_b: Tensor::zeros(&[d]),
            pos_emb: Tensor::randn(&[cfg.max_tokens, d], 0.1, &mut rng),
            layers,
            pool_q: Tensor::zeros(&[d]),
            phi_w1: Tensor::randn(&[d, d], (2.0 / d as f64).sqrt(), &mut rng),
            phi_b1: Tensor::filled(&[d], 0.01),
            phi_w2: Tensor::randn(&[d, cfg.d_id], sd, &mut rng),
            phi_b2: Tensor::zeros(&[cfg.d_id]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl Parameters for EncoderParams {
    fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = ["tok_emb", "patch_w", "patch_b", "pos_emb"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in 0..self.layers.len() {
            n.extend(BLOCK_NAMES.iter().map(|b| format!("layers.{l}.{b}")));
        }
        n.extend(
            ["pool_q", "phi_w1", "phi_b1", "phi_w2", "phi_b2"]
                .iter()
                .map(|s| s.to_string()),
        );
        n
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.tok_emb, &self.patch_w, &self.patch_b, &self.pos_emb];
        for b in &self.layers {
            v.extend(b.tensors());
        }
        v.extend([&self.pool_q, &self.phi_w1, &self.phi_b1, &self.phi_w2, &self.phi_b2]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.tok_emb,
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos_emb,
        ];
        for b in &mut self.layers {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.pool_q,
            &mut self.phi_w1,
            &mut self.phi_b1,
            &mut self.phi_w2,
            &mut self.phi_b2,
        ]);
        v
    }
}

/// Token-level states of every layer; `layer(0)` is the input embedding and
/// `layer(L)` the final block output.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub t: usize,
    pub d: usize,
    states: Vec<Vec<f64>>,
}

impl HiddenStates {
    pub fn n_layers(&self) -> usize {
        self.states.len() - 1
    }

    /// `T x D` row-major states of layer `l` (0 = embeddings).
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.states[l]
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("at least the embedding layer")
    }
}

#[derive(Clone, Debug, Default)]
struct BlockTape {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    b: Vec<f64>,
    f1: Vec<f64>,
}

/// Output of the pooling function together with its attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub z: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Everything the backward pass needs for one item.
#[derive(Clone, Debug)]
pub struct EncoderTape {
    prompt: PromptTokens,
    hidden: HiddenStates,
    blocks: Vec<BlockTape>,
    pool: Pooled,
    phi_h1: Vec<f64>,
    out_norm: f64,
    pub h_tilde: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn build_prompt(&self, item: &crate::datagen::Item) -> Result<PromptTokens> {
        build_prompt(item, &self.config)
    }

    fn check_prompt(&self, p: &PromptTokens) -> Result<()> {
        let cfg = &self.config;
        if p.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        if p.len() > cfg.max_tokens {
            return Err(Error::Input(format!(
                "prompt length {} exceeds max_tokens {}",
                p.len(),
                cfg.max_tokens
            )));
        }
        if let Some(&bad) = p.ids.iter().find(|&&t| t as usize >= cfg.total_vocab()) {
            return Err(Error::Input(format!(
                "token id {bad} >= vocabulary size {}",
                cfg.total_vocab()
            )));
        }
        let img = Special::Image.id(cfg.vocab_size);
        let n_img = p.ids.iter().filter(|&&t| t == img).count();
        if n_img * cfg.d_patch != p.patches.len() {
            return Err(Error::shape(
                "prompt patches",
                &[n_img, cfg.d_patch],
                &[p.patches.len()],
            ));
        }
        Ok(())
    }

    fn embed(&self, p: &PromptTokens) -> Vec<f64> {
        let d = self.config.d_hidden;
        let dp = self.config.d_patch;
        let img = Special::Image.id(self.config.vocab_size);
        let prm = &self.params;
        let mut h = vec![0.0; p.len() * d];
        let mut patch_idx = 0;
        for (t, &tok) in p.ids.iter().enumerate() {
            let row = &mut h[t * d..(t + 1) * d];
            if tok == img {
                row.copy_from_slice(prm.patch_b.data());
                let patch = &p.patches[patch_idx * dp..(patch_idx + 1) * dp];
                ops::matvec_rowvec(patch, prm.patch_w.data(), row);
                patch_idx += 1;
            } else {
                row.copy_from_slice(prm.tok_emb.row(tok as usize));
            }
            ops::axpy(1.0, prm.pos_emb.row(t), row);
        }
        h
    }

    fn block_forward(&self, bp: &BlockParams, x: &[f64], t: usize, tape: Option<&mut BlockTape>) -> Vec<f64> {
        let cfg = &self.config;
        let (d, f, nh, dh) = (cfg.d_hidden, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, xhat1, rstd1) = ops::layer_norm_forward(x, d, bp.ln1_g.data(), bp.ln1_b.data());
        let q = ops::matmul(&a, bp.wq.data(), t, d, d);
        let k = ops::matmul(&a, bp.wk.data(), t, d, d);
        let v = ops::matmul(&a, bp.wv.data(), t, d, d);
        let mut probs = vec![0.0; nh * t * t];
        let mut ctx = vec![0.0; t * d];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..t {
                let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let qi = &q[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = ops::dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                }
                ops::softmax_inplace(p);
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    ops::axpy(pj, &v[j * d + off..j * d + off + dh], ci);
                }
            }
        }
        let mut mid = x.to_vec();
        gemm(false, false, t, d, d, 1.0, &ctx, bp.wo.data(), 1.0, &mut mid);

        let (b, xhat2, rstd2) = ops::layer_norm_forward(&mid, d, bp.ln2_g.data(), bp.ln2_b.data());
        let mut f1 = vec![0.0; t * f];
        for r in 0..t {
            f1[r * f..(r + 1) * f].copy_from_slice(bp.ff_b1.data());
        }
        gemm(false, false, t, d, f, 1.0, &b, bp.ff_w1.data(), 1.0, &mut f1);
        ops::relu_inplace(&mut f1);
        let mut out = mid;
        for r in 0..t {
            ops::axpy(1.0, bp.ff_b2.data(), &mut out[r * d..(r + 1) * d]);
        }
        gemm(false, false, t, f, d, 1.0, &f1, bp.ff_w2.data(), 1.0, &mut out);

        if let Some(tp) = tape {
            *tp = BlockTape {
                xhat1,
                rstd1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                xhat2,
                rstd2,
                b,
                f1,
            };
        }
        out
    }

    /// Accumulates parameter gradients of one block and returns `d x`.
    fn block_backward(&self, bp: &BlockParams, tp: &BlockTape, dout: &[f64], t: usize, g: &mut BlockParams) -> Vec<f64> {
        let cfg = &self.config;
        let (d, f, nh, dh) = (cfg.d_hidden, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward branch
        for r in 0..t {
            ops::axpy(1.0, &dout[r * d..(r + 1) * d], g.ff_b2.data_mut());
        }
        gemm(true, false, f, t, d, 1.0, &tp.f1, dout, 1.0, g.ff_w2.data_mut());
        let mut df1 = vec![0.0; t * f];
        gemm(false, true, t, d, f, 1.0, dout, bp.ff_w2.data(), 0.0, &mut df1);
        ops::relu_backward_inplace(&tp.f1, &mut df1);
        for r in 0..t {
            ops::axpy(1.0, &df1[r * f..(r + 1) * f], g.ff_b1.data_mut());
        }
        gemm(true, false, d, t, f, 1.0, &tp.b, &df1, 1.0, g.ff_w1.data_mut());
        let mut db = vec![0.0; t * d];
        gemm(false, true, t, f, d, 1.0, &df1, bp.ff_w1.data(), 0.0, &mut db);
        let dmid_ln = ops::layer_norm_backward(
            &db,
            &tp.xhat2,
            &tp.rstd2,
            bp.ln2_g.data(),
            g.ln2_g.data_mut(),
            g.ln2_b.data_mut(),
        );
        let mut dmid = dout.to_vec();
        ops::axpy(1.0, &dmid_ln, &mut dmid);

        // attention branch
        gemm(true, false, d, t, d, 1.0, &tp.ctx, &dmid, 1.0, g.wo.data_mut());
        let mut dctx = vec![0.0; t * d];
        gemm(false, true, t, d, d, 1.0, &dmid, bp.wo.data(), 0.0, &mut dctx);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..t {
                let p = &tp.probs[(h * t + i) * t..(h * t + i + 1) * t];
                let dci = &dctx[i * d + off..i * d + off + dh];
                for j in 0..t {
                    dp[j] = ops::dot(dci, &tp.v[j * d + off..j * d + off + dh]);
                    ops::axpy(p[j], dci, &mut dv[j * d + off..j * d + off + dh]);
                }
                ops::softmax_backward_inplace(p, &mut dp);
                for j in 0..t {
                    let ds = dp[j] * scale;
                    ops::axpy(ds, &tp.k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                    ops::axpy(ds, &tp.q[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
        gemm(true, false, d, t, d, 1.0, &tp.a, &dq, 1.0, g.wq.data_mut());
        gemm(true, false, d, t, d, 1.0, &tp.a, &dk, 1.0, g.wk.data_mut());
        gemm(true, false, d, t, d, 1.0, &tp.a, &dv, 1.0, g.wv.data_mut());
        let mut da = vec![0.0; t * d];
        gemm(false, true, t, d, d, 1.0, &dq, bp.wq.data(), 0.0, &mut da);
        gemm(false, true, t, d, d, 1.0, &dk, bp.wk.data(), 1.0, &mut da);
        gemm(false, true, t, d, d, 1.0, &dv, bp.wv.data(), 1.0, &mut da);
        let dx_ln = ops::layer_norm_backward(
            &da,
            &tp.xhat1,
            &tp.rstd1,
            bp.ln1_g.data(),
            g.ln1_g.data_mut(),
            g.ln1_b.data_mut(),
        );
        let mut dx = dmid;
        ops::axpy(1.0, &dx_ln, &mut dx);
        dx
    }

    fn run(&self, p: &PromptTokens, mut tapes: Option<&mut Vec<BlockTape>>) -> Result<HiddenStates> {
        self.check_prompt(p)?;
        let t = p.len();
        let mut states = Vec::with_capacity(self.config.n_layers + 1);
        states.push(self.embed(p));
        for (l, bp) in self.params.layers.iter().enumerate() {
            let tape = tapes.as_deref_mut().map(|v| &mut v[l]);
            let next = self.block_forward(bp, &states[l], t, tape);
            states.push(next);
        }
        let hs = HiddenStates {
            t,
            d: self.config.d_hidden,
            states,
        };
        if hs.states.iter().any(|s| s.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("encoder hidden states".into()));
        }
        Ok(hs)
    }

    /// Hidden states of every layer for one prompt.
    pub fn encode(&self, p: &PromptTokens) -> Result<HiddenStates> {
        self.run(p, None)
    }

    /// Attention pooling `g`: one learned query over all token states.
    pub fn pool_g(&self, h_layer: &[f64], t: usize) -> Result<Pooled> {
        pool_g(h_layer, t, self.params.pool_q.data())
    }

    /// Projection `phi` followed by l2 normalization.
    pub fn project_phi(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.phi_forward(z)?.2)
    }

    fn phi_forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        let prm = &self.params;
        let mut h1 = prm.phi_b1.data().to_vec();
        ops::matvec_rowvec(z, prm.phi_w1.data(), &mut h1);
        ops::relu_inplace(&mut h1);
        let mut out = prm.phi_b2.data().to_vec();
        ops::matvec_rowvec(&h1, prm.phi_w2.data(), &mut out);
        let (h_tilde, norm) = ops::l2_normalize(&out)?;
        Ok((h1, norm, h_tilde))
    }

    /// Coarse proxy `phi(g(H^L)) / ||.||` of one prompt.
    pub fn proxy(&self, p: &PromptTokens) -> Result<Vec<f64>> {
        let hs = self.encode(p)?;
        let pooled = self.pool_g(hs.last(), hs.t)?;
        self.project_phi(&pooled.z)
    }

    /// Pooled states `g(H^l)` of the requested layers.
    pub fn pooled_layers(&self, p: &PromptTokens, layers: &[usize]) -> Result<Vec<Vec<f64>>> {
        let hs = self.encode(p)?;
        layers
            .iter()
            .map(|&l| {
                if l > hs.n_layers() {
                    return Err(Error::Input(format!("layer {l} > {}", hs.n_layers())));
                }
                Ok(self.pool_g(hs.layer(l), hs.t)?.z)
            })
            .collect()
    }

    /// Forward pass that records everything needed by [`Encoder::backward`].
    pub fn forward_train(&self, p: &PromptTokens) -> Result<EncoderTape> {
        let mut blocks = vec![BlockTape::default(); self.config.n_layers];
        let hidden = self.run(p, Some(&mut blocks))?;
        let pool = self.pool_g(hidden.last(), hidden.t)?;
        let (phi_h1, out_norm, h_tilde) = self.phi_forward(&pool.z)?;
        Ok(EncoderTape {
            prompt: p.clone(),
            hidden,
            blocks,
            pool,
            phi_h1,
            out_norm,
            h_tilde,
        })
    }

    /// Back-propagates `d h_tilde` through phi, g and every block.
    pub fn backward(&self, tape: &EncoderTape, d_h_tilde: &[f64], g: &mut EncoderParams) {
        let cfg = &self.config;
        let (d, did) = (cfg.d_hidden, cfg.d_id);
        let prm = &self.params;
        let t = tape.hidden.t;

        // phi
        let dout = ops::l2_normalize_backward(&tape.h_tilde, tape.out_norm, d_h_tilde);
        ops::axpy(1.0, &dout, g.phi_b2.data_mut());
        let mut dh1 = vec![0.0; d];
        for i in 0..d {
            let w2 = &prm.phi_w2.data()[i * did..(i + 1) * did];
            ops::axpy(tape.phi_h1[i], &dout, &mut g.phi_w2.data_mut()[i * did..(i + 1) * did]);
            dh1[i] = ops::dot(w2, &dout);
        }
        ops::relu_backward_inplace(&tape.phi_h1, &mut dh1);
        ops::axpy(1.0, &dh1, g.phi_b1.data_mut());
        let z = &tape.pool.z;
        let mut dz = vec![0.0; d];
        for i in 0..d {
            let w1 = &prm.phi_w1.data()[i * d..(i + 1) * d];
            ops::axpy(z[i], &dh1, &mut g.phi_w1.data_mut()[i * d..(i + 1) * d]);
            dz[i] = ops::dot(w1, &dh1);
        }

        // g
        let mut dh = pool_g_backward(
            tape.hidden.last(),
            t,
            prm.pool_q.data(),
            &tape.pool.weights,
            &dz,
            g.pool_q.data_mut(),
        );

        for l in (0..cfg.n_layers).rev() {
            dh = self.block_backward(&prm.layers[l], &tape.blocks[l], &dh, t, &mut g.layers[l]);
        }

        // embeddings
        let img = Special::Image.id(cfg.vocab_size);
        let dp = cfg.d_patch;
        let mut patch_idx = 0;
        for (ti, &tok) in tape.prompt.ids.iter().enumerate() {
            let drow = &dh[ti * d..(ti + 1) * d];
            ops::axpy(1.0, drow, g.pos_emb.row_mut(ti));
            if tok == img {
                let patch = &tape.prompt.patches[patch_idx * dp..(patch_idx + 1) * dp];
                for (k, &pk) in patch.iter().enumerate() {
                    ops::axpy(pk, drow, &mut g.patch_w.data_mut()[k * d..(k + 1) * d]);
                }
                ops::axpy(1.0, drow, g.patch_b.data_mut());
                patch_idx += 1;
            } else {
                ops::axpy(1.0, drow, g.tok_emb.row_mut(tok as usize));
            }
        }
    }

    pub fn param_hash(&self) -> String {
        self.params.content_hash()
    }
}

/// `z = sum_t softmax_t(q . H_t / sqrt(D)) H_t`.
pub fn pool_g(h: &[f64], t: usize, q: &[f64]) -> Result<Pooled> {
    let d = q.len();
    if t == 0 || h.len() != t * d {
        return Err(Error::shape("pool_g", &[h.len()], &[t, d]));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights: Vec<f64> = (0..t).map(|r| ops::dot(q, &h[r * d..(r + 1) * d]) * scale).collect();
    ops::softmax_inplace(&mut weights);
    let mut z = vec![0.0; d];
    for (r, &w) in weights.iter().enumerate() {
        ops::axpy(w, &h[r * d..(r + 1) * d], &mut z);
    }
    Ok(Pooled { z, weights })
}

/// Returns `dH` and accumulates `dq`.
pub fn pool_g_backward(h: &[f64], t: usize, q: &[f64], weights: &[f64], dz: &[f64], dq: &mut [f64]) -> Vec<f64> {
    let d = q.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut ds: Vec<f64> = (0..t).map(|r| ops::dot(&h[r * d..(r + 1) * d], dz)).collect();
    ops::softmax_backward_inplace(weights, &mut ds);
    let mut dh = vec![0.0; t * d];
    for r in 0..t {
        let row = &mut dh[r * d..(r + 1) * d];
        ops::axpy(weights[r], dz, row);
        ops::axpy(ds[r] * scale, q, row);
        ops::axpy(ds[r] * scale, &h[r * d..(r + 1) * d], dq);
    }
    dh
}
