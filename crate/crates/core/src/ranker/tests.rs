use rand::Rng;

use super::*;
use crate::datagen::{generate_corpus, split_train_eval, GenConfig};
use crate::diffcore::gradcheck::{check_parameters, DEFAULT_EPS};

fn rand_map(rng: &mut ChaCha8Rng, n: usize, w: usize, unit: bool) -> ProxyMap {
    (0..n as u32)
        .map(|i| {
            let v: Vec<f64> = (0..w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = if unit { ops::l2_normalize(&v).unwrap().0 } else { v };
            (i, v)
        })
        .collect()
}

struct Fixture {
    corpus: Corpus,
    train: InteractionSet,
    content: ProxyMap,
    coarse: ProxyMap,
    pooled: ProxyMap,
}

fn fixture() -> Fixture {
    let corpus = generate_corpus(&GenConfig::tiny()).unwrap();
    let train = split_train_eval(&corpus).unwrap().train;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = corpus.items.len();
    Fixture {
        content: rand_map(&mut rng, n, 12, false),
        coarse: rand_map(&mut rng, n, 8, true),
        pooled: rand_map(&mut rng, n, 9, false),
        corpus,
        train,
    }
}

fn small_cfg(variant: Variant) -> RankerConfig {
    RankerConfig {
        d: 8,
        variant,
        mlp_hidden: vec![16, 8],
        epochs: 2,
        batch_size: 256,
        ..RankerConfig::default()
    }
}

fn inputs(f: &Fixture, v: Variant, d: usize) -> ItemInputs {
    let content = if v == Variant::V2MlpMap {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rand_map(&mut rng, f.corpus.items.len(), d, false)
    } else {
        f.content.clone()
    };
    ItemInputs::build(v, f.corpus.items.len(), Some(&content), Some(&f.coarse), Some(&f.pooled)).unwrap()
}

fn ranker(f: &Fixture, v: Variant) -> (Ranker, ItemInputs) {
    let cfg = small_cfg(v);
    let inp = inputs(f, v, cfg.d);
    let shape = RankerShape::of(&f.corpus, &inp, 4);
    (Ranker::new(cfg, shape).unwrap(), inp)
}

#[test]
fn empty_history_attends_to_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = || Tensor::randn(&[4, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    let t: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (a, weights) = target_attention(&[], &t, &w(), &w(), &w()).unwrap();
    assert_eq!(a, vec![0.0; 4]);
    assert!(weights.is_empty());
}

#[test]
fn single_item_history_returns_its_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wq = Tensor::randn(&[4, 4], 0.5, &mut rng);
    let wk = Tensor::randn(&[4, 4], 0.5, &mut rng);
    let wv = Tensor::randn(&[4, 4], 0.5, &mut rng);
    let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (a, w) = target_attention(std::slice::from_ref(&h), &t, &wq, &wk, &wv).unwrap();
    let mut v = vec![0.0; 4];
    ops::matvec_rowvec(&h, wv.data(), &mut v);
    assert_eq!(w, vec![1.0]);
    assert_eq!(a, v);
    let hist: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let (_, w) = target_attention(&hist, &t, &wq, &wk, &wv).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn interaction_products_are_pairwise_and_bilinear() {
    let f = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]];
    let x = interaction_input(&f, &[7.0]).unwrap();
    assert_eq!(x.len(), 6 + 3 + 1);
    assert_eq!(&x[6..9], &[-1.5, 3.0, 1.5]);
    let mut g = f.clone();
    g[0].iter_mut().for_each(|v| *v *= 2.0);
    let y = interaction_input(&g, &[7.0]).unwrap();
    assert_eq!(y[6], 2.0 * x[6]);
    assert_eq!(y[7], 2.0 * x[7]);
    assert_eq!(y[8], x[8]);
    assert!(interaction_input(&f[..1], &[]).is_err());
}

#[test]
fn feature_interaction_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fields: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let scalars = vec![1.0, 0.0];
    let mut mlp = Mlp::init(&[12 + 3 + 2, 10, 6], true, &mut rng);
    let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = interaction_input(&fields, &scalars).unwrap();
    let pass = mlp.forward(&x, 1).unwrap();
    let mut g = mlp.zeros_like();
    mlp.backward(&pass, &w, &mut g);
    let r = check_parameters(
        "feature_interaction",
        &mut mlp,
        &g,
        |m| Ok(ops::dot(&feature_interaction(&fields, &scalars, m)?, &w)),
        DEFAULT_EPS,
        100,
        1e-4,
        &mut rng,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn ctr_loss_reference_values() {
    let l = ctr_loss(&[0.5; 4], &[0, 1, 1, 0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    let l = ctr_loss(&[ops::clip_prob(1.0), ops::clip_prob(0.0)], &[1, 0]).unwrap();
    assert!(l <= 1e-6 + ops::PROB_CLIP);
    assert!(ctr_loss(&[], &[]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p: Vec<f64> = (0..50).map(|_| rng.random_range(0.01..0.99)).collect();
    let y: Vec<u8> = (0..50).map(|_| rng.random_range(0..2)).collect();
    let mut s = 0.0;
    for k in 0..50 {
        s += if y[k] == 1 { -p[k].ln() } else { -(1.0 - p[k]).ln() };
    }
    assert!((ctr_loss(&p, &y).unwrap() - s / 50.0).abs() < 1e-12);
}

#[test]
fn variants_parse_from_short_and_long_names() {
    assert_eq!(Variant::parse("v5").unwrap(), Variant::V5StructureReuse);
    assert_eq!(Variant::parse("v3_coarse").unwrap(), Variant::V3Coarse);
    assert!(Variant::parse("v9").is_err());
}

#[test]
fn fresh_variants_predict_exactly_like_base() {
    let f = fixture();
    let ex = examples(&f.corpus, &f.train);
    let (base, base_in) = ranker(&f, Variant::Base);
    let want = base.predict(&base_in, &ex[..300]).unwrap();
    assert!(want.iter().all(|&p| p > 0.0 && p < 1.0));
    for v in [Variant::V3Coarse, Variant::V4ConcatFine, Variant::V5StructureReuse] {
        let (r, inp) = ranker(&f, v);
        let got = r.predict(&inp, &ex[..300]).unwrap();
        assert!(
            got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{v}"
        );
    }
}

#[test]
fn zeroed_proxy_weights_reproduce_base_after_perturbation() {
    let f = fixture();
    let ex = examples(&f.corpus, &f.train);
    let (base, base_in) = ranker(&f, Variant::Base);
    let want = base.predict(&base_in, &ex[..200]).unwrap();
    let (mut r, inp) = ranker(&f, Variant::V5StructureReuse);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in [&mut r.params.w1_extra, &mut r.params.slot_coarse, &mut r.params.slot_fine]
        .into_iter()
        .flatten()
    {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    assert_ne!(r.predict(&inp, &ex[..200]).unwrap(), want);
    r.params.zero_proxy_weights();
    let got = r.predict(&inp, &ex[..200]).unwrap();
    assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn missing_proxy_names_item_and_variant() {
    let f = fixture();
    let mut coarse = f.coarse.clone();
    coarse.remove(&17);
    let err = ItemInputs::build(Variant::V3Coarse, f.corpus.items.len(), None, Some(&coarse), None).unwrap_err();
    match err {
        Error::MissingProxy { item_id, variant } => {
            assert_eq!(item_id, 17);
            assert!(variant.starts_with("v3"));
        }
        other => panic!("{other:?}"),
    }
}

fn perturb_all(p: &mut RankerParams, rng: &mut ChaCha8Rng) {
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn v5_gradient_matches_finite_differences() {
    let f = fixture();
    let ex = examples(&f.corpus, &f.train);
    let batch: Vec<Example> = ex.iter().copied().filter(|e| !e.history.is_empty()).take(24).collect();
    let (r, inp) = ranker(&f, Variant::V5StructureReuse);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = r.params.clone();
    perturb_all(&mut p, &mut rng);
    let (_, g) = r.loss_and_grad(&p, &inp, &batch).unwrap();
    let rep = check_parameters(
        "ranker_v5",
        &mut p,
        &g,
        |prm| r.loss(prm, &inp, &batch),
        DEFAULT_EPS,
        400,
        1e-4,
        &mut rng,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn v1_and_v4_gradients_match_finite_differences() {
    let f = fixture();
    let ex = examples(&f.corpus, &f.train);
    let batch: Vec<Example> = ex.iter().copied().take(24).collect();
    for v in [Variant::V1ContentFeature, Variant::V4ConcatFine] {
        let (r, inp) = ranker(&f, v);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = r.params.clone();
        perturb_all(&mut p, &mut rng);
        let (_, g) = r.loss_and_grad(&p, &inp, &batch).unwrap();
        let rep = check_parameters(v.short(), &mut p, &g, |prm| r.loss(prm, &inp, &batch), DEFAULT_EPS, 300, 1e-4, &mut rng)
            .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}

#[test]
fn training_leaves_cold_rows_alone_and_moves_the_gate() {
    let f = fixture();
    let cfg = small_cfg(Variant::V5StructureReuse);
    let inp = inputs(&f, cfg.variant, cfg.d);
    let init = Ranker::new(cfg.clone(), RankerShape::of(&f.corpus, &inp, 4)).unwrap();
    let out = train_ranker(&f.corpus, &f.train, &inp, &cfg, 4).unwrap();
    let p = &out.ranker.params;
    for item in f.corpus.cold_items() {
        let i = item.item_id as usize;
        let a = p.item_emb.row(i);
        let b = init.params.item_emb.row(i);
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let wg = &p.adaptor.as_ref().unwrap().wg;
    assert!(wg.norm() > 0.0);
    assert_eq!(out.epoch_losses.len(), 2);
}

#[test]
fn prediction_is_deterministic() {
    let f = fixture();
    let ex = examples(&f.corpus, &f.train);
    let (r, inp) = ranker(&f, Variant::V5StructureReuse);
    let a = r.predict(&inp, &ex[..100]).unwrap();
    let b = r.predict(&inp, &ex[..100]).unwrap();
    assert_eq!(a, b);
    assert_eq!(r.predict_ctr(&inp, &ex[3]).unwrap(), a[3]);
}
