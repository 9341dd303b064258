use coldproxy::align1::pal_loss;
use coldproxy::align2::kmeans;
use coldproxy::diffcore::ops;
use coldproxy::evalkit::{auc, Cell, ExperimentReport};
use coldproxy::proxystore::{read_proxies, write_proxies, ProxyRecord};
use coldproxy::ranker::Variant;
use proptest::prelude::*;

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec(-50i32..50, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 10.0).collect()),
            prop::collection::vec(0u8..2, n),
        )
    })
}

fn both_classes(y: &[u8]) -> bool {
    y.contains(&0) && y.contains(&1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_invariant_to_monotone_transforms((s, y) in scores_and_labels()) {
        prop_assume!(both_classes(&y));
        let a = auc(&s, &y).unwrap();
        let t: Vec<f64> = s.iter().map(|x| (x * 0.7).exp() + 3.0).collect();
        prop_assert!((a - auc(&t, &y).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_of_negated_scores_is_complement((s, y) in scores_and_labels()) {
        prop_assume!(both_classes(&y));
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auc(&s, &y).unwrap() + auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let mut r = row.clone();
        ops::softmax_inplace(&mut r);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(r.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn l2_normalize_gives_unit_vectors(x in prop::collection::vec(-5.0f64..5.0, 1..32)) {
        prop_assume!(ops::dot(&x, &x) > 1e-6);
        let (u, _) = ops::l2_normalize(&x).unwrap();
        prop_assert!((ops::dot(&u, &u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pal_loss_is_nonnegative_and_permutation_equivariant(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..8),
        tau in 0.1f64..3.0,
    ) {
        prop_assume!(raw.iter().all(|v| ops::dot(v, v) > 1e-3));
        let h: Vec<Vec<f64>> = raw.iter().map(|v| ops::l2_normalize(v).unwrap().0).collect();
        let mut e = h.clone();
        e.rotate_left(1);
        let a = pal_loss(&h, &e, tau).unwrap();
        prop_assert!(a >= 0.0);
        let (mut h2, mut e2) = (h.clone(), e.clone());
        h2.reverse();
        e2.reverse();
        prop_assert!((a - pal_loss(&h2, &e2, tau).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn kmeans_assigns_every_point_to_its_nearest_centroid(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 4..40),
        k in 1usize..4,
        seed in 0u64..1000,
    ) {
        let km = kmeans(&pts, k, seed, 200).unwrap();
        prop_assert!(km.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert_eq!(km.assignments.len(), pts.len());
        for (p, &a) in pts.iter().zip(&km.assignments) {
            let d = |c: &Vec<f64>| c.iter().zip(p).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            let best = km.centroids.iter().map(d).fold(f64::INFINITY, f64::min);
            prop_assert!(d(&km.centroids[a]) <= best + 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn proxy_store_round_trips(
        vecs in prop::collection::vec((prop::collection::vec(-1.0f32..1.0, 6), any::<bool>(), 1u32..5), 1..50),
    ) {
        prop_assume!(vecs.iter().all(|(v, _, _)| v.iter().map(|x| x * x).sum::<f32>() > 1e-2));
        let recs: Vec<ProxyRecord> = vecs
            .iter()
            .enumerate()
            .map(|(i, (v, fine, version))| {
                let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                ProxyRecord {
                    item_id: i as u32,
                    p_coarse: v.iter().map(|&x| (f64::from(x) / n) as f32).collect(),
                    p_fine: fine.then(|| v.clone()),
                    version: *version,
                    stage1_hash: "a".into(),
                    stage2_hash: if *fine { "b".into() } else { String::new() },
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_proxies(&recs, &path).unwrap();
        let (_, back) = read_proxies(&path).unwrap();
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn report_json_round_trips(aucs in prop::collection::vec(0.0f64..1.0, 6)) {
        let mut cells = Vec::new();
        for (k, &a) in aucs.iter().enumerate() {
            let variant = if k % 2 == 0 { Variant::Base } else { Variant::V5StructureReuse };
            cells.push(Cell {
                variant,
                split: ["cold", "warm", "global"][k / 2].to_string(),
                seed: 1,
                auc: Some(a),
                error: None,
            });
        }
        let mut r = ExperimentReport {
            config_hash: "h".into(),
            seeds: vec![1],
            cells,
            summary: Vec::new(),
            stage1: Vec::new(),
        };
        r.summarize();
        let back = ExperimentReport::from_json(&r.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }
}
