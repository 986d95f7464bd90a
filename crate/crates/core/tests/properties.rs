use aoept_core::collections::{refine_kmeans, LayerCollection};
use aoept_core::dataset::{build_missing_table, MissingKind, Pattern};
use aoept_core::instantiation::{consistency_loss, info_nce};
use aoept_core::mcp::{adaptive_pool, window_sizes};
use aoept_core::nm2i::{entropy, joint_distribution, marginals, mutual_information, nm2i, nm2i_from_joint};
use aoept_tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn sized_matrix(max_rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows).prop_flat_map(move |r| matrix(r, cols))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pool_windows_partition_the_sequence(s in 1usize..40, m in 1usize..40) {
        prop_assume!(m <= s);
        let w = window_sizes(s, m).unwrap();
        prop_assert_eq!(w.len(), m);
        prop_assert_eq!(w.iter().sum::<usize>(), s);
        let (lo, hi) = (*w.iter().min().unwrap(), *w.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert!(w.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn pool_is_the_window_mean(x in sized_matrix(12, 3), m in 1usize..12) {
        prop_assume!(m <= x.rows());
        let pooled = adaptive_pool(&x, m).unwrap();
        prop_assert_eq!(pooled.shape(), &[m, 3]);
        let w = window_sizes(x.rows(), m).unwrap();
        let mut start = 0;
        for (i, len) in w.into_iter().enumerate() {
            for c in 0..3 {
                let mean = (start..start + len).map(|r| x.at(r, c)).sum::<f64>() / len as f64;
                prop_assert!((pooled.at(i, c) - mean).abs() < 1e-12);
            }
            start += len;
        }
    }

    #[test]
    fn kmeans_objective_never_increases(x in sized_matrix(30, 4), k in 1usize..6, seed in 0u64..1000) {
        prop_assume!(k <= x.rows());
        let coll = LayerCollection { modality: 0, layer: 0, vectors: x, source_ids: vec![] };
        let r = refine_kmeans(&coll, k, 50, seed).unwrap();
        for w in r.history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", r.history);
        }
        prop_assert!(r.objective.unwrap() <= r.history[0] + 1e-9);
    }

    #[test]
    fn single_prototype_is_the_mean(x in sized_matrix(20, 3)) {
        let n = x.rows();
        let coll = LayerCollection { modality: 1, layer: 2, vectors: x.clone(), source_ids: vec![] };
        let r = refine_kmeans(&coll, 1, 5, 9).unwrap();
        for c in 0..3 {
            let mean = (0..n).map(|i| x.at(i, c)).sum::<f64>() / n as f64;
            prop_assert!((r.prototypes.at(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn nm2i_is_a_normalized_information(p in sized_matrix(8, 4), m in sized_matrix(8, 4)) {
        let joint = joint_distribution(&p, &m).unwrap();
        prop_assert!((joint.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (pp, pm) = marginals(&joint);
        let mi = mutual_information(&joint);
        let (hp, hm) = (entropy(&pp).unwrap(), entropy(&pm).unwrap());
        prop_assert!(mi >= -1e-12);
        prop_assert!(mi <= hp.min(hm) + 1e-12);
        let v = nm2i(&p, &m).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let terms = nm2i_from_joint(&joint).unwrap();
        prop_assert_eq!(terms.nm2i, v);
    }

    #[test]
    fn nm2i_ignores_row_order(p in sized_matrix(6, 3), m in sized_matrix(6, 3), shift in 0usize..6) {
        let n = p.rows();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| p.row((i + shift) % n).to_vec()).collect();
        let rotated = Tensor::from_rows(&rows).unwrap();
        let a = nm2i(&p, &m).unwrap();
        let b = nm2i(&rotated, &m).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn info_nce_matches_direct_formula(n in 1usize..6, seed in 0u64..1000, tau in 0.05f64..2.0) {
        let sims: Vec<f64> = (0..n * n).map(|i| ((i as u64 * 2654435761 + seed) % 997) as f64 / 498.5 - 1.0).collect();
        let t = Tensor::new(vec![n, n], sims.clone()).unwrap();
        let got = info_nce(&t, tau).unwrap();
        let want = (0..n)
            .map(|i| {
                let row = &sims[i * n..(i + 1) * n];
                let lse = row.iter().map(|s| (s / tau).exp()).sum::<f64>().ln();
                lse - row[i] / tau
            })
            .sum::<f64>()
            / n as f64;
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn consistency_uses_cosine_similarity(p in matrix(3, 4), t in matrix(3, 4), scale in 0.1f64..10.0) {
        let rows = |x: &Tensor| (0..x.rows()).map(|i| x.row(i).to_vec()).collect::<Vec<_>>();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assume!(rows(&p).iter().chain(rows(&t).iter()).all(|r| norm(r) > 1e-3));
        let a = consistency_loss(&rows(&p), &rows(&t), 0.1).unwrap();
        let scaled: Vec<Vec<f64>> = rows(&p).iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let b = consistency_loss(&scaled, &rows(&t), 0.1).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn missing_tables_have_floored_counts(n in 1usize..300, eta in 0.0f64..100.0, seed in 0u64..100) {
        let ids: Vec<u64> = (0..n as u64).map(|i| 1000 + i).collect();
        let t = build_missing_table(&ids, eta, MissingKind::Single(1), seed, 2).unwrap();
        let want = (eta * n as f64 / 100.0).floor() as usize;
        prop_assert!(t.count(Pattern::Missing(1)).abs_diff(want) <= 1);
        prop_assert_eq!(t.count(Pattern::Missing(1)) + t.count(Pattern::Complete), n);

        let each = build_missing_table(&ids, eta, MissingKind::Each, seed, 3).unwrap();
        let per = each.count(Pattern::Missing(0));
        prop_assert_eq!(each.count(Pattern::Missing(1)), per);
        prop_assert_eq!(each.count(Pattern::Missing(2)), per);
        prop_assert!(3 * per <= n);
        prop_assert_eq!(&t, &build_missing_table(&ids, eta, MissingKind::Single(1), seed, 2).unwrap());
    }
}

#[test]
fn whole_percent_rates_are_exact() {
    let ids: Vec<u64> = (0..200).collect();
    for eta in [10.0, 30.0, 50.0, 70.0, 90.0, 100.0] {
        let t = build_missing_table(&ids, eta, MissingKind::Single(0), 1, 2).unwrap();
        assert_eq!(t.count(Pattern::Missing(0)), (2.0 * eta) as usize);
    }
}
