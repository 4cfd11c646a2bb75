//! Property tests for the module invariants that hold over whole input
//! families rather than at hand-picked points.

use proptest::prelude::*;

use dcca_core::cca::{covariance, cross_covariance};
use dcca_core::numerics::{sym_eig, Matrix};
use dcca_core::retrieval::{median_rank, query, recall_at_k, Modality, SnippetIndex, SnippetRecord};

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_bounded_and_monotone_in_k(
        ranks in proptest::collection::vec(1usize..500, 1..50),
        k in 0usize..600,
    ) {
        let at_k = recall_at_k(&ranks, k);
        prop_assert!((0.0..=100.0).contains(&at_k));
        let at_k1 = recall_at_k(&ranks, k + 1);
        prop_assert!(at_k1 >= at_k);
        prop_assert_eq!(recall_at_k(&ranks, 500), 100.0);
    }

    #[test]
    fn median_rank_lies_between_extremes(
        ranks in proptest::collection::vec(1usize..1000, 1..60),
    ) {
        let mr = median_rank(&ranks);
        let min = *ranks.iter().min().unwrap();
        let max = *ranks.iter().max().unwrap();
        prop_assert!(mr >= min && mr <= max);
    }

    #[test]
    fn ranking_order_is_scale_invariant(
        seed in 0u64..1000,
        scale in 1e-3f64..1e3,
    ) {
        let mut rng = dcca_core::rng::Rng::new(seed);
        let records: Vec<SnippetRecord> = (0..40)
            .map(|i| SnippetRecord {
                snippet_id: i,
                piece_id: 0,
                position: i,
                embedding: (0..4).map(|_| rng.normal()).collect(),
            })
            .collect();
        let index = SnippetIndex { records, h: 4, modality: Modality::Audio };
        let q: Vec<f64> = (0..4).map(|_| rng.normal() + 0.1).collect();
        let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let a = query(&index, &q, 40).unwrap();
        let b = query(&index, &scaled, 40).unwrap();
        let ids_a: Vec<u64> = a.ranked.iter().map(|&(id, _)| id).collect();
        let ids_b: Vec<u64> = b.ranked.iter().map(|&(id, _)| id).collect();
        prop_assert_eq!(ids_a, ids_b);
    }

    #[test]
    fn eigendecomposition_reconstructs_symmetric_input(m in matrix_strategy(5, 5)) {
        // Symmetrize the random matrix first; sym_eig requires it.
        let sym = Matrix::from_fn(5, 5, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
        let eig = sym_eig(&sym).unwrap();
        let recon = eig
            .eigenvectors
            .matmul(&Matrix::diag(&eig.eigenvalues))
            .matmul(&eig.eigenvectors.transpose());
        let scale = sym.frobenius_norm().max(1.0);
        prop_assert!(recon.sub(&sym).frobenius_norm() / scale < 1e-8);
        for w in eig.eigenvalues.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn self_cross_covariance_equals_covariance(m in matrix_strategy(30, 4)) {
        let means = m.column_means();
        let mut centered = m.clone();
        for i in 0..centered.rows() {
            for (v, mu) in centered.row_mut(i).iter_mut().zip(means.iter()) {
                *v -= mu;
            }
        }
        let cov = covariance(&centered, 0.0).unwrap();
        let cross = cross_covariance(&centered, &centered).unwrap();
        prop_assert!(cov.max_abs_diff(&cross) < 1e-10);
    }
}
