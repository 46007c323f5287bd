mod common;

use advsdf_core::diffcore::symmetric_eigen;
use common::props::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rank_normalize_bounds_and_ties(xs in ties()) {
        rank_bounds_and_ties(xs)?;
    }

    #[test]
    fn rank_normalize_is_invariant_to_monotone_maps(args in monotone_args()) {
        rank_monotone_invariance(args)?;
    }

    #[test]
    fn attention_weights_form_a_simplex_and_pool_in_the_hull(args in attention_args()) {
        attention_simplex_and_hull(args)?;
    }

    #[test]
    fn pca_components_are_orthonormal_and_reconstruction_improves_with_k(rows in matrix(12, 5)) {
        pca_orthonormal_and_monotone(rows)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eigen_matches_nalgebra(rows in matrix(6, 6)) {
        let n = 6;
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = rows[i][j] + rows[j][i];
            }
        }
        let (values, vectors) = symmetric_eigen(&sym, n).unwrap();
        let mut oracle: Vec<f64> = DMatrix::from_row_slice(n, n, &sym).symmetric_eigen().eigenvalues.iter().cloned().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in values.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        // A v = λ v
        for (k, v) in vectors.iter().enumerate() {
            for i in 0..n {
                let av: f64 = (0..n).map(|j| sym[i * n + j] * v[j]).sum();
                prop_assert!((av - values[k] * v[i]).abs() < 1e-9 * (1.0 + values[k].abs()));
            }
        }
    }
}
