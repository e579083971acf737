use bootrank::linalg::{phi, singular_values, svd};
use bootrank::Matrix;
use nalgebra::linalg::QR;
use proptest::prelude::*;

fn matrix(max_m: usize, max_k: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_k)
        .prop_flat_map(move |k| (Just(k), k..=max_m))
        .prop_flat_map(|(k, m)| {
            proptest::collection::vec(-10.0..10.0f64, m * k)
                .prop_map(move |v| Matrix::from_vec(m, k, v))
        })
}

fn orthogonal(n: usize, entries: &[f64]) -> Matrix {
    let a = Matrix::from_fn(n, n, |i, j| entries[(i * n + j) % entries.len()] + if i == j { 3.0 } else { 0.0 });
    QR::new(a).q()
}

proptest! {
    #[test]
    fn phi_is_orthogonally_invariant(
        a in matrix(6, 4),
        seed_u in proptest::collection::vec(-1.0..1.0f64, 36),
        seed_v in proptest::collection::vec(-1.0..1.0f64, 16),
    ) {
        let (m, k) = a.shape();
        let u = orthogonal(m, &seed_u);
        let v = orthogonal(k, &seed_v);
        let rotated = &u * &a * v.transpose();
        for r in 0..k {
            let base = phi(&a, r).unwrap();
            let turned = phi(&rotated, r).unwrap();
            prop_assert!((base - turned).abs() <= 1e-9 * (1.0 + base), "{} vs {}", base, turned);
        }
    }

    #[test]
    fn phi_is_nonincreasing_in_r(a in matrix(6, 5)) {
        let k = a.ncols();
        let values: Vec<f64> = (0..k).map(|r| phi(&a, r).unwrap()).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0]));
        }
        let frob = a.norm_squared();
        prop_assert!((values[0] - frob).abs() <= 1e-9 * (1.0 + frob));
    }

    #[test]
    fn phi_vanishes_at_or_above_true_rank(
        left in matrix(6, 2),
        right in proptest::collection::vec(-3.0..3.0f64, 8),
    ) {
        let (m, q) = left.shape();
        let k = 4.min(m);
        prop_assume!(q < k);
        let b = Matrix::from_fn(q, k, |i, j| right[(i * k + j) % right.len()]);
        let a = &left * b;
        let scale = a.norm_squared();
        for r in q..k {
            prop_assert!(phi(&a, r).unwrap() <= 1e-12 * (1.0 + scale));
        }
    }

    #[test]
    fn svd_values_agree_with_values_only_routine(a in matrix(7, 5)) {
        let full = svd(&a).unwrap();
        let values = singular_values(&a);
        prop_assert_eq!(full.sigma.len(), values.len());
        for (x, y) in full.sigma.iter().zip(&values) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + values[0]));
        }
    }
}
