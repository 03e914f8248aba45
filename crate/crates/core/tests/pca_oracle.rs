mod common;

use latent_audit::pca::{fit_pca, fit_pca_with, transform, PcaMethod};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_route_matches_covariance_oracle(n in 3usize..=50, d in 1usize..=20, seed in any::<u64>()) {
        let m = common::random_latents(n, d, &mut ChaCha8Rng::seed_from_u64(seed));
        let gap = common::pca_vs_oracle(&m);
        prop_assert!(gap.variance_err < 1e-10, "{gap:?}");
        prop_assert!(gap.min_abs_dot > 1.0 - 1e-8, "{gap:?}");
        prop_assert!(gap.orthonormality_err < 1e-8, "{gap:?}");
        prop_assert!(gap.descending);
    }

    #[test]
    fn gram_and_svd_routes_agree(n in 3usize..=30, d in 1usize..=40, seed in any::<u64>()) {
        let m = common::random_latents(n, d, &mut ChaCha8Rng::seed_from_u64(seed));
        let k = (n - 1).min(d);
        let a = fit_pca_with(&m, k, PcaMethod::Svd).unwrap();
        let b = fit_pca_with(&m, k, PcaMethod::Gram).unwrap();
        for i in 0..k {
            prop_assert!((a.explained_variance[i] - b.explained_variance[i]).abs() < 1e-9);
            let dot: f64 = a.component(i).iter().zip(b.component(i)).map(|(x, y)| x * y).sum();
            prop_assert!(dot.abs() > 1.0 - 1e-7, "component {i}: dot {dot}");
        }
    }

    #[test]
    fn projections_are_centered_with_component_variance(n in 3usize..=40, d in 1usize..=12, seed in any::<u64>()) {
        let m = common::random_latents(n, d, &mut ChaCha8Rng::seed_from_u64(seed));
        let k = (n - 1).min(d);
        let pca = fit_pca(&m, k).unwrap();
        let proj = transform(&pca, &m).unwrap();
        for c in 0..k {
            let col = proj.column(c);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - pca.explained_variance[c]).abs() < 1e-9 * (1.0 + var));
        }
    }
}

#[test]
fn oracle_recovers_axis_aligned_spectrum() {
    let ids = (0..4).map(|i| format!("s{i}")).collect();
    let vals = vec![2.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0, -1.0];
    let m = latent_audit::pca::LatentMatrix::new(ids, 2, vals).unwrap();
    let eig = common::covariance_eigen(&m);
    assert!((eig[0].0 - 8.0 / 3.0).abs() < 1e-12);
    assert!((eig[1].0 - 2.0 / 3.0).abs() < 1e-12);
    assert!((eig[0].1[0].abs() - 1.0).abs() < 1e-12);
}
