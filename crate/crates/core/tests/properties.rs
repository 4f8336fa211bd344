use mfdl_core::gaussian::{self, GaussianFit};
use mfdl_core::linear::{self, MeanFieldLayer};
use mfdl_core::mfvi;
use mfdl_core::model::{self, Activation, NetworkSpec};
use mfdl_core::{rng, transport};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn chain(seed: u64, depth: usize, width: usize) -> Vec<MeanFieldLayer> {
    let mut r = rng::keyed(seed, 0);
    (0..depth)
        .map(|_| {
            let mu = DMatrix::from_fn(width, width, |_, _| rng::std_normal(&mut r));
            let sd = DMatrix::from_fn(width, width, |_, _| 0.05 + rng::std_normal(&mut r).abs());
            MeanFieldLayer::new(mu, sd).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_round_trips(seed in any::<u64>(), widths in prop::collection::vec(1usize..5, 2..5), bias in any::<bool>()) {
        let spec = NetworkSpec::new(widths, Activation::Relu, bias).unwrap();
        let mut r = rng::keyed(seed, 0);
        let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng::std_normal(&mut r)).collect();
        let layers = model::unflatten(&spec, &theta).unwrap();
        prop_assert_eq!(model::flatten(&spec, &layers).unwrap(), theta);
    }

    #[test]
    fn product_covariance_is_symmetric_psd(seed in any::<u64>(), depth in 1usize..4, width in 1usize..4) {
        let m = linear::cov_product(&chain(seed, depth, width)).unwrap();
        let flat = m.cov.to_matrix();
        let scale = flat.abs().max().max(1.0);
        prop_assert!((&flat - flat.transpose()).abs().max() <= 1e-12 * scale);
        let (min_eig, trace) = m.cov.min_eigenvalue_and_trace();
        prop_assert!(min_eig >= -1e-10 * trace.max(1.0), "min eigenvalue {}", min_eig);
    }

    #[test]
    fn wasserstein_is_nonnegative_and_symmetric(seed in any::<u64>(), n in 1usize..8, dim in 1usize..4) {
        let mut r = rng::keyed(seed, 0);
        let u: Vec<f64> = (0..n * dim).map(|_| rng::std_normal(&mut r)).collect();
        let v: Vec<f64> = (0..n * dim).map(|_| rng::std_normal(&mut r)).collect();
        let uv = transport::wasserstein_point_clouds(&u, &v, dim).unwrap();
        let vu = transport::wasserstein_point_clouds(&v, &u, dim).unwrap();
        prop_assert!(uv >= 0.0);
        prop_assert!((uv - vu).abs() <= 1e-12 * uv.max(1.0));
        prop_assert_eq!(transport::wasserstein_point_clouds(&u, &u, dim).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(seed in any::<u64>(), dim in 1usize..6) {
        let mut r = rng::keyed(seed, 0);
        let mean: Vec<f64> = (0..dim).map(|_| rng::std_normal(&mut r)).collect();
        let p = GaussianFit::full(mean.clone(), gaussian::random_spd(dim, &mut r)).unwrap();
        let q = GaussianFit::full(mean, gaussian::random_spd(dim, &mut r)).unwrap();
        prop_assert!(gaussian::kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(gaussian::kl_divergence(&p, &p).unwrap().abs() < 1e-10);
        let diag = gaussian::fit_diag(&p).unwrap();
        prop_assert!(gaussian::kl_error(&p, &diag).unwrap() >= -1e-12);
    }

    #[test]
    fn softplus_inverse_round_trips(s in 1e-8f64..50.0) {
        let back = mfvi::softplus(mfvi::inv_softplus(s));
        prop_assert!((back - s).abs() <= 1e-12 * s.max(1.0));
    }
}
