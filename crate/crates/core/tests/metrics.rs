mod common;

use alphaloop::metrics::{factor_corr, ic_series, icir, RankedSignal};
use alphaloop::SignalMatrix;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(seed: u64, p: f64) -> (SignalMatrix, SignalMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (tied_matrix(&mut rng, 8, 10, 3, p), gaussian_matrix(&mut rng, 8, 10, p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ic_matches_counting_oracle(seed in any::<u64>(), p in 0.0..0.6f64) {
        let (x, y) = pair(seed, p);
        let ours = ic_series(&x, &y).unwrap();
        for (v, o) in ours.values.iter().zip(ic_oracle(&x, &y)) {
            match o {
                None => prop_assert!(v.is_nan()),
                Some(o) => prop_assert!(close_scaled(*v, o, 1e-12), "{} vs {}", v, o),
            }
        }
        match (icir(&ours), icir_oracle(&ic_oracle(&x, &y))) {
            (Ok(a), Some(b)) => prop_assert!(close_scaled(a, b, 1e-9)),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn ic_ignores_monotone_transforms(seed in any::<u64>(), scale in 0.01..100.0f64, shift in -5.0..5.0f64) {
        let (x, y) = pair(seed, 0.2);
        let base = ic_series(&x, &y).unwrap();
        let moved = ic_series(&x.map(|v| (v * scale + shift).exp()), &y.map(|v| v.powi(3))).unwrap();
        for (a, b) in base.values.iter().zip(&moved.values) {
            prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
        let flipped = ic_series(&x.map(|v| -v), &y).unwrap();
        for (a, b) in base.values.iter().zip(&flipped.values) {
            prop_assert!((a.is_nan() && b.is_nan()) || *a == -*b);
        }
    }

    #[test]
    fn corr_is_symmetric_bounded_and_cached_consistently(seed in any::<u64>(), p in 0.0..0.5f64) {
        let (x, y) = pair(seed, p);
        let (a, b) = (factor_corr(&x, &y), factor_corr(&y, &x));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.to_bits(), b.to_bits());
                prop_assert!((-1.0..=1.0).contains(&a));
                let ranked = RankedSignal::new(x.clone()).corr(&RankedSignal::new(y.clone())).unwrap();
                prop_assert_eq!(ranked.to_bits(), a.to_bits());
                prop_assert!(close_scaled(a, corr_oracle(&x, &y).unwrap(), 1e-12));
            }
            (Err(_), Err(_)) => prop_assert!(corr_oracle(&x, &y).is_none()),
            _ => prop_assert!(false, "asymmetric definedness"),
        }
    }
}

#[test]
fn self_correlation_is_one_where_defined() {
    let (x, _) = pair(7, 0.1);
    let c = factor_corr(&x, &x).unwrap();
    assert!((c - 1.0).abs() < 1e-15);
}
