use fedmesh_core::model::ParameterVector;
use fedmesh_core::privacy::{
    clip_l2, gaussian_mechanism, gaussian_sigma, laplace, make_masks, mask_vector, ring_sum,
    svt_filter, DpParams, MaskPairing, RingVector, SitePolicy,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[test]
fn gaussian_noise_std_matches_sigma() {
    let (clip, eps, delta) = (1.0, 0.5, 1e-5);
    let sigma = gaussian_sigma(clip, eps, delta).unwrap();
    // sqrt(2 ln(125000)) / 0.5
    assert!((sigma - 9.689_610_525_210_778).abs() < 1e-9, "{sigma}");
    let zeros = ParameterVector::zeros(1_000_000);
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let noisy = gaussian_mechanism(&zeros, clip, eps, delta, &mut rng).unwrap();
    let n = noisy.dims() as f64;
    let mean = noisy.as_slice().iter().sum::<f64>() / n;
    let var = noisy
        .as_slice()
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    assert!(
        (var.sqrt() / sigma - 1.0).abs() < 0.01,
        "std {} sigma {sigma}",
        var.sqrt()
    );
    assert!(mean.abs() < 5.0 * sigma / n.sqrt());
}

#[test]
fn infinite_epsilon_is_identity() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let delta =
        ParameterVector::from_vec((0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    for eps in [f64::INFINITY, 1e300] {
        let out = gaussian_mechanism(&delta, 1.0, eps, 1e-5, &mut rng).unwrap();
        assert!(out.max_abs_diff(&delta) <= 1e-6);
    }
    let policy = SitePolicy {
        clip_norm: Some(1e9),
        dp: Some(DpParams {
            epsilon: f64::INFINITY,
            delta: 1e-5,
        }),
        ..SitePolicy::open("site-1")
    };
    assert!(policy.apply(&delta, &mut rng).unwrap().max_abs_diff(&delta) <= 1e-6);
}

#[test]
fn laplace_variance() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let b = 2.0;
    let n = 400_000;
    let draws: Vec<f64> = (0..n).map(|_| laplace(b, &mut rng)).collect();
    let mean_abs = draws.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    // E|X| = b for Laplace(0, b).
    assert!((mean_abs / b - 1.0).abs() < 0.01, "{mean_abs}");
}

#[test]
fn svt_never_exceeds_budget() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let dims = rng.gen_range(1..300);
        let delta =
            ParameterVector::from_vec((0..dims).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap();
        let c = rng.gen_range(1..20);
        let eps = [0.01, 0.1, 1.0, 10.0, f64::INFINITY][trial % 5];
        let fraction = rng.gen_range(0.01..=1.0);
        let out = svt_filter(&delta, fraction, c, eps, 1.0, &mut rng).unwrap();
        assert!(out.indices.len() <= c, "trial {trial}");
        assert!(out.indices.windows(2).all(|w| w[0] < w[1]));
        for (&i, &v) in out.indices.iter().zip(&out.values) {
            assert_eq!(v, delta[i]);
        }
    }
}

fn cohort(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("site-{i}")).collect()
}

#[test]
fn masks_cancel_bit_exactly() {
    let dims = 64;
    for n in 2..=6 {
        let ids = cohort(n);
        for seed in 0..100u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed * 31 + n as u64);
            let pairing = MaskPairing::derive(seed, &ids, rng.gen());
            let values: Vec<ParameterVector> = ids
                .iter()
                .map(|_| {
                    ParameterVector::from_vec(
                        (0..dims).map(|_| rng.gen_range(-100.0..100.0)).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let masked: Vec<RingVector> = ids
                .iter()
                .zip(&values)
                .map(|(id, v)| mask_vector(v, &make_masks(&pairing, id, dims).unwrap()).unwrap())
                .collect();
            let plain: Vec<RingVector> = values.iter().map(RingVector::encode).collect();
            assert_eq!(ring_sum(&masked), ring_sum(&plain), "n={n} seed={seed}");
            // Any single missing client leaves its pair masks in the sum.
            let partial: Vec<&RingVector> = masked.iter().skip(1).collect();
            let partial_plain: Vec<&RingVector> = plain.iter().skip(1).collect();
            assert_ne!(ring_sum(partial), ring_sum(partial_plain));
        }
    }
}

#[test]
fn masked_vector_hides_values() {
    let ids = cohort(3);
    let pairing = MaskPairing::derive(1, &ids, 42);
    let v = ParameterVector::from_vec(vec![0.5; 16]).unwrap();
    let masked = mask_vector(&v, &make_masks(&pairing, &ids[0], 16).unwrap()).unwrap();
    let decoded = masked.decode();
    assert!(decoded.max_abs_diff(&v) > 1.0);
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(values in prop::collection::vec(-100.0f64..100.0, 1..20), c in 0.01f64..50.0) {
        let v = ParameterVector::from_vec(values).unwrap();
        let out = clip_l2(&v, c);
        prop_assert!(out.norm_l2() <= c * (1.0 + 1e-12));
        if v.norm_l2() <= c {
            prop_assert_eq!(out.as_slice(), v.as_slice());
        } else if v.norm_l2() > 0.0 {
            let cos = out.dot(&v) / (out.norm_l2() * v.norm_l2());
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_point_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let v = ParameterVector::from_vec(values).unwrap();
        let back = RingVector::encode(&v).decode();
        prop_assert!(back.max_abs_diff(&v) <= 0.5 / (1u64 << 32) as f64 + 1e-9);
    }
}
