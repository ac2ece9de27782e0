use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sharpdiff::diffusion::{self, NoiseSchedule, SamplerConfig};
use sharpdiff::field::{hvp_fd, GmmField, ScoreField};
use sharpdiff::gmm::{Gaussian, GaussianMixture};
use sharpdiff::harness::eval;
use sharpdiff::harness::idx;
use sharpdiff::metrics;
use sharpdiff::spectral;

fn labeled(scores: Vec<f64>, flips: Vec<bool>) -> Option<(Vec<f64>, Vec<bool>)> {
    let n = scores.len().min(flips.len());
    let (s, l) = (scores[..n].to_vec(), flips[..n].to_vec());
    (l.iter().any(|&b| b) && l.iter().any(|&b| !b)).then_some((s, l))
}

fn mixture(d: usize, seed: u64) -> GaussianMixture {
    let mut rng = sharpdiff::random::rng(seed);
    let comps = (0..3)
        .map(|_| {
            Gaussian::new(
                sharpdiff::random::normal_vector(d, &mut rng),
                sharpdiff::random::spd_matrix(d, 0.3, &mut rng),
            )
            .unwrap()
        })
        .collect();
    GaussianMixture::new(
        vec![0.2, 0.3, 0.5],
        comps,
        vec![Some("a".into()), Some("b".into()), Some("a".into())],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(-5.0f64..5.0, 2..40),
        flips in prop::collection::vec(any::<bool>(), 2..40),
        a in 0.1f64..3.0,
        b in -2.0f64..2.0,
    ) {
        let Some((s, l)) = labeled(scores, flips) else { return Ok(()) };
        let mapped: Vec<f64> = s.iter().map(|x| (a * x + b).exp()).collect();
        prop_assert_eq!(eval::auc(&s, &l).unwrap(), eval::auc(&mapped, &l).unwrap());
    }

    #[test]
    fn auc_of_negated_scores_is_complement(
        scores in prop::collection::hash_set(-1_000_000i64..1_000_000, 2..40),
        flips in prop::collection::vec(any::<bool>(), 2..40),
    ) {
        let s: Vec<f64> = scores.into_iter().map(|v| v as f64).collect();
        let Some((s, l)) = labeled(s, flips) else { return Ok(()) };
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = eval::auc(&s, &l).unwrap() + eval::auc(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_equals_pair_count(
        scores in prop::collection::vec(0u8..6, 2..30),
        flips in prop::collection::vec(any::<bool>(), 2..30),
    ) {
        let s: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let Some((s, l)) = labeled(s, flips) else { return Ok(()) };
        prop_assert_eq!(eval::auc(&s, &l).unwrap(), eval::auc_pairwise(&s, &l).unwrap());
    }

    #[test]
    fn hvp_is_linear(seed in 0u64..1000, t in 0usize..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let field = GmmField::new(mixture(3, seed), NoiseSchedule::default_linear());
        let mut rng = sharpdiff::random::rng(seed + 1);
        let x = sharpdiff::random::normal_vector(3, &mut rng);
        let u = sharpdiff::random::normal_vector(3, &mut rng);
        let v = sharpdiff::random::normal_vector(3, &mut rng);
        let lhs = field.hvp(&x, t, Some("a"), &(&u * a + &v * b)).unwrap();
        let rhs = field.hvp(&x, t, Some("a"), &u).unwrap() * a + field.hvp(&x, t, Some("a"), &v).unwrap() * b;
        prop_assert!((&lhs - &rhs).norm() <= 1e-6 * (1.0 + rhs.norm()));
    }

    #[test]
    fn mixture_hessian_is_symmetric_and_matches_fd(seed in 0u64..1000, t in 0usize..1000) {
        let field = GmmField::new(mixture(3, seed), NoiseSchedule::default_linear());
        let x = sharpdiff::random::normal_vector(3, &mut sharpdiff::random::rng(seed + 7));
        let h = field.jacobian(&x, t, None).unwrap();
        prop_assert!((&h - h.transpose()).norm() <= 1e-9 * (1.0 + h.norm()));
        let e = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let fd = hvp_fd(&field, &x, t, None, &e, 1e-4).unwrap();
        prop_assert!((fd - h.column(1)).norm() <= 1e-4 * (1.0 + h.norm()));
    }

    #[test]
    fn ddim_is_deterministic(seed in 0u64..1000) {
        let field = GmmField::new(mixture(2, seed), NoiseSchedule::default_linear());
        let x = sharpdiff::random::normal_vector(2, &mut sharpdiff::random::rng(seed));
        let cfg = SamplerConfig { inference_steps: 10, guidance: 2.0, eta: 0.0 };
        let a = diffusion::generate(&field, &x, Some("b"), &cfg).unwrap();
        let b = diffusion::generate(&field, &x, Some("b"), &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quantile_is_monotone(v in prop::collection::vec(-10.0f64..10.0, 1..30), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(metrics::quantile(&v, lo).unwrap() <= metrics::quantile(&v, hi).unwrap());
    }

    #[test]
    fn idx_round_trip(rows in 1usize..6, cols in 1usize..6, n in 0usize..5, fill in any::<u64>()) {
        let pixels: Vec<u8> = (0..rows * cols * n).map(|i| (fill.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let bytes = idx::encode_images(rows, cols, &pixels).unwrap();
        let (count, r, c, back) = idx::parse_images(&bytes).unwrap();
        prop_assert_eq!((count, r, c), (n, rows, cols));
        prop_assert_eq!(&back, &pixels);
        prop_assert_eq!(idx::encode_images(r, c, &back).unwrap(), bytes);
        let labels: Vec<u8> = pixels.iter().take(n).map(|p| p % 10).collect();
        prop_assert_eq!(idx::parse_labels(&idx::encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn float_format_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        let s = metrics::fmt_f64(v);
        prop_assert_eq!(s.parse::<f64>().unwrap(), v);
    }

    #[test]
    fn full_krylov_recovers_symmetric_spectrum(seed in 0u64..200) {
        let mut rng = sharpdiff::random::rng(seed);
        let g = DMatrix::from_fn(6, 6, |_, _| sharpdiff::random::normal_vector(1, &mut rng)[0]);
        let a = &g + g.transpose();
        let dense = spectral::dense_symmetric_eigvals(&a).unwrap();
        let start = sharpdiff::random::normal_vector(6, &mut rng);
        let krylov = spectral::arnoldi(|v: &DVector<f64>| Ok(&a * v), &start, 6, 1e-12).unwrap();
        let mut re: Vec<f64> = spectral::ritz_values(&krylov).unwrap().values.iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        for (r, d) in re.iter().zip(&dense) {
            prop_assert!((r - d).abs() <= 1e-6 * (1.0 + d.abs()));
        }
    }
}
