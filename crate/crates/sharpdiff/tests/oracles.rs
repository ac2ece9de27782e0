use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use sharpdiff::diffusion::{self, NoiseSchedule, SamplerConfig};
use sharpdiff::field::{GmmField, LinearField, ScoreField};
use sharpdiff::gmm::{Gaussian, GaussianMixture};
use sharpdiff::harness::data::{build_toy_dataset, ToyConfig, BROAD, SHARP};
use sharpdiff::harness::eval;
use sharpdiff::metrics::{self, MeanAcc};
use sharpdiff::random;
use sharpdiff::sail::{sail_loss, SailConfig};
use sharpdiff::scorenet::{self, Example, Mlp, MlpConfig, NetField, Prediction, TrainConfig};
use sharpdiff::spectral;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = random::rng(seed);
    let g = DMatrix::from_fn(d, d, |_, _| random::normal_vector(1, &mut rng)[0]);
    g.qr().q()
}

#[test]
fn schedule_endpoint_is_frozen() {
    let s = NoiseSchedule::default_linear();
    let ab = s.alpha_bar_at(999).unwrap();
    assert!(ab < 5e-5);
    assert!((ab - 4.035829765375006e-5).abs() < 1e-15, "{ab:?}");
}

#[test]
fn forward_noise_has_the_schedule_covariance() {
    let s = NoiseSchedule::default_linear();
    let x0 = dvector![0.5, -1.0, 2.0];
    let t = 300;
    let ab = s.alpha_bar_at(t).unwrap();
    let mut rng = random::rng(11);
    let n = 10_000;
    let draws: Vec<DVector<f64>> = (0..n)
        .map(|_| diffusion::perturb(&x0, t, &random::normal_vector(3, &mut rng), &s).unwrap())
        .collect();
    let mean = draws.iter().fold(DVector::zeros(3), |a, x| a + x) / n as f64;
    let cov = draws.iter().fold(DMatrix::zeros(3, 3), |a, x| a + (x - &mean) * (x - &mean).transpose()) / (n - 1) as f64;
    let want = DMatrix::identity(3, 3) * (1.0 - ab);
    assert!((&cov - &want).norm() <= 0.05 * want.norm(), "{cov}");
}

#[test]
fn full_arnoldi_on_a_known_spectrum() {
    let d = 64;
    let q = random_orthogonal(d, 5);
    let eig: Vec<f64> = (0..d).map(|i| -3.05 + 0.1 * i as f64).collect();
    let a = &q * diag(&eig) * q.transpose();
    let b = spectral::unit_start_vector(d, 9);
    let res = spectral::arnoldi(|v: &DVector<f64>| Ok(&a * v), &b, d, 1e-14).unwrap();
    let mut ritz: Vec<f64> = spectral::ritz_values(&res).unwrap().values.iter().map(|z| z.re).collect();
    ritz.sort_by(f64::total_cmp);
    let dense = spectral::dense_symmetric_eigvals(&a).unwrap();
    for ((r, d), e) in ritz.iter().zip(&dense).zip(&eig) {
        assert!((r - d).abs() <= 1e-6 * d.abs(), "{r} vs {d}");
        assert!((d - e).abs() < 1e-10);
    }
}

#[test]
fn hessenberg_eigenvalues_match_companion_roots() {
    // Companion matrix of prod (z - k), k = 1..8; already upper Hessenberg.
    let mut coeffs = vec![1.0];
    for k in 1..=8 {
        let mut next = vec![0.0; coeffs.len() + 1];
        for (i, c) in coeffs.iter().enumerate() {
            next[i + 1] += c;
            next[i] -= c * k as f64;
        }
        coeffs = next;
    }
    let n = 8;
    let mut c = DMatrix::zeros(n, n);
    for i in 1..n {
        c[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        c[(i, n - 1)] = -coeffs[i];
    }
    let mut got: Vec<f64> = spectral::hessenberg_eigenvalues(&c).unwrap().values.iter().map(|z| z.re).collect();
    got.sort_by(f64::total_cmp);
    for (k, g) in got.iter().enumerate() {
        assert!((g - (k + 1) as f64).abs() < 1e-6, "{got:?}");
    }
}

fn three_component(seed: u64) -> GaussianMixture {
    let mut rng = random::rng(seed);
    let comps = (0..3)
        .map(|_| Gaussian::new(random::normal_vector(3, &mut rng), random::spd_matrix(3, 0.2, &mut rng)).unwrap())
        .collect();
    GaussianMixture::unlabeled(vec![0.5, 0.3, 0.2], comps).unwrap()
}

#[test]
fn mixture_density_matches_direct_summation() {
    for seed in 0..5 {
        let mix = three_component(seed);
        let x = random::normal_vector(3, &mut random::rng(seed + 100));
        let direct: f64 = mix
            .weights()
            .iter()
            .zip(mix.components())
            .map(|(w, g)| w * g.log_density(&x).exp())
            .sum::<f64>()
            .ln();
        assert!((mix.log_density(&x).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn mixture_score_is_the_density_gradient() {
    for seed in 0..5 {
        let mix = three_component(seed);
        let x = random::normal_vector(3, &mut random::rng(seed + 200)) * 0.5;
        let s = mix.score(&x).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut e = DVector::zeros(3);
            e[j] = h;
            let fd = (mix.log_density(&(&x + &e)).unwrap() - mix.log_density(&(&x - &e)).unwrap()) / (2.0 * h);
            assert!((fd - s[j]).abs() <= 1e-6 * s.norm().max(1.0), "{fd} vs {}", s[j]);
        }
    }
}

fn symmetric_pair(mu: DVector<f64>) -> GaussianMixture {
    GaussianMixture::unlabeled(
        vec![0.5, 0.5],
        vec![
            Gaussian::isotropic(mu.clone(), 1.0).unwrap(),
            Gaussian::isotropic(-mu, 1.0).unwrap(),
        ],
    )
    .unwrap()
}

#[test]
fn symmetric_pair_hessian_at_origin() {
    let mu = dvector![2.0, 0.0];
    let mix = symmetric_pair(mu.clone());
    let h = mix.hessian(&DVector::zeros(2)).unwrap();
    let want = &mu * mu.transpose() - DMatrix::identity(2, 2);
    assert!((&h - &want).amax() < 1e-12);
    for v in [dvector![1.0, 0.0], dvector![0.3, -2.0]] {
        assert!((mix.hvp(&DVector::zeros(2), &v).unwrap() - &h * &v).amax() < 1e-12);
    }

    let field = GmmField::new(mix, NoiseSchedule::default_linear());
    let zero = DVector::zeros(2);
    let mut eig: Vec<f64> = metrics::spectrum_at(&field, &zero, 0, None, 2, 3)
        .unwrap()
        .values
        .iter()
        .map(|z| z.re)
        .collect();
    eig.sort_by(f64::total_cmp);
    // t = 0 barely moves the mixture, so the spectrum is close to {-1, 3}.
    assert!((eig[0] + 1.0).abs() < 1e-3 && (eig[1] - 3.0).abs() < 1e-3, "{eig:?}");
}

#[test]
fn sampling_statistics() {
    let g = Gaussian::isotropic(DVector::zeros(3), 1.0).unwrap();
    let mut rng = random::rng(1);
    let n = 100_000;
    let mean = (0..n).fold(DVector::zeros(3), |a, _| a + g.sample(&mut rng)) / n as f64;
    assert!(mean.amax() < 0.02, "{mean}");

    let toy = build_toy_dataset(&ToyConfig::default(), 0).unwrap();
    let draws = toy.mixture.sample_with_components(&mut random::rng(2), 10_000);
    let sharp = draws.iter().filter(|(k, _)| *k == 0).count() as f64 / 1e4;
    assert!((sharp - 0.05).abs() <= 0.0066, "{sharp}");
}

fn ks_statistic(mut v: Vec<f64>) -> f64 {
    let n = v.len() as f64;
    let norm = Normal::new(0.0, 1.0).unwrap();
    v.sort_by(f64::total_cmp);
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = norm.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn standard_normal_is_a_sampler_fixed_point() {
    let s = NoiseSchedule::default_linear();
    let field = LinearField::new(-DMatrix::identity(2, 2), DVector::zeros(2), s).unwrap();
    let cfg = SamplerConfig::default();
    let mut rng = random::rng(4);
    let n = 10_000;
    let out: Vec<DVector<f64>> = (0..n)
        .map(|_| diffusion::generate(&field, &random::normal_vector(2, &mut rng), None, &cfg).unwrap())
        .collect();
    // p > 0.01 for one-sample KS, asymptotic critical value.
    let crit = 1.628 / (n as f64).sqrt();
    for j in 0..2 {
        let d = ks_statistic(out.iter().map(|x| x[j]).collect());
        assert!(d < crit, "coordinate {j}: {d} vs {crit}");
    }
}

#[test]
fn unconditional_generations_follow_mode_weights() {
    let toy = build_toy_dataset(&ToyConfig::default(), 0).unwrap();
    let sharp_mean = toy.mixture.components()[0].mean().clone();
    let field = GmmField::new(toy.mixture, NoiseSchedule::default_linear());
    let cfg = SamplerConfig { inference_steps: 500, guidance: 1.0, eta: 0.0 };
    let n = 1000;
    let mut rng = random::rng(8);
    let inits: Vec<DVector<f64>> = (0..n).map(|_| random::normal_vector(2, &mut rng)).collect();
    let sharp = inits
        .iter()
        .filter(|x| {
            let y = diffusion::generate(&field, x, None, &cfg).unwrap();
            // Ten sharp-mode standard deviations; broad mass there is negligible.
            (&y - &sharp_mean).norm() < 0.1
        })
        .count() as f64
        / n as f64;
    let sd = (0.05f64 * 0.95 / n as f64).sqrt();
    assert!((sharp - 0.05).abs() <= 3.0 * sd, "{sharp}");
}

#[test]
fn monte_carlo_identities() {
    let r = metrics::verify_lemma_score_norm(&diag(&[1.0, 4.0]), 100_000, 1).unwrap();
    assert_eq!(r.closed_form, 1.25);
    assert!(r.passes());

    let z = DVector::zeros(2);
    let r = metrics::verify_lemma_score_difference(&z, &z, &DMatrix::identity(2, 2), &diag(&[0.25, 1.0]), 100_000, 2)
        .unwrap();
    assert!((r.closed_form - 2.25).abs() < 1e-12);
    assert!(r.passes());

    let r = metrics::verify_lemma_score_cubic(&diag(&[1.0, 4.0]), 100_000, 3).unwrap();
    assert!((r.closed_form - 1.015625).abs() < 1e-12);
    assert!(r.passes());

    let z1 = DVector::zeros(1);
    let r = metrics::verify_hsp_expectation(&z1, &z1, &diag(&[1.0]), &diag(&[0.25]), 100_000, 4).unwrap();
    assert!((r.closed_form - 20.25).abs() < 1e-12);
    assert!(r.passes());
}

#[test]
fn hsp_on_linear_fields_by_hand() {
    let a = dmatrix![0.0, 1.0; 0.0, 0.0];
    let ac = dmatrix![2.0, 1.0; 1.0, -1.0];
    let field = LinearField::new(a.clone(), DVector::zeros(2), NoiseSchedule::default_linear())
        .unwrap()
        .with_condition(ac.clone(), DVector::zeros(2))
        .unwrap();
    let x = dvector![1.0, 2.0];
    // A_c - A = [[2, 0], [1, -1]]; (A_c - A) x = (2, -1); again = (4, 3).
    assert_eq!(metrics::hsp_exact(&field, &x, 10, "c").unwrap(), 25.0);
    for delta in [1.0, 0.1, 1e-3] {
        assert!((metrics::hsp_taylor(&field, &x, 10, "c", delta).unwrap() - 25.0).abs() < 1e-6);
    }
    let cfg = SailConfig { alpha: 0.0, delta: 0.5, ..SailConfig::default() };
    assert!((sail_loss(&field, &x, "c", &cfg).unwrap().total - 25.0 * 0.25).abs() < 1e-12);
}

#[test]
fn sharp_conditioning_has_the_larger_sail_loss() {
    let toy = build_toy_dataset(&ToyConfig::default(), 0).unwrap();
    let field = GmmField::new(toy.mixture, NoiseSchedule::default_linear());
    let cfg = SailConfig { alpha: 0.0, ..SailConfig::default() };
    let mut rng = random::rng(21);
    for _ in 0..100 {
        let x = random::normal_vector(2, &mut rng);
        let sharp = sail_loss(&field, &x, SHARP, &cfg).unwrap().sharpness;
        let broad = sail_loss(&field, &x, BROAD, &cfg).unwrap().sharpness;
        assert!(sharp > broad, "{sharp} <= {broad}");
    }
}

#[test]
fn fisher_rao_ratio_approaches_its_limit() {
    let mut rng = random::rng(6);
    let sigma = random::spd_matrix(3, 0.5, &mut rng);
    let g = DMatrix::from_fn(3, 3, |_, _| random::normal_vector(1, &mut rng)[0]);
    let dir = (&g + g.transpose()) * 0.5;
    let rows = metrics::fisher_rao_check(&sigma, &dir, &[0.1, 0.05, 0.025]).unwrap();
    let limit = metrics::fisher_rao_limit_ratio(&sigma, &dir).unwrap();
    let gaps: Vec<f64> = rows.iter().map(|r| (r.ratio / limit - 1.0).abs()).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[2] <= 0.05);
}

#[test]
fn tpr_under_the_null_is_near_the_target() {
    let mut rng = random::rng(31);
    let n = 20_000;
    let scores: Vec<f64> = (0..2 * n).map(|_| random::normal_vector(1, &mut rng)[0]).collect();
    let labels: Vec<bool> = (0..2 * n).map(|i| i % 2 == 0).collect();
    let tpr = eval::tpr_at_fpr(&scores, &labels, 0.05).unwrap();
    assert!((tpr - 0.05).abs() < 0.01, "{tpr}");
}

#[test]
fn trained_score_of_a_standard_normal() {
    let mut rng = random::rng(3);
    let data: Vec<Example> =
        (0..2000).map(|_| Example { x: random::normal_vector(2, &mut rng).as_slice().to_vec(), label: None }).collect();
    let cfg = MlpConfig { dim: 2, hidden: vec![32, 32], time_features: 16, cond_features: 4, labels: vec![], prediction: Prediction::Noise };
    let mut net = Mlp::init(cfg, &mut random::rng(4)).unwrap();
    let sched = NoiseSchedule::default_linear();
    let train = TrainConfig { epochs: 150, learning_rate: 3e-3, lambda2: 0.0, p_drop: 0.0, ..TrainConfig::default() };
    scorenet::train(&mut net, &data, &train, &sched).unwrap();
    let field = NetField::new(net, sched);
    let (mut num, mut den) = (0.0, 0.0);
    for i in -4..=4 {
        for j in -4..=4 {
            let x = dvector![i as f64 * 0.5, j as f64 * 0.5];
            let s = field.score(&x, 500, None).unwrap();
            num += (&s + &x).norm_squared();
            den += x.norm_squared();
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel <= 0.1, "relative L2 error {rel}");
}

#[test]
fn duplicated_point_is_reproduced() {
    let mut rng = random::rng(12);
    let dup = vec![1.5, -0.5];
    let mut data: Vec<Example> = (0..100).map(|_| Example { x: dup.clone(), label: Some("dup".into()) }).collect();
    data.extend(
        (0..400).map(|_| Example { x: random::normal_vector(2, &mut rng).as_slice().to_vec(), label: Some("other".into()) }),
    );
    let cfg = MlpConfig {
        dim: 2,
        hidden: vec![64, 64],
        time_features: 16,
        cond_features: 8,
        labels: vec!["dup".into(), "other".into()],
        prediction: Prediction::Noise,
    };
    let mut net = Mlp::init(cfg, &mut random::rng(13)).unwrap();
    let sched = NoiseSchedule::default_linear();
    let train = TrainConfig { epochs: 1000, learning_rate: 3e-3, lambda2: 0.0, cosine_decay: true, ..TrainConfig::default() };
    scorenet::train(&mut net, &data, &train, &sched).unwrap();
    let field = NetField::new(net, sched);
    let target = DVector::from_vec(dup);
    let sampler = SamplerConfig { inference_steps: 100, guidance: 1.0, eta: 0.0 };
    let mut near = MeanAcc::default();
    for _ in 0..100 {
        let y = diffusion::generate(&field, &random::normal_vector(2, &mut rng), Some("dup"), &sampler).unwrap();
        near.push(f64::from((y - &target).norm() < 0.25));
    }
    assert!(near.mean() >= 0.95, "{}", near.mean());
}
