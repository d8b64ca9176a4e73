//! Cross-module checks against independent references: quadrature, closed forms and exact samplers.

use diffblend::analytic::{control_approx, control_exact, pretrained_drift, tilt, GaussianMixture, McConfig};
use diffblend::jensen::gap_delta;
use diffblend::metrics::{kl_estimate, ks_two_sample, KlMethod};
use diffblend::quadrature::integrate;
use diffblend::rewards::RewardSpec;
use diffblend::rng::RandomSource;
use diffblend::sde::{euler_maruyama_reverse, NoiseSchedule, TimeGrid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn bimodal() -> GaussianMixture {
    GaussianMixture::univariate(vec![0.4, 0.6], vec![-2.0, 1.5], vec![0.7, 1.2]).unwrap()
}

/// `log E[exp(r(x0)/alpha) | x_t = x]` up to an x-independent constant, by quadrature over x0.
fn log_h(prior: &GaussianMixture, r: &RewardSpec, alpha: f64, ab: f64, x: f64) -> f64 {
    let joint = |x0: f64, tilt: bool| {
        let w = if tilt { (r.value(&[x0]) / alpha).exp() } else { 1.0 };
        prior.density(&[x0]) * normal_pdf(x, ab.sqrt() * x0, 1.0 - ab) * w
    };
    (integrate(|x0| joint(x0, true), -15.0, 15.0, 1e-13) / integrate(|x0| joint(x0, false), -15.0, 15.0, 1e-13)).ln()
}

#[test]
fn control_matches_quadrature_gradient() {
    let prior = bimodal();
    let s = NoiseSchedule::default();
    let rewards = [
        RewardSpec::linear(vec![0.8], 0.3).unwrap(),
        RewardSpec::quadratic(DMatrix::from_element(1, 1, -0.5), vec![1.0], 0.0).unwrap(),
    ];
    for r in &rewards {
        for &t in &[0.05, 0.3, 0.8] {
            let ab = s.alpha_bar(t).unwrap();
            for &x in &[-2.5, 0.0, 1.0, 3.0] {
                let h = 1e-4;
                let fd = (log_h(&prior, r, 1.5, ab, x + h) - log_h(&prior, r, 1.5, ab, x - h)) / (2.0 * h);
                let u = control_exact(&prior, r, 1.5, &s, &[x], t).unwrap()[0];
                assert!((u - fd).abs() < 1e-6 * fd.abs().max(1.0), "{} t={t} x={x}: {u} vs {fd}", r.label());
            }
        }
    }
}

#[test]
fn surrogate_control_is_posterior_mean_gradient() {
    let prior = bimodal();
    let s = NoiseSchedule::default();
    let r = RewardSpec::linear(vec![2.0], 0.0).unwrap();
    let t = 0.4;
    let ab = s.alpha_bar(t).unwrap();
    let post_mean_r = |x: f64| {
        let w = |x0: f64| prior.density(&[x0]) * normal_pdf(x, ab.sqrt() * x0, 1.0 - ab);
        integrate(|x0| w(x0) * r.value(&[x0]), -15.0, 15.0, 1e-13) / integrate(w, -15.0, 15.0, 1e-13)
    };
    for &x in &[-1.0, 0.5, 2.0] {
        let h = 1e-4;
        let fd = (post_mean_r(x + h) - post_mean_r(x - h)) / (2.0 * h) / 2.0;
        let got = control_approx(&prior, &r, 2.0, &s, &[x], t, &McConfig::default()).unwrap()[0];
        assert!((got - fd).abs() < 1e-6, "x={x}: {got} vs {fd}");
    }
}

#[test]
fn gaussian_kl_matches_closed_form() {
    let p = GaussianMixture::gaussian(
        DVector::from_vec(vec![1.0, -0.5]),
        DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]),
    )
    .unwrap();
    let q = GaussianMixture::standard_normal(2).unwrap();
    let cov = p.covariance();
    let mean = p.mean();
    let closed = 0.5 * (cov.trace() + mean.dot(&mean) - 2.0 - cov.determinant().ln());
    let quad = kl_estimate(&p, &q, KlMethod::default()).unwrap();
    assert!((quad.value - closed).abs() < 1e-7, "{} vs {closed}", quad.value);
    let mc = kl_estimate(&p, &q, KlMethod::MonteCarlo { draws: 200_000, rng: RandomSource::new(3) }).unwrap();
    assert!((mc.value - closed).abs() < 4.0 * mc.stderr + 1e-3);
}

#[test]
fn tilted_law_matches_brute_force_normalisation() {
    let prior = bimodal();
    let r = RewardSpec::quadratic(DMatrix::from_element(1, 1, -0.3), vec![0.7], 0.2).unwrap();
    let t = tilt(&prior, &r, 0.8).unwrap();
    let z = integrate(|x| prior.density(&[x]) * (r.value(&[x]) / 0.8).exp(), -20.0, 20.0, 1e-13);
    assert!((t.log_normalizer - z.ln()).abs() < 1e-10);
    for &x in &[-3.0, -1.0, 0.0, 2.0, 4.0] {
        let want = prior.density(&[x]) * (r.value(&[x]) / 0.8).exp() / z;
        assert!((t.mixture.density(&[x]) - want).abs() < 1e-10 * want.max(1e-3));
    }
}

#[test]
fn reverse_sampler_reaches_the_prior() {
    let prior = bimodal();
    let s = NoiseSchedule::default();
    let grid = TimeGrid::uniform(500, s.horizon()).unwrap();
    let got = euler_maruyama_reverse(&pretrained_drift(&prior, s), &s, &grid, RandomSource::new(9), 20_000).unwrap();
    let exact = prior.sample(20_000, RandomSource::new(10)).unwrap();
    let ks = ks_two_sample(got.as_slice(), exact.as_slice()).unwrap();
    assert!(ks.p_value > 0.01, "{ks:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gap_vanishes_for_gaussian_priors(
        mean in -3.0f64..3.0,
        sd in 0.3f64..2.0,
        slope in -2.0f64..2.0,
        alpha in 0.3f64..3.0,
        x in -4.0f64..4.0,
        t in 0.01f64..1.0,
    ) {
        let prior = GaussianMixture::univariate(vec![1.0], vec![mean], vec![sd]).unwrap();
        let r = RewardSpec::linear(vec![slope], 0.0).unwrap();
        let d = gap_delta(&prior, &r, alpha, &NoiseSchedule::default(), &[x], t, &McConfig::default()).unwrap();
        prop_assert!(d[0].abs() < 1e-9 * (1.0 + slope.abs() / alpha));
    }

    #[test]
    fn tilt_by_zero_reward_is_identity(
        w in 0.1f64..0.9,
        m1 in -3.0f64..0.0,
        m2 in 0.0f64..3.0,
        alpha in 0.2f64..5.0,
    ) {
        let prior = GaussianMixture::univariate(vec![w, 1.0 - w], vec![m1, m2], vec![1.0, 0.5]).unwrap();
        let r = RewardSpec::linear(vec![0.0], 0.0).unwrap();
        let t = tilt(&prior, &r, alpha).unwrap();
        prop_assert!(t.log_normalizer.abs() < 1e-12);
        for x in [-2.0, 0.0, 2.0] {
            prop_assert!((t.mixture.density(&[x]) - prior.density(&[x])).abs() < 1e-12);
        }
    }
}
