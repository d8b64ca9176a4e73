use nalgebra::DVector;

use super::mixture::{cholesky, log_sum_exp, GaussianMixture};
use crate::error::{Error, Result};
use crate::rewards::{check_alpha, RewardSpec};

/// The tilted law `p(x) exp(r(x) / alpha) / Z` together with `log Z`.
#[derive(Clone, Debug)]
pub struct Tilted {
    pub mixture: GaussianMixture,
    pub log_normalizer: f64,
}

/// Exponentially tilt a mixture by a linear or quadratic reward.
///
/// Each component stays Gaussian; only the weights change beyond the
/// per-component update. Black-box rewards have no closed form.
pub fn tilt(prior: &GaussianMixture, reward: &RewardSpec, alpha: f64) -> Result<Tilted> {
    check_alpha(alpha)?;
    if reward.dim() != prior.dim() {
        return Err(Error::DimensionMismatch { expected: prior.dim(), got: reward.dim() });
    }
    let k = prior.num_components();
    let mut log_c = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    let offset = match reward {
        RewardSpec::Linear { a, b } => {
            let a = a / alpha;
            for ((w, m), s) in prior.weights().iter().zip(prior.means()).zip(prior.covariances()) {
                let sa = s * &a;
                log_c.push(w.ln() + a.dot(m) + 0.5 * a.dot(&sa));
                means.push(m + sa);
                covs.push(s.clone());
            }
            b / alpha
        }
        RewardSpec::Quadratic { matrix, a, b } => {
            let a = a / alpha;
            let two_a = matrix * (2.0 / alpha);
            for (i, ((w, m), s)) in prior.weights().iter().zip(prior.means()).zip(prior.covariances()).enumerate() {
                let prec = s.clone().cholesky().expect("validated covariance").inverse();
                let new_prec = &prec - &two_a;
                let new_prec = 0.5 * (&new_prec + new_prec.transpose());
                let ch = new_prec.clone().cholesky().ok_or_else(|| Error::TiltDiverges {
                    component: i,
                    reason: "precision minus 2A/alpha is not positive definite".into(),
                })?;
                let new_cov = ch.inverse();
                let new_cov = 0.5 * (&new_cov + new_cov.transpose());
                let (_, ld_new) = cholesky(&new_cov).ok_or_else(|| Error::TiltDiverges {
                    component: i,
                    reason: "tilted covariance is singular".into(),
                })?;
                let (_, ld_old) = cholesky(s).expect("validated covariance");
                let h: DVector<f64> = &prec * m + &a;
                let mu: DVector<f64> = &new_cov * &h;
                log_c.push(w.ln() + 0.5 * (ld_new - ld_old) + 0.5 * h.dot(&mu) - 0.5 * m.dot(&(&prec * m)));
                means.push(mu);
                covs.push(new_cov);
            }
            b / alpha
        }
        RewardSpec::BlackBox(bb) => {
            return Err(Error::Unsupported(format!("no closed-form tilt for black-box reward `{}`", bb.name())))
        }
    };
    let lse = log_sum_exp(&log_c);
    if !lse.is_finite() {
        return Err(Error::TiltDiverges { component: 0, reason: "normaliser is not finite".into() });
    }
    let weights = log_c.iter().map(|l| (l - lse).exp()).collect();
    let mixture = GaussianMixture::normalized(weights, means, covs)?;
    Ok(Tilted { mixture, log_normalizer: lse + offset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, integrate_2d};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn gaussian_linear_tilt_is_a_shift() {
        let p = GaussianMixture::standard_normal(1).unwrap();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let t = tilt(&p, &r, 1.0).unwrap();
        assert!((t.mixture.means()[0][0] - 1.0).abs() < 1e-15);
        assert!((t.mixture.covariances()[0][(0, 0)] - 1.0).abs() < 1e-15);
        assert!((t.log_normalizer - 0.5).abs() < 1e-15);
    }

    #[test]
    fn symmetric_mixture_tilt_weights() {
        let p = GaussianMixture::univariate(vec![0.5, 0.5], vec![-2.0, 2.0], vec![1.0, 1.0]).unwrap();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let t = tilt(&p, &r, 1.0).unwrap();
        let expected = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((t.mixture.weights()[1] - expected).abs() < 1e-12);
        assert!((t.mixture.means()[1][0] - 3.0).abs() < 1e-12);
        assert!((t.mixture.means()[0][0] + 1.0).abs() < 1e-12);
    }

    fn check_against_quadrature_1d(p: &GaussianMixture, r: &RewardSpec, alpha: f64) {
        let t = tilt(p, r, alpha).unwrap();
        let z = integrate(|x| p.density(&[x]) * (r.value(&[x]) / alpha).exp(), -30.0, 30.0, 1e-13);
        assert!((z.ln() - t.log_normalizer).abs() < 1e-6);
        let l1 = integrate(
            |x| (p.density(&[x]) * (r.value(&[x]) / alpha).exp() / z - t.mixture.density(&[x])).abs(),
            -30.0,
            30.0,
            1e-11,
        );
        assert!(l1 < 1e-6, "L1 error {l1}");
    }

    #[test]
    fn tilt_matches_quadrature_1d() {
        let p = GaussianMixture::univariate(vec![0.2, 0.5, 0.3], vec![-2.0, 0.5, 3.0], vec![0.7, 1.0, 0.4]).unwrap();
        check_against_quadrature_1d(&p, &RewardSpec::linear(vec![0.8], 0.3).unwrap(), 1.5);
        check_against_quadrature_1d(
            &p,
            &RewardSpec::quadratic(DMatrix::from_element(1, 1, -0.5), vec![1.0], 2.0).unwrap(),
            0.7,
        );
    }

    #[test]
    fn tilt_matches_quadrature_2d() {
        let p = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![-1.0, 1.0])],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6]),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.9]),
            ],
        )
        .unwrap();
        let r = RewardSpec::quadratic(DMatrix::from_row_slice(2, 2, &[-0.3, 0.1, 0.1, -0.2]), vec![0.5, -0.4], 0.0)
            .unwrap();
        let alpha = 1.0;
        let t = tilt(&p, &r, alpha).unwrap();
        let f = |x: f64, y: f64| p.density(&[x, y]) * (r.value(&[x, y]) / alpha).exp();
        let z = integrate_2d(f, [-14.0, -14.0], [14.0, 14.0], 1e-11);
        assert!((z.ln() - t.log_normalizer).abs() < 1e-6);
        let l1 =
            integrate_2d(|x, y| (f(x, y) / z - t.mixture.density(&[x, y])).abs(), [-14.0, -14.0], [14.0, 14.0], 1e-9);
        assert!(l1 < 1e-6, "L1 error {l1}");
    }

    #[test]
    fn divergent_quadratic_tilt_names_component() {
        let p = GaussianMixture::univariate(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 0.5]).unwrap();
        let r = RewardSpec::quadratic(DMatrix::from_element(1, 1, 0.75), vec![0.0], 0.0).unwrap();
        match tilt(&p, &r, 1.0) {
            Err(Error::TiltDiverges { component, .. }) => assert_eq!(component, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_alpha_and_black_box() {
        let p = GaussianMixture::standard_normal(1).unwrap();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        assert!(matches!(tilt(&p, &r, 0.0), Err(Error::Domain { .. })));
        assert!(matches!(tilt(&p, &r, f64::NAN), Err(Error::Domain { .. })));
        let bb = crate::rewards::catalog("tanh", 1).unwrap();
        assert!(matches!(tilt(&p, &bb, 1.0), Err(Error::Unsupported(_))));
    }

    proptest! {
        #[test]
        fn tilt_weights_normalised(w in 0.05f64..0.95, a in -3.0f64..3.0, alpha in 0.1f64..5.0) {
            let p = GaussianMixture::univariate(vec![w, 1.0 - w], vec![-1.0, 2.0], vec![1.0, 0.5]).unwrap();
            let t = tilt(&p, &RewardSpec::linear(vec![a], 0.0).unwrap(), alpha).unwrap();
            prop_assert!((t.mixture.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(t.mixture.weights().iter().all(|v| *v >= 0.0));
        }
    }
}
