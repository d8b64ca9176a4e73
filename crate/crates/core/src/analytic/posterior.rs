use nalgebra::{DMatrix, DVector};

use super::mixture::{softmax_in_place, GaussianMixture};
use crate::error::{Error, Result};
use crate::sde::NoiseSchedule;

/// Per-component Gaussian posteriors of `x_0` given `x_t`, precomputed for one time.
///
/// Component `k` has posterior `N(m_k(x), S_k)` with `m_k(x) = b_k + J_k x`.
/// At `t = 0` the posterior collapses onto `x` (`S_k = 0`, `J_k = I`).
#[derive(Clone, Debug)]
pub struct PosteriorMap {
    marginal: GaussianMixture,
    comps: Vec<PostComponent>,
    dim: usize,
    alpha_bar: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct PostComponent {
    pub offset: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
}

/// Posterior quantities at one point `x_t`.
#[derive(Clone, Debug)]
pub struct PosteriorPoint {
    /// Responsibilities `rho_k(x_t)`.
    pub resp: Vec<f64>,
    pub log_resp: Vec<f64>,
    /// Posterior means `m_k(x_t)`.
    pub means: Vec<DVector<f64>>,
    /// `grad log rho_k = s_k - s`.
    pub grad_log_resp: Vec<DVector<f64>>,
    /// Mixture score of the marginal at `x_t`.
    pub score: DVector<f64>,
}

impl PosteriorMap {
    pub fn new(prior: &GaussianMixture, schedule: &NoiseSchedule, t: f64) -> Result<Self> {
        Self::at_alpha_bar(prior, schedule.alpha_bar(t)?)
    }

    pub fn at_alpha_bar(prior: &GaussianMixture, alpha_bar: f64) -> Result<Self> {
        let d = prior.dim();
        let marginal = prior.marginal_at_alpha_bar(alpha_bar)?;
        let eye = DMatrix::<f64>::identity(d, d);
        let mut comps = Vec::with_capacity(prior.num_components());
        for (m, s) in prior.means().iter().zip(prior.covariances()) {
            if alpha_bar == 1.0 {
                comps.push(PostComponent {
                    offset: DVector::zeros(d),
                    jac: eye.clone(),
                    cov: DMatrix::zeros(d, d),
                    chol: DMatrix::zeros(d, d),
                });
                continue;
            }
            let prec = s.clone().cholesky().expect("validated covariance").inverse();
            let c = alpha_bar / (1.0 - alpha_bar);
            let post_prec = &prec + &eye * c;
            let post_cov = post_prec
                .cholesky()
                .ok_or_else(|| Error::Numerical("posterior precision is not positive definite".into()))?
                .inverse();
            let post_cov = 0.5 * (&post_cov + post_cov.transpose());
            let chol = post_cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("posterior covariance is not positive definite".into()))?
                .l();
            let offset = &post_cov * (&prec * m);
            let jac = &post_cov * (alpha_bar.sqrt() / (1.0 - alpha_bar));
            comps.push(PostComponent { offset, jac, cov: post_cov, chol });
        }
        Ok(Self { marginal, comps, dim: d, alpha_bar })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }
    pub fn marginal(&self) -> &GaussianMixture {
        &self.marginal
    }
    pub fn num_components(&self) -> usize {
        self.comps.len()
    }
    pub(crate) fn component(&self, k: usize) -> &PostComponent {
        &self.comps[k]
    }
    /// Posterior covariance `S_k`.
    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.comps[k].cov
    }
    /// Lower Cholesky factor of `S_k`.
    pub fn covariance_chol(&self, k: usize) -> &DMatrix<f64> {
        &self.comps[k].chol
    }
    /// `d m_k / d x_t`.
    pub fn jacobian(&self, k: usize) -> &DMatrix<f64> {
        &self.comps[k].jac
    }

    pub fn mean(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let c = &self.comps[k];
        &c.offset + &c.jac * x
    }

    pub fn at(&self, x: &[f64]) -> Result<PosteriorPoint> {
        self.marginal.check_point(x)?;
        let xv = DVector::from_column_slice(x);
        let k = self.comps.len();
        let mut logs = vec![0.0; k];
        self.marginal.component_log_densities_into(x, &mut logs);
        let mut resp = logs.clone();
        softmax_in_place(&mut resp);
        let lse = super::mixture::log_sum_exp(&logs);
        let log_resp = logs.iter().map(|l| l - lse).collect();
        let comp_scores: Vec<DVector<f64>> = self
            .marginal
            .components()
            .iter()
            .map(|c| {
                let p = DMatrix::from_row_slice(self.dim, self.dim, &c.precision);
                -(p * (&xv - DVector::from_column_slice(&c.mean)))
            })
            .collect();
        let score = comp_scores.iter().zip(&resp).fold(DVector::zeros(self.dim), |acc, (s, r)| acc + *r * s);
        let grad_log_resp = comp_scores.iter().map(|s| s - &score).collect();
        let means = (0..k).map(|i| self.mean(i, &xv)).collect();
        Ok(PosteriorPoint { resp, log_resp, means, grad_log_resp, score })
    }

    /// The full posterior mixture; undefined at `t = 0` where it is a point mass.
    pub fn mixture_at(&self, x: &[f64]) -> Result<GaussianMixture> {
        if self.alpha_bar == 1.0 {
            return Err(Error::Domain {
                what: "t",
                value: 0.0,
                domain: "(0, T]; the posterior at t = 0 is a point mass",
            });
        }
        let p = self.at(x)?;
        GaussianMixture::normalized(p.resp, p.means, self.comps.iter().map(|c| c.cov.clone()).collect())
    }
}

/// Law of `x_0` given `x_t = x` under the prior `prior`.
pub fn posterior_x0_given_xt(
    prior: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: f64,
    x: &[f64],
) -> Result<GaussianMixture> {
    PosteriorMap::new(prior, schedule, t)?.mixture_at(x)
}
