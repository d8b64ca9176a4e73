use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mixture::{log_sum_exp, softmax_in_place, GaussianMixture};
use super::posterior::PosteriorMap;
use super::tilt::tilt;
use crate::error::{Error, Result};
use crate::rewards::{check_alpha, RewardSpec};
use crate::rng::RandomSource;
use crate::sde::NoiseSchedule;

/// Monte Carlo settings for control terms of rewards without closed forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Draws per mixture component.
    pub draws: usize,
    pub rng: RandomSource,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { draws: 2048, rng: RandomSource::new(0) }
    }
}

/// Control terms at a fixed time: `u = grad log E[exp(r/alpha) | x_t]`
/// and its first-order surrogate `u_bar = grad E[r | x_t] / alpha`.
pub struct ControlAt<'a> {
    reward: &'a RewardSpec,
    alpha: f64,
    map: PosteriorMap,
    tilted_pair: Option<(GaussianMixture, GaussianMixture)>,
    noise: Vec<Vec<DVector<f64>>>,
}

impl<'a> ControlAt<'a> {
    pub fn new(
        prior: &GaussianMixture,
        reward: &'a RewardSpec,
        alpha: f64,
        schedule: &NoiseSchedule,
        t: f64,
        mc: &McConfig,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if reward.dim() != prior.dim() {
            return Err(Error::DimensionMismatch { expected: prior.dim(), got: reward.dim() });
        }
        let map = PosteriorMap::new(prior, schedule, t)?;
        let tilted_pair = match reward {
            RewardSpec::Quadratic { .. } => {
                let ab = map.alpha_bar();
                let tilted = tilt(prior, reward, alpha)?.mixture.marginal_at_alpha_bar(ab)?;
                Some((tilted, map.marginal().clone()))
            }
            _ => None,
        };
        let noise = if matches!(reward, RewardSpec::BlackBox(_)) {
            if mc.draws == 0 {
                return Err(Error::InsufficientDraws { got: 0, min: 1 });
            }
            let mut g = mc.rng.rng();
            (0..prior.num_components())
                .map(|_| {
                    (0..mc.draws).map(|_| DVector::from_fn(prior.dim(), |_, _| g.sample(StandardNormal))).collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { reward, alpha, map, tilted_pair, noise })
    }

    pub fn posterior(&self) -> &PosteriorMap {
        &self.map
    }

    /// Exact control `u`.
    pub fn exact(&self, x: &[f64]) -> Result<Vec<f64>> {
        let alpha = self.alpha;
        match self.reward {
            RewardSpec::Linear { a, .. } => {
                let p = self.map.at(x)?;
                let k = p.resp.len();
                let mut logits: Vec<f64> = (0..k)
                    .map(|i| {
                        let s = self.map.covariance(i);
                        p.log_resp[i] + a.dot(&p.means[i]) / alpha + a.dot(&(s * a)) / (2.0 * alpha * alpha)
                    })
                    .collect();
                softmax_in_place(&mut logits);
                let mut u = DVector::zeros(x.len());
                for i in 0..k {
                    u += logits[i] * (&p.grad_log_resp[i] + self.map.jacobian(i) * a / alpha);
                }
                Ok(u.iter().cloned().collect())
            }
            RewardSpec::Quadratic { .. } => {
                let (tilted, base) = self.tilted_pair.as_ref().expect("built for quadratic rewards");
                Ok(tilted.score(x).iter().zip(base.score(x)).map(|(a, b)| a - b).collect())
            }
            RewardSpec::BlackBox(_) => self.fd(x, |me, y| me.mc_log_mgf(y)),
        }
    }

    /// First-order surrogate `u_bar`.
    pub fn approx(&self, x: &[f64]) -> Result<Vec<f64>> {
        let alpha = self.alpha;
        let p = match self.reward {
            RewardSpec::BlackBox(_) => {
                return Ok(self.fd(x, |me, y| me.mc_mean(y))?.iter().map(|v| v / alpha).collect())
            }
            _ => self.map.at(x)?,
        };
        let mut u = DVector::zeros(x.len());
        for i in 0..p.resp.len() {
            let (e, grad_e) = self.posterior_mean_reward(i, &p.means[i]);
            u += p.resp[i] * (grad_e + e * &p.grad_log_resp[i]);
        }
        Ok((u / alpha).iter().cloned().collect())
    }

    /// `E[r | x_t, component k]` and its gradient in `x_t`, for linear or quadratic `r`.
    fn posterior_mean_reward(&self, k: usize, m: &DVector<f64>) -> (f64, DVector<f64>) {
        let jac = self.map.jacobian(k);
        match self.reward {
            RewardSpec::Linear { a, b } => (a.dot(m) + b, jac * a),
            RewardSpec::Quadratic { matrix, a, b } => {
                let s = self.map.covariance(k);
                let e = m.dot(&(matrix * m)) + (matrix * s).trace() + a.dot(m) + b;
                let g = jac * (2.0 * matrix * m + a);
                (e, g)
            }
            RewardSpec::BlackBox(_) => unreachable!(),
        }
    }

    fn mc_rewards(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let p = self.map.at(x)?;
        let mut vals = Vec::with_capacity(p.resp.len());
        for (k, m) in p.means.iter().enumerate() {
            let chol = &self.map.component(k).chol;
            let mut acc = Vec::with_capacity(self.noise[k].len());
            for z in &self.noise[k] {
                let y = m + chol * z;
                let r = self.reward.value(y.as_slice());
                if !r.is_finite() {
                    return Err(Error::NonFiniteReward { x: y.iter().cloned().collect() });
                }
                acc.push(r);
            }
            vals.push(acc);
        }
        Ok((p.log_resp, vals))
    }

    fn mc_mean(&self, x: &[f64]) -> Result<f64> {
        let (log_resp, vals) = self.mc_rewards(x)?;
        Ok(log_resp.iter().zip(&vals).map(|(l, v)| l.exp() * v.iter().sum::<f64>() / v.len() as f64).sum())
    }

    fn mc_log_mgf(&self, x: &[f64]) -> Result<f64> {
        let (log_resp, vals) = self.mc_rewards(x)?;
        let terms: Vec<f64> = log_resp
            .iter()
            .zip(&vals)
            .map(|(l, v)| {
                let scaled: Vec<f64> = v.iter().map(|r| r / self.alpha).collect();
                l + log_sum_exp(&scaled) - (v.len() as f64).ln()
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    fn fd(&self, x: &[f64], g: impl Fn(&Self, &[f64]) -> Result<f64>) -> Result<Vec<f64>> {
        let mut xp = x.to_vec();
        let mut out = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let h = 1e-4 * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            let fp = g(self, &xp)?;
            xp[j] = x[j] - h;
            let fm = g(self, &xp)?;
            xp[j] = x[j];
            out.push((fp - fm) / (2.0 * h));
        }
        Ok(out)
    }
}

/// Exact control `u(x, t)` for a reward; Monte Carlo with finite differences for black boxes.
pub fn control_exact(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    ControlAt::new(prior, reward, alpha, schedule, t, &McConfig::default())?.exact(x)
}

/// Surrogate control `u_bar(x, t) = grad E[r(x_0) | x_t = x] / alpha`.
pub fn control_approx(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    mc: &McConfig,
) -> Result<Vec<f64>> {
    ControlAt::new(prior, reward, alpha, schedule, t, mc)?.approx(x)
}
