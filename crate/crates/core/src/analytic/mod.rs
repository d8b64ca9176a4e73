//! Closed-form Gaussian-mixture diffusion models: marginals, tilts, posteriors and control terms.

mod control;
mod mixture;
mod posterior;
mod tilt;

use std::sync::Arc;

use nalgebra::DMatrix;

pub use control::{control_approx, control_exact, ControlAt, McConfig};
pub use mixture::{GaussianMixture, MixtureSpec};
pub use posterior::{posterior_x0_given_xt, PosteriorMap, PosteriorPoint};
pub use tilt::{tilt, Tilted};

pub(crate) use mixture::log_sum_exp;

use crate::drift::{drift_from_score, DriftModel, Provenance, ScoreField, ScoreSlice};
use crate::error::Result;
use crate::rewards::RewardSpec;
use crate::sde::NoiseSchedule;

/// Exact score field `grad log p_t` of the forward process started from a mixture.
#[derive(Clone, Debug)]
pub struct MixtureScore {
    prior: Arc<GaussianMixture>,
    schedule: NoiseSchedule,
}

impl MixtureScore {
    pub fn new(prior: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { prior: Arc::new(prior), schedule }
    }
    pub fn prior(&self) -> &GaussianMixture {
        &self.prior
    }
}

struct MarginalSlice(GaussianMixture);

impl ScoreSlice for MarginalSlice {
    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        self.0.score_into(x, out);
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.0.log_density_hessian(x)
    }
}

impl ScoreField for MixtureScore {
    fn dim(&self) -> usize {
        self.prior.dim()
    }
    fn score_slice(&self, t: f64) -> Result<Box<dyn ScoreSlice + '_>> {
        Ok(Box::new(MarginalSlice(self.prior.marginal_at(&self.schedule, t)?)))
    }
}

/// Drift of the reverse process whose time-zero law is `prior`.
pub fn pretrained_drift(prior: &GaussianMixture, schedule: NoiseSchedule) -> DriftModel {
    drift_from_score(Arc::new(MixtureScore::new(prior.clone(), schedule)), schedule, Provenance::Pretrained)
}

/// Drift whose time-zero law is the prior tilted by `exp(r / alpha)`.
pub fn exact_finetuned_drift(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: NoiseSchedule,
) -> Result<DriftModel> {
    let tilted = tilt(prior, reward, alpha)?;
    Ok(drift_from_score(
        Arc::new(MixtureScore::new(tilted.mixture, schedule)),
        schedule,
        Provenance::ExactTilted { label: reward.label(), alpha },
    ))
}
