//! Building and sampling each method for one preference vector and seed.

use std::sync::Arc;

use diffblend::analytic::{exact_finetuned_drift, pretrained_drift, tilt};
use diffblend::baselines::{best_of_n_batch, code_sample, morl_oracle, rgg_drift};
use diffblend::blend::{db_kla, db_mpa};
use diffblend::drift::DriftModel;
use diffblend::rewards::{scalarize, PreferenceWeights};
use diffblend::rng::RandomSource;
use diffblend::score_fit::{average_params, dsm_train, ScoreModel, TrainReport};
use diffblend::sde::{euler_maruyama_reverse, SampleBatch};

use crate::config::{ExperimentConfig, Method, Resolved};

/// Shared, read-only inputs of a run.
pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub res: &'a Resolved,
    pub pre: DriftModel,
}

/// Terminal samples of one method plus anything worth reporting.
pub struct Sampled {
    pub batch: SampleBatch,
    pub warnings: Vec<String>,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a ExperimentConfig, res: &'a Resolved) -> Self {
        Self { cfg, res, pre: pretrained_drift(&res.prior, cfg.schedule) }
    }

    /// Exactly fine-tuned drift for each basis reward at the configured alpha.
    pub fn finetuned(&self) -> diffblend::Result<Vec<DriftModel>> {
        self.res
            .rewards
            .iter()
            .map(|r| exact_finetuned_drift(&self.res.prior, r, self.cfg.alpha, self.cfg.schedule))
            .collect()
    }

    fn sample(&self, drift: &DriftModel, rng: RandomSource) -> diffblend::Result<SampleBatch> {
        euler_maruyama_reverse(drift, &self.cfg.schedule, &self.res.grid, rng, self.cfg.sampler.samples)
    }

    /// One score model per basis reward, fitted to samples of that reward's tilted law.
    pub fn fit_rewards(&self, seed: u64) -> diffblend::Result<Vec<(ScoreModel, TrainReport)>> {
        let root = RandomSource::new(seed);
        self.res
            .rewards
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let target = tilt(&self.res.prior, r, self.cfg.alpha)?.mixture;
                let data = target.sample(self.cfg.rs.train_samples, root.labelled("rs-data").substream(i as u64))?;
                dsm_train(&data, &self.cfg.schedule, &self.cfg.score_fit, root.labelled("rs-fit").substream(i as u64))
            })
            .collect()
    }

    /// Random source of the task `(method, w index, seed)`.
    pub fn task_rng(method: Method, w_index: usize, seed: u64) -> RandomSource {
        RandomSource::new(seed).labelled(method.name()).substream(w_index as u64)
    }

    /// Sample `method` at preference `w`. `fits` is required for `rs_learned`.
    pub fn run_method(
        &self,
        method: Method,
        w: &PreferenceWeights,
        rng: RandomSource,
        fits: Option<&[ScoreModel]>,
    ) -> diffblend::Result<Sampled> {
        let cfg = self.cfg;
        let res = self.res;
        let s = cfg.schedule;
        let plain = |batch| Ok(Sampled { batch, warnings: Vec::new() });
        match method {
            Method::Pretrained => plain(self.sample(&self.pre, rng)?),
            Method::MorlOracle => {
                let d = morl_oracle(&res.prior, &res.rewards, w, cfg.alpha, 1.0, s)?;
                plain(self.sample(&d, rng)?)
            }
            Method::DbMpa => plain(self.sample(&db_mpa(&self.finetuned()?, w)?, rng)?),
            Method::DbKla => {
                let blend = db_mpa(&self.finetuned()?, w)?;
                plain(self.sample(&db_kla(&self.pre, &blend, cfg.lambda)?, rng)?)
            }
            Method::RsLearned => {
                let fits = fits.ok_or_else(|| diffblend::Error::Config("rs_learned needs fitted models".into()))?;
                let avg = Arc::new(average_params(fits, w)?);
                plain(self.sample(&avg.drift(s, "rewarded soup"), rng)?)
            }
            Method::Rgg => {
                let (d, diag) = rgg_drift(&self.pre, &res.rewards, w, cfg.rgg, s, &res.grid)?;
                let batch = self.sample(&d, rng)?;
                Ok(Sampled { batch, warnings: diag.warnings() })
            }
            Method::Code => {
                let r = scalarize(&res.rewards, w)?;
                let n = cfg.code.samples.unwrap_or(cfg.sampler.samples);
                plain(code_sample(&self.pre, &r, cfg.code_config(), &s, &res.grid, rng, n)?)
            }
            Method::BestOfN => {
                let r = scalarize(&res.rewards, w)?;
                let n = cfg.best_of_n.samples.unwrap_or(cfg.sampler.samples);
                plain(best_of_n_batch(&self.pre, &r, cfg.best_of_n.n, n, &s, &res.grid, rng)?)
            }
        }
    }
}
