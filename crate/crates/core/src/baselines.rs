//! Comparison methods: the exact multi-reward oracle, reward-gradient guidance, CoDe and best-of-N.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{exact_finetuned_drift, pretrained_drift, GaussianMixture};
use crate::drift::{DriftField, DriftModel, DriftScore, DriftSlice, Provenance, ScoreField, ScoreSlice};
use crate::error::{Error, Result};
use crate::rewards::{scalarize, PreferenceWeights, RegularizationSpec, RewardSpec};
use crate::rng::RandomSource;
use crate::sde::{check_grid, euler_maruyama_reverse, NoiseSchedule, SampleBatch, TimeGrid, Trajectories};

/// Reward-gradient guidance settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RggConfig {
    /// Growth rate of the guidance scale per reference step.
    pub gamma: f64,
    /// Rescale each reward gradient to unit norm.
    pub normalize: bool,
    /// Guidance temperature; `inf` disables guidance.
    pub alpha: f64,
    /// Count steps from the end of sampling instead of the start.
    pub reverse_index: bool,
    /// Number of steps over which the scale grows by `(1 + gamma)^(reference - 1)`;
    /// the exponent is rescaled so grids of any length span the same range.
    pub schedule_reference: usize,
}

impl Default for RggConfig {
    fn default() -> Self {
        Self { gamma: 0.024, normalize: true, alpha: 1.0, reverse_index: false, schedule_reference: 50 }
    }
}

impl RggConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > -1.0) {
            return Err(Error::Domain { what: "gamma", value: self.gamma, domain: "(-1, inf)" });
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Domain { what: "alpha", value: self.alpha, domain: "(0, inf]" });
        }
        if self.schedule_reference == 0 {
            return Err(Error::Config("schedule_reference must be positive".into()));
        }
        Ok(())
    }

    /// Guidance scale at step `step` (1-based) of `steps`.
    pub fn scale(&self, step: usize, steps: usize) -> f64 {
        let j = if self.reverse_index { steps + 1 - step.min(steps + 1) } else { step };
        let exponent = (j as f64 - 1.0) * self.schedule_reference as f64 / steps as f64;
        (1.0 + self.gamma).powf(exponent)
    }
}

/// CoDe settings: `particles` candidates per block of `block` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodeConfig {
    pub particles: usize,
    pub block: usize,
}

impl Default for CodeConfig {
    fn default() -> Self {
        Self { particles: 20, block: 5 }
    }
}

/// Exact fine-tuned drift for the scalarised reward at temperature `alpha / lambda`;
/// `lambda = 0` gives the pretrained drift.
pub fn morl_oracle(
    prior: &GaussianMixture,
    basis: &[RewardSpec],
    w: &PreferenceWeights,
    alpha: f64,
    lambda: f64,
    schedule: NoiseSchedule,
) -> Result<DriftModel> {
    let reward = scalarize(basis, w)?;
    match RegularizationSpec::new(alpha, lambda)?.effective_alpha() {
        None => Ok(pretrained_drift(prior, schedule)),
        Some(a) => exact_finetuned_drift(prior, &reward, a, schedule),
    }
}

fn tweedie_slice(slice: &dyn ScoreSlice, x: &[f64], alpha_bar: f64, out: &mut [f64]) {
    slice.score_into(x, out);
    let (v, r) = (1.0 - alpha_bar, alpha_bar.sqrt());
    for (o, xi) in out.iter_mut().zip(x) {
        *o = (xi + v * *o) / r;
    }
}

/// Tweedie's estimate `(x + (1 - alpha_bar) s(x, t)) / sqrt(alpha_bar)` of `E[x_0 | x_t = x]`.
/// Returns `x` unchanged at `t = 0`.
pub fn tweedie_denoise(x: &[f64], t: f64, score: &dyn ScoreField, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x.len() != score.dim() {
        return Err(Error::DimensionMismatch { expected: score.dim(), got: x.len() });
    }
    let ab = schedule.alpha_bar(t)?;
    if t == 0.0 {
        return Ok(x.to_vec());
    }
    let mut out = vec![0.0; x.len()];
    tweedie_slice(score.score_slice(t)?.as_ref(), x, ab, &mut out);
    Ok(out)
}

/// Counters collected while an RGG drift is evaluated.
#[derive(Clone, Debug, Default)]
pub struct RggDiagnostics {
    zero_norm: Arc<AtomicU64>,
}

impl RggDiagnostics {
    /// Gradient evaluations whose norm was zero, so normalisation was skipped.
    pub fn zero_norm_count(&self) -> u64 {
        self.zero_norm.load(Ordering::Relaxed)
    }

    pub fn warnings(&self) -> Vec<String> {
        match self.zero_norm_count() {
            0 => Vec::new(),
            n => vec![format!("rgg: {n} zero-norm reward gradients left unnormalised")],
        }
    }
}

struct Rgg {
    pre: DriftModel,
    score: DriftScore,
    basis: Vec<RewardSpec>,
    weights: Vec<f64>,
    config: RggConfig,
    schedule: NoiseSchedule,
    knots: Vec<f64>,
    diag: RggDiagnostics,
}

struct RggSlice<'a> {
    pre: Box<dyn DriftSlice + 'a>,
    score: Box<dyn ScoreSlice + 'a>,
    owner: &'a Rgg,
    alpha_bar: f64,
    coef: f64,
}

impl DriftSlice for RggSlice<'_> {
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.pre.eval_into(x, out);
        if self.coef == 0.0 {
            return;
        }
        let d = x.len();
        let ab = self.alpha_bar;
        let mut x0 = vec![0.0; d];
        tweedie_slice(self.score.as_ref(), x, ab, &mut x0);
        let jac = (DMatrix::identity(d, d) + self.score.jacobian(x) * (1.0 - ab)) / ab.sqrt();
        let mut total = DVector::zeros(d);
        for (r, w) in self.owner.basis.iter().zip(&self.owner.weights) {
            if *w == 0.0 {
                continue;
            }
            let grad = match r.gradient(&x0) {
                Ok(g) => DVector::from_vec(g),
                Err(_) => DVector::from_element(d, f64::NAN),
            };
            let mut g = jac.transpose() * grad;
            if self.owner.config.normalize {
                let n = g.norm();
                if n > 0.0 {
                    g /= n;
                } else {
                    self.owner.diag.zero_norm.fetch_add(1, Ordering::Relaxed);
                }
            }
            total += *w * g;
        }
        for (o, g) in out.iter_mut().zip(total.iter()) {
            *o -= self.coef * g;
        }
    }
}

impl DriftField for Rgg {
    fn dim(&self) -> usize {
        self.pre.dim()
    }
    fn slice(&self, t: f64) -> Result<Box<dyn DriftSlice + '_>> {
        let pre = self.pre.slice(t)?;
        let n = self.knots.len() - 1;
        let k = self.knots.partition_point(|&kt| kt < t - 1e-12 * self.schedule.horizon());
        let step = n + 1 - k.min(n);
        let coef = if self.config.alpha.is_infinite() {
            0.0
        } else {
            self.config.scale(step, n) * self.schedule.beta_at(t)? / self.config.alpha
        };
        Ok(Box::new(RggSlice {
            pre,
            score: self.score.score_slice(t)?,
            owner: self,
            alpha_bar: self.schedule.alpha_bar(t)?,
            coef,
        }))
    }
}

/// Reward-gradient guidance on top of `pre`.
///
/// At reverse step `k` (counted from the first step at `t = T`) the mean update gains
/// `lambda_k beta(t_k) dt_k / alpha * sum_i w_i g_i`, with `g_i` the gradient of
/// `r_i(x0_hat(x_t))` in `x_t`. In drift form the step size cancels.
pub fn rgg_drift(
    pre: &DriftModel,
    basis: &[RewardSpec],
    w: &PreferenceWeights,
    config: RggConfig,
    schedule: NoiseSchedule,
    grid: &TimeGrid,
) -> Result<(DriftModel, RggDiagnostics)> {
    config.validate()?;
    check_grid(&schedule, grid)?;
    if basis.len() != w.len() {
        return Err(Error::LengthMismatch(format!("{} rewards but {} weights", basis.len(), w.len())));
    }
    for r in basis {
        if r.dim() != pre.dim() {
            return Err(Error::DimensionMismatch { expected: pre.dim(), got: r.dim() });
        }
    }
    let diag = RggDiagnostics::default();
    let field = Rgg {
        pre: pre.clone(),
        score: DriftScore::new(pre.clone(), schedule),
        basis: basis.to_vec(),
        weights: w.as_slice().to_vec(),
        config,
        schedule,
        knots: grid.knots().to_vec(),
        diag: diag.clone(),
    };
    let provenance = Provenance::Rgg { weights: w.as_slice().to_vec(), alpha: config.alpha };
    Ok((DriftModel::new(Arc::new(field), provenance, pre.horizon()), diag))
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Block-wise lookahead selection.
///
/// Trajectory `i` starts exactly as in [`euler_maruyama_reverse`]. In each block, particle 0
/// continues the trajectory's own stream and particles `1..N` use fresh streams derived from
/// `(i, block, particle)`; the particle whose denoised state has the highest reward is kept,
/// ties going to the lowest index. With one particle this reproduces plain sampling bit for bit.
pub fn code_sample(
    drift: &DriftModel,
    reward: &RewardSpec,
    config: CodeConfig,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    rng: RandomSource,
    batch: usize,
) -> Result<SampleBatch> {
    check_grid(schedule, grid)?;
    if config.particles == 0 || config.block == 0 {
        return Err(Error::Config("particles and block length must be positive".into()));
    }
    let steps = grid.num_steps();
    if !steps.is_multiple_of(config.block) {
        return Err(Error::Config(format!("block length {} does not divide {steps} steps", config.block)));
    }
    if reward.dim() != drift.dim() {
        return Err(Error::DimensionMismatch { expected: drift.dim(), got: reward.dim() });
    }
    let d = drift.dim();
    let n = config.particles;
    let knots = grid.knots();
    let score = DriftScore::new(drift.clone(), *schedule);
    let fresh = rng.labelled("code-particles");
    let (mut states, mut rngs) = Trajectories::from_prior(batch, d, rng)?.into_parts();

    let chunk = (65_536 / n).max(1);
    for start in (0..batch).step_by(chunk) {
        let end = (start + chunk).min(batch);
        for (b, from) in (0..steps / config.block).map(|b| (b, steps - b * config.block)) {
            let to = from - config.block;
            let mut ps = Vec::with_capacity((end - start) * n * d);
            let mut pr: Vec<ChaCha8Rng> = Vec::with_capacity((end - start) * n);
            for i in start..end {
                for j in 0..n {
                    ps.extend_from_slice(&states[i * d..(i + 1) * d]);
                    pr.push(if j == 0 {
                        rngs[i].clone()
                    } else {
                        fresh.substream(i as u64).substream((b * n + j) as u64).rng()
                    });
                }
            }
            let mut traj = Trajectories::from_parts(d, ps, pr);
            traj.advance(drift, schedule, grid, from, to)?;
            let (ps, mut pr) = traj.into_parts();
            let t = knots[to];
            let rewards: Vec<f64> = if to == 0 {
                ps.par_chunks_exact(d).map(|x| reward.value(x)).collect()
            } else {
                let slice = score.score_slice(t)?;
                let ab = schedule.alpha_bar(t)?;
                ps.par_chunks_exact(d)
                    .map(|x| {
                        let mut x0 = vec![0.0; d];
                        tweedie_slice(slice.as_ref(), x, ab, &mut x0);
                        reward.value(&x0)
                    })
                    .collect()
            };
            for (c, i) in (start..end).enumerate() {
                let k = c * n + argmax_first(rewards[c * n..(c + 1) * n].iter().copied());
                states[i * d..(i + 1) * d].copy_from_slice(&ps[k * d..(k + 1) * d]);
                rngs[i] = std::mem::replace(&mut pr[k], rngs[i].clone());
            }
        }
    }
    SampleBatch::new(d, 0.0, states)
}

/// Sample `n` candidates and return the one with the highest reward (lowest index on ties).
pub fn best_of_n(
    drift: &DriftModel,
    reward: &RewardSpec,
    n: usize,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    rng: RandomSource,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    let batch = euler_maruyama_reverse(drift, schedule, grid, rng, n)?;
    let k = argmax_first(batch.rows().map(|x| reward.value(x)));
    Ok(batch.row(k).to_vec())
}

/// `count` independent best-of-`n` selections; selection `i` equals
/// `best_of_n(.., rng.substream(i))`.
pub fn best_of_n_batch(
    drift: &DriftModel,
    reward: &RewardSpec,
    n: usize,
    count: usize,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    rng: RandomSource,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    check_grid(schedule, grid)?;
    let d = drift.dim();
    let mut out = Vec::with_capacity(count * d);
    let chunk = (65_536 / n).max(1);
    for start in (0..count).step_by(chunk) {
        let end = (start + chunk).min(count);
        let sources = (start..end).flat_map(|i| {
            let src = rng.substream(i as u64);
            (0..n).map(move |j| src.substream(j as u64))
        });
        let mut traj = Trajectories::from_sources(d, sources)?;
        traj.advance(drift, schedule, grid, grid.num_steps(), 0)?;
        let states = traj.states();
        for c in 0..end - start {
            let cand = &states[c * n * d..(c + 1) * n * d];
            let k = argmax_first(cand.chunks_exact(d).map(|x| reward.value(x)));
            out.extend_from_slice(&cand[k * d..(k + 1) * d]);
        }
    }
    SampleBatch::new(d, 0.0, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{posterior_x0_given_xt, MixtureScore};
    use crate::blend::db_mpa;
    use crate::metrics::{ks_two_sample, Estimate};
    use crate::quadrature::integrate;

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::uniform(steps, 1.0).unwrap()
    }

    fn mean_of(b: &SampleBatch) -> Estimate {
        Estimate::from_samples(&b.column(0)).unwrap()
    }

    #[test]
    fn oracle_matches_exact_and_blend() {
        let s = NoiseSchedule::default();
        let p = GaussianMixture::standard_normal(1).unwrap();
        let basis = vec![RewardSpec::linear(vec![1.0], 0.0).unwrap(), RewardSpec::linear(vec![-0.5], 0.0).unwrap()];
        let one = morl_oracle(&p, &basis, &PreferenceWeights::one_hot(2, 0).unwrap(), 1.0, 1.0, s).unwrap();
        let direct = exact_finetuned_drift(&p, &basis[0], 1.0, s).unwrap();
        assert_eq!(one.eval(&[0.3], 0.4).unwrap(), direct.eval(&[0.3], 0.4).unwrap());
        let w = PreferenceWeights::pair(0.3).unwrap();
        let fts: Vec<_> = basis.iter().map(|r| exact_finetuned_drift(&p, r, 1.0, s).unwrap()).collect();
        let blend = db_mpa(&fts, &w).unwrap();
        let oracle = morl_oracle(&p, &basis, &w, 1.0, 1.0, s).unwrap();
        for x in [-1.0, 0.2, 2.0] {
            assert!((blend.eval(&[x], 0.5).unwrap()[0] - oracle.eval(&[x], 0.5).unwrap()[0]).abs() < 1e-9);
        }
        let pre = morl_oracle(&p, &basis, &w, 1.0, 0.0, s).unwrap();
        assert_eq!(pre.provenance(), &Provenance::Pretrained);
        let q = vec![RewardSpec::quadratic(DMatrix::from_element(1, 1, 1.0), vec![0.0], 0.0).unwrap()];
        assert!(matches!(
            morl_oracle(&p, &q, &PreferenceWeights::new(vec![1.0]).unwrap(), 1.0, 10.0, s),
            Err(Error::TiltDiverges { .. })
        ));
    }

    #[test]
    fn tweedie_is_exact_posterior_mean() {
        let s = NoiseSchedule::default();
        for p in [
            GaussianMixture::univariate(vec![1.0], vec![0.7], vec![1.3]).unwrap(),
            GaussianMixture::univariate(vec![0.3, 0.7], vec![-2.0, 1.5], vec![0.6, 1.1]).unwrap(),
        ] {
            let score = MixtureScore::new(p.clone(), s);
            for &t in &[0.05, 0.3, 0.9] {
                for x in [-1.2, 0.4] {
                    let est = tweedie_denoise(&[x], t, &score, &s).unwrap()[0];
                    let exact = posterior_x0_given_xt(&p, &s, t, &[x]).unwrap().mean()[0];
                    assert!((est - exact).abs() < 1e-8, "{est} vs {exact}");
                }
            }
            assert_eq!(tweedie_denoise(&[0.4], 0.0, &score, &s).unwrap(), vec![0.4]);
        }
    }

    #[test]
    fn rgg_schedule_and_neutral_cases() {
        let flat = RggConfig { gamma: 0.0, ..Default::default() };
        assert!((1..=100).all(|k| flat.scale(k, 100) == 1.0));
        let c = RggConfig::default();
        assert!((c.scale(100, 100) - 1.024f64.powf(49.5)).abs() < 1e-9);
        assert!(RggConfig { gamma: -1.0, ..Default::default() }.validate().is_err());

        let s = NoiseSchedule::default();
        let g = grid(50);
        let p = GaussianMixture::univariate(vec![0.5, 0.5], vec![-2.0, 2.0], vec![1.0, 1.0]).unwrap();
        let pre = pretrained_drift(&p, s);
        let constant = vec![RewardSpec::linear(vec![0.0], 3.0).unwrap()];
        let one = PreferenceWeights::new(vec![1.0]).unwrap();
        let (rgg, diag) = rgg_drift(&pre, &constant, &one, RggConfig::default(), s, &g).unwrap();
        let lin = vec![RewardSpec::linear(vec![1.0], 0.0).unwrap()];
        let off = RggConfig { alpha: f64::INFINITY, ..Default::default() };
        let (inf, _) = rgg_drift(&pre, &lin, &one, off, s, &g).unwrap();
        for &t in &[0.02, 0.5, 1.0] {
            for x in [-1.0, 0.5] {
                assert_eq!(rgg.eval(&[x], t).unwrap(), pre.eval(&[x], t).unwrap());
                assert_eq!(inf.eval(&[x], t).unwrap(), pre.eval(&[x], t).unwrap());
            }
        }
        assert!(diag.zero_norm_count() > 0 && !diag.warnings().is_empty());
    }

    #[test]
    fn rgg_raises_reward() {
        let s = NoiseSchedule::default();
        let g = grid(100);
        let p = GaussianMixture::standard_normal(1).unwrap();
        let pre = pretrained_drift(&p, s);
        let r = vec![RewardSpec::linear(vec![1.0], 0.0).unwrap()];
        let (rgg, _) =
            rgg_drift(&pre, &r, &PreferenceWeights::new(vec![1.0]).unwrap(), RggConfig::default(), s, &g).unwrap();
        let guided = mean_of(&euler_maruyama_reverse(&rgg, &s, &g, RandomSource::new(1), 5000).unwrap());
        let plain = mean_of(&euler_maruyama_reverse(&pre, &s, &g, RandomSource::new(2), 5000).unwrap());
        let se = (guided.stderr.powi(2) + plain.stderr.powi(2)).sqrt();
        assert!(guided.value - plain.value > 3.0 * se, "{guided:?} {plain:?}");
    }

    #[test]
    fn code_single_particle_is_plain_sampling() {
        let s = NoiseSchedule::default();
        let g = grid(40);
        let p = GaussianMixture::univariate(vec![0.5, 0.5], vec![-2.0, 2.0], vec![1.0, 1.0]).unwrap();
        let pre = pretrained_drift(&p, s);
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let cfg = CodeConfig { particles: 1, block: 5 };
        let a = code_sample(&pre, &r, cfg, &s, &g, RandomSource::new(4), 300).unwrap();
        let b = euler_maruyama_reverse(&pre, &s, &g, RandomSource::new(4), 300).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(code_sample(&pre, &r, CodeConfig { particles: 2, block: 3 }, &s, &g, RandomSource::new(4), 3).is_err());
    }

    #[test]
    fn code_selection_raises_reward_and_is_neutral_for_constant_reward() {
        let s = NoiseSchedule::default();
        let g = grid(100);
        let p = GaussianMixture::standard_normal(1).unwrap();
        let pre = pretrained_drift(&p, s);
        let lin = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let code =
            mean_of(&code_sample(&pre, &lin, CodeConfig::default(), &s, &g, RandomSource::new(5), 2000).unwrap());
        let plain = mean_of(&euler_maruyama_reverse(&pre, &s, &g, RandomSource::new(6), 2000).unwrap());
        assert!(code.value >= plain.value - 3.0 * (code.stderr.powi(2) + plain.stderr.powi(2)).sqrt());
        assert!(code.value > plain.value);

        let flat = RewardSpec::linear(vec![0.0], 1.0).unwrap();
        let cfg = CodeConfig { particles: 4, block: 5 };
        let a = code_sample(&pre, &flat, cfg, &s, &g, RandomSource::new(7), 10_000).unwrap();
        let b = euler_maruyama_reverse(&pre, &s, &g, RandomSource::new(8), 10_000).unwrap();
        let ks = ks_two_sample(a.as_slice(), b.as_slice()).unwrap();
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn best_of_n_order_statistics() {
        let s = NoiseSchedule::default();
        let g = grid(100);
        let p = GaussianMixture::standard_normal(1).unwrap();
        let pre = pretrained_drift(&p, s);
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        let oracle = integrate(|x| x * 64.0 * phi(x) * cdf(x).powi(63), -10.0, 10.0, 1e-12);
        assert!((oracle - 2.343_733_465).abs() < 1e-8);
        let sel = best_of_n_batch(&pre, &r, 64, 400, &s, &g, RandomSource::new(11)).unwrap();
        let m = mean_of(&sel);
        assert!((m.value - oracle).abs() < 4.0 * m.stderr + 0.02, "{m:?} vs {oracle}");
        assert!((m.value - 2.39).abs() < 0.1);
        let single = best_of_n(&pre, &r, 64, &s, &g, RandomSource::new(11).substream(3)).unwrap();
        assert_eq!(single, sel.row(3));

        let one = best_of_n(&pre, &r, 1, &s, &g, RandomSource::new(12)).unwrap();
        let plain = euler_maruyama_reverse(&pre, &s, &g, RandomSource::new(12), 1).unwrap();
        assert_eq!(one, plain.row(0));
        let flat = RewardSpec::linear(vec![0.0], 0.0).unwrap();
        let first = best_of_n(&pre, &flat, 8, &s, &g, RandomSource::new(13)).unwrap();
        assert_eq!(first, euler_maruyama_reverse(&pre, &s, &g, RandomSource::new(13), 8).unwrap().row(0));
    }
}
