//! The gap between the exact control and its first-order surrogate, and the bound on it.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analytic::{ControlAt, GaussianMixture, McConfig, PosteriorMap, PosteriorPoint};
use crate::error::{Error, Result};
use crate::metrics::Estimate;
use crate::rewards::{check_alpha, RewardSpec};
use crate::rng::RandomSource;
use crate::sde::NoiseSchedule;

/// Minimum Monte Carlo draws for the batch-means standard error of L2.
pub const L2_BATCHES: usize = 16;

/// Which shift velocity to subtract from the reward-space score in L3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftReference {
    /// Unit coefficient.
    Unit,
    /// The constant minimising the supremum.
    #[default]
    Fitted,
}

/// Reward-value grid for the supremum in L3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RGrid {
    /// Spans every component mean +- 6 standard deviations.
    Auto { points: usize },
    /// Fixed interval; must carry at least 99.99% of the conditional mass.
    Explicit { lo: f64, hi: f64, points: usize },
}

impl Default for RGrid {
    fn default() -> Self {
        RGrid::Auto { points: 4001 }
    }
}

/// Settings for [`verify_bound`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenConfig {
    /// Posterior draws for L1 and (non-linear rewards) L2.
    pub draws: usize,
    pub rng: RandomSource,
    /// Monte Carlo settings for controls of black-box rewards.
    pub mc: McConfig,
    pub shift: ShiftReference,
    pub r_grid: RGrid,
    /// Standard errors of slack granted to L1 and L2 when deciding `satisfied`.
    pub slack_stderr: f64,
}

impl Default for JensenConfig {
    fn default() -> Self {
        Self {
            draws: 20_000,
            rng: RandomSource::new(0),
            mc: McConfig::default(),
            shift: ShiftReference::Fitted,
            r_grid: RGrid::default(),
            slack_stderr: 0.0,
        }
    }
}

/// Everything measured at one `(x, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub delta_norm: f64,
    pub l1: Estimate,
    pub l2: Estimate,
    /// `None` when the reward is not a one-dimensional linear reward.
    pub l3: Option<f64>,
    /// `L1 L2 + L3` when L3 is available.
    pub bound: Option<f64>,
    /// The bound with `slack_stderr` standard errors added to L1 and L2.
    pub slack_bound: Option<f64>,
    pub satisfied: Option<bool>,
}

fn check_inputs(prior: &GaussianMixture, reward: &RewardSpec, alpha: f64, x: &[f64]) -> Result<()> {
    check_alpha(alpha)?;
    if reward.dim() != prior.dim() {
        return Err(Error::DimensionMismatch { expected: prior.dim(), got: reward.dim() });
    }
    prior.check_point(x)
}

fn positive_time(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain { what: "t", value: t, domain: "(0, T]" })
    }
}

/// `Delta = u - u_bar` at `(x, t)`.
pub fn gap_delta(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    mc: &McConfig,
) -> Result<Vec<f64>> {
    check_inputs(prior, reward, alpha, x)?;
    let c = ControlAt::new(prior, reward, alpha, schedule, t, mc)?;
    let (u, ub) = (c.exact(x)?, c.approx(x)?);
    Ok(u.iter().zip(&ub).map(|(a, b)| a - b).collect())
}

struct PosteriorDraws {
    x0: Vec<DVector<f64>>,
    comp: Vec<usize>,
}

fn draw_posterior(map: &PosteriorMap, p: &PosteriorPoint, n: usize, rng: RandomSource) -> PosteriorDraws {
    let mut g = rng.rng();
    let d = map.dim();
    let mut x0 = Vec::with_capacity(n);
    let mut comp = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = g.random();
        let mut acc = 0.0;
        let mut k = p.resp.len() - 1;
        for (i, r) in p.resp.iter().enumerate() {
            acc += r;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = DVector::from_fn(d, |_, _| g.sample(StandardNormal));
        x0.push(&p.means[k] + map.covariance_chol(k) * z);
        comp.push(k);
    }
    PosteriorDraws { x0, comp }
}

/// `L1 = sqrt(E |grad_x eta|^2)` with `grad_x eta = J_k' grad r(x_0) / alpha - u_bar`.
pub fn estimate_l1(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    draws: usize,
    rng: RandomSource,
    mc: &McConfig,
) -> Result<Estimate> {
    check_inputs(prior, reward, alpha, x)?;
    if draws < 2 {
        return Err(Error::InsufficientDraws { got: draws, min: 2 });
    }
    let c = ControlAt::new(prior, reward, alpha, schedule, t, mc)?;
    let ub = DVector::from_vec(c.approx(x)?);
    let map = c.posterior();
    let p = map.at(x)?;
    let dr = draw_posterior(map, &p, draws, rng);
    let mut sq = Vec::with_capacity(draws);
    for (x0, &k) in dr.x0.iter().zip(&dr.comp) {
        let grad = DVector::from_vec(reward.gradient(x0.as_slice())?);
        let g = map.jacobian(k).transpose() * grad / alpha - &ub;
        sq.push(g.norm_squared());
    }
    let m = Estimate::from_samples(&sq)?;
    let value = m.value.max(0.0).sqrt();
    let stderr = if value > 0.0 { m.stderr / (2.0 * value) } else { 0.0 };
    Ok(Estimate { value, stderr })
}

fn l2_from(rs: &[f64]) -> f64 {
    let n = (rs.len() as f64).ln();
    let l1 = crate::analytic::log_sum_exp(rs) - n;
    let twice: Vec<f64> = rs.iter().map(|r| 2.0 * r).collect();
    let l2 = crate::analytic::log_sum_exp(&twice) - n;
    (l2 - 2.0 * l1).exp_m1().max(0.0).sqrt()
}

/// Monte Carlo `L2 = sqrt(Var[exp(R)] / E[exp(R)]^2)`, `R = r(x_0) / alpha`, with a
/// batch-means standard error over [`L2_BATCHES`] batches.
pub fn estimate_l2(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    draws: usize,
    rng: RandomSource,
) -> Result<Estimate> {
    check_inputs(prior, reward, alpha, x)?;
    if draws < L2_BATCHES {
        return Err(Error::InsufficientDraws { got: draws, min: L2_BATCHES });
    }
    let map = PosteriorMap::new(prior, schedule, t)?;
    let p = map.at(x)?;
    let dr = draw_posterior(&map, &p, draws, rng);
    let rs: Vec<f64> = dr.x0.iter().map(|y| reward.evaluate(y.as_slice()).map(|r| r / alpha)).collect::<Result<_>>()?;
    let value = l2_from(&rs);
    let size = draws / L2_BATCHES;
    let batch: Vec<f64> = rs.chunks_exact(size).take(L2_BATCHES).map(l2_from).collect();
    let spread = Estimate::from_samples(&batch)?;
    Ok(Estimate { value, stderr: spread.stderr })
}

/// Closed-form L2 for a linear reward.
pub fn l2_closed_form(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    check_inputs(prior, reward, alpha, x)?;
    let (a, b) = reward.as_linear().ok_or_else(|| Error::Unsupported("closed-form L2 needs a linear reward".into()))?;
    let map = PosteriorMap::new(prior, schedule, t)?;
    let p = map.at(x)?;
    let log_e = |s: f64| {
        let terms: Vec<f64> = (0..p.resp.len())
            .map(|k| {
                let mean = (a.dot(&p.means[k]) + b) / alpha;
                let var = a.dot(&(map.covariance(k) * a)) / (alpha * alpha);
                p.log_resp[k] + s * mean + 0.5 * s * s * var
            })
            .collect();
        crate::analytic::log_sum_exp(&terms)
    };
    Ok((log_e(2.0) - 2.0 * log_e(1.0)).exp_m1().max(0.0).sqrt())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// L3 for a one-dimensional linear reward: `(1 + 1/alpha) sup_r |A(r) - c G(r)|`, where
/// `A(r) = d/dx log p(R = r | x)`, `G(r) = -d/dr log p(R = r | x)` and `c` is the shift velocity.
///
/// Returns `Ok(None)` when the reward is not one-dimensional and linear.
pub fn estimate_l3(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    grid: RGrid,
    shift: ShiftReference,
) -> Result<Option<f64>> {
    check_inputs(prior, reward, alpha, x)?;
    let Some((a, b)) = reward.as_linear() else { return Ok(None) };
    if prior.dim() != 1 {
        return Ok(None);
    }
    positive_time(t)?;
    let a = a[0];
    if a == 0.0 {
        return Ok(Some(0.0));
    }
    let map = PosteriorMap::new(prior, schedule, t)?;
    let p = map.at(x)?;
    let k = p.resp.len();
    let nu: Vec<f64> = (0..k).map(|i| (a * p.means[i][0] + b) / alpha).collect();
    let tau: Vec<f64> = (0..k).map(|i| a.abs() * map.covariance(i)[(0, 0)].sqrt() / alpha).collect();
    let nu_dot: Vec<f64> = (0..k).map(|i| a * map.jacobian(i)[(0, 0)] / alpha).collect();
    let dlog_rho: Vec<f64> = p.grad_log_resp.iter().map(|g| g[0]).collect();

    let (lo, hi, points) = match grid {
        RGrid::Auto { points } => {
            let lo = (0..k).map(|i| nu[i] - 6.0 * tau[i]).fold(f64::INFINITY, f64::min);
            let hi = (0..k).map(|i| nu[i] + 6.0 * tau[i]).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi, points)
        }
        RGrid::Explicit { lo, hi, points } => {
            let coverage: f64 = (0..k)
                .map(|i| p.resp[i] * (normal_cdf((hi - nu[i]) / tau[i]) - normal_cdf((lo - nu[i]) / tau[i])))
                .sum();
            if coverage < 0.9999 {
                return Err(Error::InsufficientCoverage { coverage, required: 0.9999 });
            }
            (lo, hi, points)
        }
    };
    if points < 2 {
        return Err(Error::Config("the r-grid needs at least two points".into()));
    }
    let mut rows = Vec::with_capacity(points);
    let mut logs = vec![0.0; k];
    for j in 0..points {
        let r = lo + (hi - lo) * j as f64 / (points - 1) as f64;
        for i in 0..k {
            let z = (r - nu[i]) / tau[i];
            logs[i] = p.log_resp[i] - tau[i].ln() - 0.5 * z * z;
        }
        let lse = crate::analytic::log_sum_exp(&logs);
        let (mut big_a, mut big_g) = (0.0, 0.0);
        for i in 0..k {
            let pi = (logs[i] - lse).exp();
            let sc = (r - nu[i]) / (tau[i] * tau[i]);
            big_a += pi * (dlog_rho[i] + sc * nu_dot[i]);
            big_g += pi * sc;
        }
        rows.push((big_a, big_g));
    }
    let sup = |c: f64| rows.iter().map(|(a, g)| (a - c * g).abs()).fold(0.0, f64::max);
    let value = match shift {
        ShiftReference::Unit => sup(1.0),
        ShiftReference::Fitted => {
            let c0: f64 = (0..k).map(|i| p.resp[i] * nu_dot[i]).sum();
            let scale = nu_dot.iter().fold(0.0f64, |m, v| m.max(v.abs())) + c0.abs() + 1.0;
            let (mut lo_c, mut hi_c) = (c0 - 10.0 * scale, c0 + 10.0 * scale);
            let phi = 0.5 * (5f64.sqrt() - 1.0);
            let (mut c1, mut c2) = (hi_c - phi * (hi_c - lo_c), lo_c + phi * (hi_c - lo_c));
            let (mut f1, mut f2) = (sup(c1), sup(c2));
            for _ in 0..200 {
                if f1 <= f2 {
                    hi_c = c2;
                    c2 = c1;
                    f2 = f1;
                    c1 = hi_c - phi * (hi_c - lo_c);
                    f1 = sup(c1);
                } else {
                    lo_c = c1;
                    c1 = c2;
                    f1 = f2;
                    c2 = lo_c + phi * (hi_c - lo_c);
                    f2 = sup(c2);
                }
            }
            f1.min(f2).min(sup(c0))
        }
    };
    Ok(Some((1.0 + 1.0 / alpha) * value))
}

/// Evaluate the gap and its bound at each `(x, t)`.
///
/// Point `i` draws from substream `i` of `cfg.rng`. L2 uses the closed form for linear rewards.
pub fn verify_bound(
    prior: &GaussianMixture,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    points: &[(Vec<f64>, f64)],
    cfg: &JensenConfig,
) -> Result<Vec<GapReport>> {
    let mut out = Vec::with_capacity(points.len());
    for (i, (x, t)) in points.iter().enumerate() {
        positive_time(*t)?;
        let rng = cfg.rng.substream(i as u64);
        let delta = gap_delta(prior, reward, alpha, schedule, x, *t, &cfg.mc)?;
        let delta_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let l1 = estimate_l1(prior, reward, alpha, schedule, x, *t, cfg.draws, rng.labelled("l1"), &cfg.mc)?;
        let l2 = match reward {
            RewardSpec::Linear { .. } => Estimate::exact(l2_closed_form(prior, reward, alpha, schedule, x, *t)?),
            _ => estimate_l2(prior, reward, alpha, schedule, x, *t, cfg.draws, rng.labelled("l2"))?,
        };
        let l3 = estimate_l3(prior, reward, alpha, schedule, x, *t, cfg.r_grid, cfg.shift)?;
        let bound = l3.map(|l3| l1.value * l2.value + l3);
        let k = cfg.slack_stderr;
        let slack_bound = l3.map(|l3| (l1.value + k * l1.stderr) * (l2.value + k * l2.stderr) + l3);
        let satisfied = slack_bound.map(|b| delta_norm <= b + 1e-9);
        out.push(GapReport { t: *t, x: x.clone(), delta, delta_norm, l1, l2, l3, bound, slack_bound, satisfied });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;

    fn bimodal() -> GaussianMixture {
        GaussianMixture::univariate(vec![0.5, 0.5], vec![-2.0, 2.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn gap_vanishes_for_gaussian_prior() {
        let s = NoiseSchedule::default();
        let p = GaussianMixture::standard_normal(1).unwrap();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        for &t in &[0.1, 0.5, 0.9] {
            for x in [-2.0, 0.0, 1.0] {
                let d = gap_delta(&p, &r, 1.0, &s, &[x], t, &McConfig::default()).unwrap();
                assert!(d[0].abs() < 1e-10);
                let l3 =
                    estimate_l3(&p, &r, 1.0, &s, &[x], t, RGrid::default(), ShiftReference::Fitted).unwrap().unwrap();
                assert!(l3 < 1e-8, "{l3}");
            }
        }
    }

    #[test]
    fn gap_matches_quadrature_oracle() {
        let s = NoiseSchedule::default();
        let p = bimodal();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let t = 0.25;
        let ab = s.alpha_bar(t).unwrap();
        let lik = |x: f64, y: f64| (-(x - ab.sqrt() * y).powi(2) / (2.0 * (1.0 - ab))).exp();
        let log_mgf = |x: f64| {
            integrate(|y| p.density(&[y]) * lik(x, y) * y.exp(), -30.0, 30.0, 1e-14).ln()
                - integrate(|y| p.density(&[y]) * lik(x, y), -30.0, 30.0, 1e-14).ln()
        };
        let mean = |x: f64| {
            integrate(|y| p.density(&[y]) * lik(x, y) * y, -30.0, 30.0, 1e-14)
                / integrate(|y| p.density(&[y]) * lik(x, y), -30.0, 30.0, 1e-14)
        };
        for x in [-1.5, 0.0, 0.7] {
            let h = 1e-4;
            let u = (log_mgf(x + h) - log_mgf(x - h)) / (2.0 * h);
            let ub = (mean(x + h) - mean(x - h)) / (2.0 * h);
            let d = gap_delta(&p, &r, 1.0, &s, &[x], t, &McConfig::default()).unwrap()[0];
            assert!((d - (u - ub)).abs() < 1e-6, "{d} vs {}", u - ub);
        }
    }

    #[test]
    fn l2_monte_carlo_matches_closed_form() {
        let s = NoiseSchedule::default();
        let p = bimodal();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let exact = l2_closed_form(&p, &r, 1.0, &s, &[0.5], 0.25).unwrap();
        let mc = estimate_l2(&p, &r, 1.0, &s, &[0.5], 0.25, 200_000, RandomSource::new(9)).unwrap();
        assert!((mc.value - exact).abs() < 4.0 * mc.stderr + 1e-3, "{mc:?} vs {exact}");
        assert!(matches!(
            estimate_l2(&p, &r, 1.0, &s, &[0.5], 0.25, 8, RandomSource::new(9)),
            Err(Error::InsufficientDraws { .. })
        ));
    }

    #[test]
    fn l1_matches_quadrature_oracle() {
        let s = NoiseSchedule::default();
        let p = bimodal();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let (t, x) = (0.25, 0.3);
        let map = PosteriorMap::new(&p, &s, t).unwrap();
        let pt = map.at(&[x]).unwrap();
        let ub = crate::analytic::control_approx(&p, &r, 1.0, &s, &[x], t, &McConfig::default()).unwrap()[0];
        let oracle: f64 = (0..2).map(|k| pt.resp[k] * (map.jacobian(k)[(0, 0)] - ub).powi(2)).sum::<f64>().sqrt();
        let est = estimate_l1(&p, &r, 1.0, &s, &[x], t, 50_000, RandomSource::new(1), &McConfig::default()).unwrap();
        assert!((est.value - oracle).abs() < 4.0 * est.stderr + 1e-3, "{est:?} vs {oracle}");
    }

    #[test]
    fn bound_holds_on_bimodal_prior() {
        let s = NoiseSchedule::default();
        let p = bimodal();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let pts: Vec<(Vec<f64>, f64)> =
            [0.05, 0.25, 0.75].iter().flat_map(|&t| [-3.0, 0.0, 1.5].iter().map(move |&x| (vec![x], t))).collect();
        let cfg = JensenConfig { draws: 5000, ..Default::default() };
        for rep in verify_bound(&p, &r, 1.0, &s, &pts, &cfg).unwrap() {
            assert_eq!(rep.satisfied, Some(true), "{rep:?}");
            assert!(rep.l1.value.is_finite() && rep.l2.value.is_finite());
        }
    }

    #[test]
    fn l3_needs_enough_coverage_and_linear_1d() {
        let s = NoiseSchedule::default();
        let p = bimodal();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let narrow = RGrid::Explicit { lo: -0.1, hi: 0.1, points: 101 };
        assert!(matches!(
            estimate_l3(&p, &r, 1.0, &s, &[0.0], 0.5, narrow, ShiftReference::Fitted),
            Err(Error::InsufficientCoverage { .. })
        ));
        let q = RewardSpec::quadratic(nalgebra::DMatrix::from_element(1, 1, -0.1), vec![1.0], 0.0).unwrap();
        assert_eq!(estimate_l3(&p, &q, 1.0, &s, &[0.0], 0.5, RGrid::default(), ShiftReference::Fitted).unwrap(), None);
        let fitted =
            estimate_l3(&p, &r, 1.0, &s, &[0.5], 0.25, RGrid::default(), ShiftReference::Fitted).unwrap().unwrap();
        let unit = estimate_l3(&p, &r, 1.0, &s, &[0.5], 0.25, RGrid::default(), ShiftReference::Unit).unwrap().unwrap();
        assert!(fitted <= unit + 1e-12);
    }
}
