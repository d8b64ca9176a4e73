//! Distribution distances, KL estimators, objectives and Pareto utilities.

use kiddo::{KdTree, SquaredEuclidean};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::analytic::GaussianMixture;
use crate::drift::DriftModel;
use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_2d};
use crate::rewards::{check_alpha, RewardSpec};
use crate::rng::RandomSource;
use crate::sde::{check_grid, NoiseSchedule, SampleBatch, TimeGrid, Trajectories};

/// A point estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// Sample mean and its standard error.
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("samples"));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Ok(Self { value: mean, stderr: (var / n).sqrt() })
    }
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain { what: "sample", value: *bad, domain: "finite reals" });
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Exact W1 between two empirical laws on the line, via their quantile functions.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (n, m) = (a.len(), b.len());
    if n == m {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64);
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let (ea, eb) = ((i + 1) * m, (j + 1) * n);
        let next = ea.min(eb) as f64 / (n * m) as f64;
        total += (next - prev) * (a[i] - b[j]).abs();
        prev = next;
        if ea <= eb {
            i += 1;
        }
        if eb <= ea {
            j += 1;
        }
    }
    Ok(total)
}

/// Result of a two-sample Kolmogorov–Smirnov test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample KS test with the asymptotic Kolmogorov p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda) })
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = sign * (-2.0 * jf * jf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// How to compute KL between two analytic mixtures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KlMethod {
    /// Adaptive Gauss–Legendre over a box of +-12 standard deviations (d <= 2).
    Quadrature {
        tol: f64,
    },
    MonteCarlo {
        draws: usize,
        rng: RandomSource,
    },
}

impl Default for KlMethod {
    fn default() -> Self {
        KlMethod::Quadrature { tol: 1e-10 }
    }
}

fn bounding_box(p: &GaussianMixture) -> (Vec<f64>, Vec<f64>) {
    let d = p.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (m, c) in p.means().iter().zip(p.covariances()) {
        for j in 0..d {
            let s = c[(j, j)].sqrt();
            lo[j] = lo[j].min(m[j] - 12.0 * s);
            hi[j] = hi[j].max(m[j] + 12.0 * s);
        }
    }
    (lo, hi)
}

/// `KL(p || q)` for analytic mixtures.
pub fn kl_estimate(p: &GaussianMixture, q: &GaussianMixture, method: KlMethod) -> Result<Estimate> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    match method {
        KlMethod::Quadrature { tol } => {
            let (lo, hi) = bounding_box(p);
            let f = |x: &[f64]| {
                let lp = p.log_density(x);
                if lp == f64::NEG_INFINITY {
                    0.0
                } else {
                    lp.exp() * (lp - q.log_density(x))
                }
            };
            let v = match p.dim() {
                1 => integrate(|x| f(&[x]), lo[0], hi[0], tol),
                2 => integrate_2d(|x, y| f(&[x, y]), [lo[0], lo[1]], [hi[0], hi[1]], tol),
                d => return Err(Error::Unsupported(format!("quadrature KL needs d <= 2, got {d}"))),
            };
            Ok(Estimate::exact(v))
        }
        KlMethod::MonteCarlo { draws, rng } => {
            if draws < 2 {
                return Err(Error::InsufficientDraws { got: draws, min: 2 });
            }
            let xs = p.sample(draws, rng)?;
            let terms: Vec<f64> = xs.rows().map(|x| p.log_density(x) - q.log_density(x)).collect();
            Estimate::from_samples(&terms)
        }
    }
}

fn digamma_int(n: usize) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if n < 64 {
        return -EULER + (1..n).map(|j| 1.0 / j as f64).sum::<f64>();
    }
    let x = n as f64;
    x.ln() - 0.5 / x - 1.0 / (12.0 * x * x) + 1.0 / (120.0 * x.powi(4)) - 1.0 / (252.0 * x.powi(6))
}

fn log_unit_ball_volume(d: usize) -> f64 {
    let mut v = if d.is_multiple_of(2) { 1.0f64 } else { 2.0 };
    let mut k = if d.is_multiple_of(2) { 2 } else { 3 };
    while k <= d {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v.ln()
}

fn knn_log_distances<const K: usize>(data: &[f64], k: usize) -> Vec<f64> {
    let pts: Vec<[f64; K]> = data
        .chunks_exact(K)
        .map(|c| {
            let mut a = [0.0; K];
            a.copy_from_slice(c);
            a
        })
        .collect();
    let mut tree: KdTree<f64, K> = KdTree::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        tree.add(p, i as u64);
    }
    pts.par_iter()
        .map(|p| {
            let nn = tree.nearest_n::<SquaredEuclidean>(p, k + 1);
            let d2 = nn.iter().map(|n| n.distance).fold(0.0, f64::max);
            0.5 * d2.max(1e-300).ln()
        })
        .collect()
}

fn knn_1d_log_distances(data: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
    let xs: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
    let n = xs.len();
    let mut out = vec![0.0; n];
    for (pos, &orig) in idx.iter().enumerate() {
        let (mut l, mut r) = (pos, pos);
        let mut dist = 0.0;
        for _ in 0..k {
            let dl = if l > 0 { xs[pos] - xs[l - 1] } else { f64::INFINITY };
            let dr = if r + 1 < n { xs[r + 1] - xs[pos] } else { f64::INFINITY };
            if dl <= dr {
                l -= 1;
                dist = dl;
            } else {
                r += 1;
                dist = dr;
            }
        }
        out[orig] = dist.max(1e-300).ln();
    }
    out
}

/// `KL(model || reference)` from model samples: Kozachenko–Leonenko entropy
/// with `k` neighbours plus the exact cross-entropy under `reference`.
///
/// The standard error treats the per-sample terms as independent.
pub fn kl_knn(samples: &SampleBatch, reference: &GaussianMixture, k: usize) -> Result<Estimate> {
    let d = samples.dim();
    if d != reference.dim() {
        return Err(Error::DimensionMismatch { expected: reference.dim(), got: d });
    }
    let n = samples.len();
    if k == 0 || n <= k {
        return Err(Error::InsufficientDraws { got: n, min: k + 1 });
    }
    let data = samples.as_slice();
    let logs = match d {
        1 => knn_1d_log_distances(data, k),
        2 => knn_log_distances::<2>(data, k),
        3 => knn_log_distances::<3>(data, k),
        4 => knn_log_distances::<4>(data, k),
        5 => knn_log_distances::<5>(data, k),
        6 => knn_log_distances::<6>(data, k),
        7 => knn_log_distances::<7>(data, k),
        8 => knn_log_distances::<8>(data, k),
        _ => return Err(Error::Unsupported(format!("kNN KL supports d <= 8, got {d}"))),
    };
    let c = digamma_int(n) - digamma_int(k) + log_unit_ball_volume(d);
    let terms: Vec<f64> =
        samples.rows().zip(&logs).map(|(x, le)| -(c + d as f64 * le) - reference.log_density(x)).collect();
    Estimate::from_samples(&terms)
}

/// Mean reward over samples.
pub fn expected_reward(samples: &SampleBatch, reward: &RewardSpec) -> Result<Estimate> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    Estimate::from_samples(&reward.evaluate_batch(samples)?)
}

/// `E[r] - alpha KL`, with the two standard errors combined in quadrature.
pub fn alignment_objective(samples: &SampleBatch, reward: &RewardSpec, alpha: f64, kl: Estimate) -> Result<Estimate> {
    check_alpha(alpha)?;
    let r = expected_reward(samples, reward)?;
    Ok(Estimate { value: r.value - alpha * kl.value, stderr: (r.stderr.powi(2) + (alpha * kl.stderr).powi(2)).sqrt() })
}

/// A method's operating point for one preference vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub method: String,
    pub weights: Vec<f64>,
    pub rewards: Vec<Estimate>,
    pub kl: Estimate,
    pub objective: Estimate,
}

impl ParetoPoint {
    /// Weakly better in every reward and strictly better in one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        let pairs = self.rewards.iter().zip(&other.rewards);
        pairs.clone().all(|(a, b)| a.value >= b.value) && pairs.clone().any(|(a, b)| a.value > b.value)
    }
}

/// Points not dominated in reward space, in input order.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    points.iter().filter(|p| !points.iter().any(|q| q.dominates(p))).cloned().collect()
}

/// Path-space KL between the reverse processes driven by `model` and `pretrained`,
/// `E sum_k |f_model - f_pre|^2 dt / (2 beta)`, along trajectories of `model`.
pub fn stepwise_kl(
    model: &DriftModel,
    pretrained: &DriftModel,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    rng: RandomSource,
    batch_size: usize,
) -> Result<Estimate> {
    check_grid(schedule, grid)?;
    if model.dim() != pretrained.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: pretrained.dim() });
    }
    let dim = model.dim();
    let traj = Trajectories::from_prior(batch_size, dim, rng)?;
    let (mut states, mut rngs) = traj.into_parts();
    let mut acc = vec![0.0; batch_size];
    let knots = grid.knots();
    for k in (1..knots.len()).rev() {
        let t = knots[k];
        let dt = t - knots[k - 1];
        let beta = schedule.beta(t);
        let sd = (beta * dt).sqrt();
        let (fm, fp) = (model.slice(t)?, pretrained.slice(t)?);
        states.par_chunks_exact_mut(dim).zip(rngs.par_iter_mut()).zip(acc.par_iter_mut()).try_for_each(
            |((x, g), a)| {
                let mut f: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, dim);
                let mut f0: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, dim);
                fm.eval_into(x, &mut f);
                fp.eval_into(x, &mut f0);
                let diff2: f64 = f.iter().zip(f0.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                *a += diff2 * dt / (2.0 * beta);
                for j in 0..dim {
                    let z: f64 = g.sample(StandardNormal);
                    x[j] += -f[j] * dt + sd * z;
                }
                if x.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::NonFiniteDrift { t, x: x.to_vec() })
                }
            },
        )?;
    }
    Estimate::from_samples(&acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn w1_of_identical_samples_is_zero() {
        let a = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(wasserstein1_1d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn w1_of_shift_equals_shift() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.7).collect();
        assert!((wasserstein1_1d(&a, &b).unwrap() - 0.7).abs() < 1e-12);
        let c: Vec<f64> = a.iter().chain(a.iter()).map(|x| x + 0.7).collect();
        assert!((wasserstein1_1d(&a, &c).unwrap() - 0.7).abs() < 1e-12);
        assert!(wasserstein1_1d(&[], &a).is_err());
    }

    #[test]
    fn w1_unequal_sizes_brute_force() {
        let a = [0.0, 1.0, 5.0];
        let b = [0.5, 2.0];
        let grid = 600_000;
        let q = |v: &[f64], u: f64| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            s[((u * s.len() as f64) as usize).min(s.len() - 1)]
        };
        let brute: f64 = (0..grid)
            .map(|i| {
                let u = (i as f64 + 0.5) / grid as f64;
                (q(&a, u) - q(&b, u)).abs()
            })
            .sum::<f64>()
            / grid as f64;
        assert!((wasserstein1_1d(&a, &b).unwrap() - brute).abs() < 1e-4);
    }

    #[test]
    fn kl_of_gaussians_matches_closed_form() {
        let p = GaussianMixture::univariate(vec![1.0], vec![0.3], vec![1.2]).unwrap();
        let q = GaussianMixture::univariate(vec![1.0], vec![-0.5], vec![0.8]).unwrap();
        let closed = (0.8f64 / 1.2).ln() + (1.2f64.powi(2) + 0.8f64.powi(2)) / (2.0 * 0.64) - 0.5;
        let quad = kl_estimate(&p, &q, KlMethod::default()).unwrap();
        assert!((quad.value - closed).abs() < 1e-8);
        let mc = kl_estimate(&p, &q, KlMethod::MonteCarlo { draws: 200_000, rng: RandomSource::new(1) }).unwrap();
        assert!((mc.value - closed).abs() < 4.0 * mc.stderr);
        let p2 = GaussianMixture::gaussian(DVector::from_vec(vec![0.5, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let q2 = GaussianMixture::standard_normal(2).unwrap();
        assert!((kl_estimate(&p2, &q2, KlMethod::default()).unwrap().value - 0.125).abs() < 1e-7);
        assert!(kl_estimate(&q2, &q2, KlMethod::default()).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn knn_kl_is_close_to_truth() {
        let q = GaussianMixture::standard_normal(1).unwrap();
        let p = GaussianMixture::univariate(vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let est = kl_knn(&p.sample(40_000, RandomSource::new(2)).unwrap(), &q, 5).unwrap();
        assert!((est.value - 0.5).abs() < 0.03, "{est:?}");
        let q2 = GaussianMixture::standard_normal(2).unwrap();
        let p2 = GaussianMixture::gaussian(DVector::from_vec(vec![1.0, -1.0]), DMatrix::identity(2, 2)).unwrap();
        let est2 = kl_knn(&p2.sample(40_000, RandomSource::new(3)).unwrap(), &q2, 5).unwrap();
        assert!((est2.value - 1.0).abs() < 0.04, "{est2:?}");
    }

    #[test]
    fn ks_detects_shift_and_accepts_same_law() {
        let q = GaussianMixture::standard_normal(1).unwrap();
        let a = q.sample(2000, RandomSource::new(4)).unwrap().column(0);
        let b = q.sample(2000, RandomSource::new(5)).unwrap().column(0);
        let c: Vec<f64> = b.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
    }

    #[test]
    fn pareto_front_filters_dominated() {
        let pt = |m: &str, r: [f64; 2]| ParetoPoint {
            method: m.into(),
            weights: vec![0.5, 0.5],
            rewards: r.iter().map(|v| Estimate::exact(*v)).collect(),
            kl: Estimate::exact(0.0),
            objective: Estimate::exact(0.0),
        };
        let pts = vec![pt("a", [1.0, 1.0]), pt("b", [2.0, 0.5]), pt("c", [0.5, 0.5])];
        let front = pareto_front(&pts);
        assert_eq!(front.iter().map(|p| p.method.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn pareto_examples() {
        let pt = |r: [f64; 2]| ParetoPoint {
            method: format!("{r:?}"),
            weights: vec![0.5, 0.5],
            rewards: r.iter().map(|v| Estimate::exact(*v)).collect(),
            kl: Estimate::exact(0.0),
            objective: Estimate::exact(0.0),
        };
        assert_eq!(pareto_front(&[pt([0.3, 0.3])]).len(), 1);
        assert_eq!(pareto_front(&[pt([1.0, 0.0]), pt([0.0, 1.0]), pt([0.4, 0.4])]).len(), 3);
        assert_eq!(pareto_front(&[pt([1.0, 1.0]), pt([0.5, 0.5])]), vec![pt([1.0, 1.0])]);
    }

    #[test]
    fn expected_reward_examples() {
        let n01 = GaussianMixture::standard_normal(1).unwrap();
        let s = n01.sample(20_000, RandomSource::new(1)).unwrap();
        let c = expected_reward(&s, &RewardSpec::linear(vec![0.0], 2.5).unwrap()).unwrap();
        assert_eq!((c.value, c.stderr), (2.5, 0.0));
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let tilted = crate::analytic::tilt(&n01, &r, 1.0).unwrap().mixture;
        let m = expected_reward(&tilted.sample(20_000, RandomSource::new(2)).unwrap(), &r).unwrap();
        assert!((m.value - 1.0).abs() < 3.0 * m.stderr, "{m:?}");
        let zero = RewardSpec::linear(vec![0.0], 0.0).unwrap();
        let o = alignment_objective(&s, &zero, 1.0, kl_estimate(&n01, &n01, KlMethod::default()).unwrap()).unwrap();
        assert!(o.value.abs() < 1e-8);
        assert!(matches!(alignment_objective(&s, &r, 0.0, Estimate::exact(0.0)), Err(Error::Domain { .. })));
    }

    #[test]
    fn tilted_law_maximises_objective() {
        use crate::analytic::{exact_finetuned_drift, pretrained_drift};
        use crate::blend::db_kla;
        use crate::sde::euler_maruyama_reverse;
        let sch = NoiseSchedule::default();
        let grid = TimeGrid::uniform(400, 1.0).unwrap();
        let prior = GaussianMixture::standard_normal(1).unwrap();
        let r = RewardSpec::linear(vec![1.0], 0.0).unwrap();
        let pre = pretrained_drift(&prior, sch);
        let ft = exact_finetuned_drift(&prior, &r, 1.0, sch).unwrap();
        let models = [
            ("pre", pre.clone()),
            ("tilted", ft.clone()),
            ("kla0.5", db_kla(&pre, &ft, 0.5).unwrap()),
            ("kla2", db_kla(&pre, &ft, 2.0).unwrap()),
        ];
        let objs: Vec<(&str, Estimate)> = models
            .iter()
            .enumerate()
            .map(|(i, (name, m))| {
                let s = euler_maruyama_reverse(m, &sch, &grid, RandomSource::new(20 + i as u64), 20_000).unwrap();
                let kl = kl_knn(&s, &prior, 5).unwrap();
                (*name, alignment_objective(&s, &r, 1.0, kl).unwrap())
            })
            .collect();
        let best = objs[1].1;
        assert!((best.value - 0.5).abs() < 0.05, "{best:?}");
        for (name, o) in &objs {
            let se = (o.stderr.powi(2) + best.stderr.powi(2)).sqrt();
            assert!(best.value >= o.value - 3.0 * se, "{name}: {o:?} vs tilted {best:?}");
        }
    }

    proptest! {
        #[test]
        fn w1_is_a_metric(a in prop::collection::vec(-5.0f64..5.0, 30), b in prop::collection::vec(-5.0f64..5.0, 30), c in prop::collection::vec(-5.0f64..5.0, 30)) {
            let ab = wasserstein1_1d(&a, &b).unwrap();
            let ba = wasserstein1_1d(&b, &a).unwrap();
            let ac = wasserstein1_1d(&a, &c).unwrap();
            let cb = wasserstein1_1d(&c, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= ac + cb + 1e-6);
        }
    }
}
