//! Denoising score matching with fixed feature families, solved per time bin in closed form.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::analytic::GaussianMixture;
use crate::drift::{drift_from_score, DriftModel, Provenance, ScoreField, ScoreSlice};
use crate::error::{Error, Result};
use crate::rewards::PreferenceWeights;
use crate::rng::RandomSource;
use crate::sde::{NoiseSchedule, SampleBatch};

/// Feature map used by a [`ScoreModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureFamily {
    /// All monomials of total degree at most `degree`.
    Polynomial { degree: usize },
    /// Constant and linear terms plus Gaussian bumps on a grid of `centers_per_dim^d`
    /// centres placed from each bin's training data.
    Rbf { centers_per_dim: usize },
}

/// DSM loss weighting `lambda(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    #[default]
    OneMinusAlphaBar,
}

/// Training settings. Ridge regression replaces a learning rate: the fit is solved exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub family: FeatureFamily,
    /// Data rows used (the first `num_samples`, or all if fewer).
    pub num_samples: usize,
    /// Noise draws per data row per bin, taken as antithetic pairs `(eps, -eps)`.
    pub epochs: usize,
    /// Rows accumulated into the normal equations at a time.
    pub batch_size: usize,
    /// Ridge penalty relative to the mean diagonal of the Gram matrix.
    pub ridge: f64,
    pub time_bins: usize,
    pub weighting: Weighting,
    /// Smallest training time, keeps targets finite.
    pub t_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: FeatureFamily::Rbf { centers_per_dim: 12 },
            num_samples: 50_000,
            epochs: 4,
            batch_size: 4096,
            ridge: 1e-8,
            time_bins: 32,
            weighting: Weighting::OneMinusAlphaBar,
            t_min: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_samples", self.num_samples),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("time_bins", self.time_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        match self.family {
            FeatureFamily::Rbf { centers_per_dim: 0 } => {
                return Err(Error::Config("centers_per_dim must be positive".into()))
            }
            FeatureFamily::Polynomial { .. } | FeatureFamily::Rbf { .. } => {}
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be finite and non-negative".into()));
        }
        if !(self.t_min.is_finite() && self.t_min > 0.0) {
            return Err(Error::Config("t_min must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters of one time bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinParams {
    /// Feature-by-dimension coefficient matrix, row-major.
    pub theta: Vec<f64>,
    /// RBF centres, row-major (empty for polynomials).
    #[serde(default)]
    pub centers: Vec<f64>,
    #[serde(default)]
    pub bandwidth: f64,
}

/// A piecewise-constant-in-time parametric score `s(x, t) = theta_b' phi(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub family: FeatureFamily,
    pub dim: usize,
    pub horizon: f64,
    pub bins: Vec<BinParams>,
}

/// Summary of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Weighted DSM loss of the fitted model on its training draws.
    pub objective: f64,
    pub warnings: Vec<String>,
}

fn monomials(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0; dim];
        collect(dim, 0, total, &mut cur, &mut out);
    }
    out
}

fn collect(dim: usize, pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pos == dim - 1 {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        collect(dim, pos + 1, left - e, cur, out);
    }
}

impl ScoreModel {
    /// A model whose every coefficient is zero.
    pub fn zeros(family: FeatureFamily, dim: usize, bins: usize, horizon: f64) -> Result<Self> {
        if dim == 0 || bins == 0 {
            return Err(Error::Config("dimension and bin count must be positive".into()));
        }
        let f = Self::feature_count(family, dim);
        let mut centers = Vec::new();
        let mut bandwidth = 0.0;
        if let FeatureFamily::Rbf { centers_per_dim } = family {
            centers = grid_centers(&vec![-1.0; dim], &vec![1.0; dim], centers_per_dim);
            bandwidth = 1.0;
        }
        let bin = BinParams { theta: vec![0.0; f * dim], centers, bandwidth };
        Ok(Self { family, dim, horizon, bins: vec![bin; bins] })
    }

    pub fn feature_count(family: FeatureFamily, dim: usize) -> usize {
        match family {
            FeatureFamily::Polynomial { degree } => monomials(dim, degree).len(),
            FeatureFamily::Rbf { centers_per_dim } => 1 + dim + centers_per_dim.pow(dim as u32),
        }
    }

    pub fn num_features(&self) -> usize {
        Self::feature_count(self.family, self.dim)
    }

    pub fn bin_index(&self, t: f64) -> usize {
        let b = self.bins.len();
        ((t / self.horizon * b as f64).floor().max(0.0) as usize).min(b - 1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score models always serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid score model: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.num_features();
        if self.bins.is_empty() || self.dim == 0 {
            return Err(Error::ArchitectureMismatch("empty model".into()));
        }
        for (i, b) in self.bins.iter().enumerate() {
            if b.theta.len() != f * self.dim {
                return Err(Error::ArchitectureMismatch(format!(
                    "bin {i} has {} coefficients, expected {}",
                    b.theta.len(),
                    f * self.dim
                )));
            }
            if let FeatureFamily::Rbf { centers_per_dim } = self.family {
                if b.centers.len() != centers_per_dim.pow(self.dim as u32) * self.dim || !(b.bandwidth > 0.0) {
                    return Err(Error::ArchitectureMismatch(format!("bin {i} has malformed centres")));
                }
            }
            if b.theta.iter().chain(&b.centers).any(|v| !v.is_finite()) {
                return Err(Error::ArchitectureMismatch(format!("bin {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Drift induced by this score.
    pub fn drift(self: &Arc<Self>, schedule: NoiseSchedule, label: impl Into<String>) -> DriftModel {
        drift_from_score(self.clone(), schedule, Provenance::Learned { label: label.into() })
    }
}

fn grid_centers(lo: &[f64], hi: &[f64], per_dim: usize) -> Vec<f64> {
    let d = lo.len();
    let total = per_dim.pow(d as u32);
    let mut out = Vec::with_capacity(total * d);
    for idx in 0..total {
        let mut rem = idx;
        for j in 0..d {
            let k = rem % per_dim;
            rem /= per_dim;
            let c = if per_dim == 1 {
                0.5 * (lo[j] + hi[j])
            } else {
                lo[j] + (hi[j] - lo[j]) * k as f64 / (per_dim - 1) as f64
            };
            out.push(c);
        }
    }
    out
}

struct Features<'a> {
    family: FeatureFamily,
    dim: usize,
    exps: Vec<Vec<usize>>,
    bin: &'a BinParams,
}

impl<'a> Features<'a> {
    fn new(family: FeatureFamily, dim: usize, bin: &'a BinParams) -> Self {
        let exps = match family {
            FeatureFamily::Polynomial { degree } => monomials(dim, degree),
            FeatureFamily::Rbf { .. } => Vec::new(),
        };
        Self { family, dim, exps, bin }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self.family {
            FeatureFamily::Polynomial { .. } => {
                for (o, e) in out.iter_mut().zip(&self.exps) {
                    *o = e.iter().zip(x).map(|(p, v)| v.powi(*p as i32)).product();
                }
            }
            FeatureFamily::Rbf { .. } => {
                out[0] = 1.0;
                out[1..=self.dim].copy_from_slice(x);
                let inv = -0.5 / (self.bin.bandwidth * self.bin.bandwidth);
                for (o, c) in out[self.dim + 1..].iter_mut().zip(self.bin.centers.chunks_exact(self.dim)) {
                    let d2: f64 = c.iter().zip(x).map(|(c, v)| (v - c).powi(2)).sum();
                    *o = (inv * d2).exp();
                }
            }
        }
    }
}

struct ModelSlice<'a> {
    features: Features<'a>,
    nf: usize,
}

impl ScoreSlice for ModelSlice<'_> {
    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.features.dim;
        let mut phi: SmallVec<[f64; 256]> = SmallVec::from_elem(0.0, self.nf);
        self.features.eval(x, &mut phi);
        out.iter_mut().for_each(|o| *o = 0.0);
        let theta = &self.features.bin.theta;
        for (f, p) in phi.iter().enumerate() {
            let row = &theta[f * d..(f + 1) * d];
            for j in 0..d {
                out[j] += p * row[j];
            }
        }
    }
}

impl ScoreField for ScoreModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn score_slice(&self, t: f64) -> Result<Box<dyn ScoreSlice + '_>> {
        if !(t.is_finite() && t >= -1e-12 && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(Error::Domain { what: "t", value: t, domain: "[0, T]" });
        }
        let bin = &self.bins[self.bin_index(t)];
        Ok(Box::new(ModelSlice { features: Features::new(self.family, self.dim, bin), nf: self.num_features() }))
    }
}

/// Fit a score model to samples of `p_0` by weighted ridge regression of the
/// denoising target `-(x_t - sqrt(alpha_bar) x_0) / (1 - alpha_bar)` in each time bin.
///
/// Bin `b` draws its noise from substream `b` of `rng`, so bins are independent of each other.
pub fn dsm_train(
    data: &SampleBatch,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: RandomSource,
) -> Result<(ScoreModel, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let d = data.dim();
    let n = data.len().min(config.num_samples);
    let draws = n * config.epochs;
    let horizon = schedule.horizon();
    let bins = config.time_bins;
    let nf = ScoreModel::feature_count(config.family, d);
    let mut warnings = Vec::new();
    let mut params = Vec::with_capacity(bins);
    let (mut loss, mut wsum) = (0.0, 0.0);

    for b in 0..bins {
        let lo = (b as f64 / bins as f64 * horizon).max(config.t_min);
        let hi = (b + 1) as f64 / bins as f64 * horizon;
        let mut g = rng.substream(b as u64).rng();
        let mut xs = Vec::with_capacity(draws * d);
        let mut ys = Vec::with_capacity(draws * d);
        let mut ws = Vec::with_capacity(draws);
        let mut eps = vec![0.0; d];
        let (mut a, mut s, mut w) = (0.0, 0.0, 0.0);
        for i in 0..draws {
            let x0 = data.row((i / 2) % n);
            if i % 2 == 0 {
                let t = lo + (hi - lo) * g.random::<f64>();
                let ab = schedule.ab(t);
                (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
                w = match config.weighting {
                    Weighting::Uniform => 1.0,
                    Weighting::OneMinusAlphaBar => 1.0 - ab,
                };
                eps.iter_mut().for_each(|e| *e = g.sample(StandardNormal));
            } else {
                eps.iter_mut().for_each(|e| *e = -*e);
            }
            for (&v, &e) in x0.iter().zip(&eps) {
                xs.push(a * v + s * e);
                ys.push(-e / s);
            }
            ws.push(w);
        }

        let mut bin = BinParams { theta: vec![0.0; nf * d], centers: Vec::new(), bandwidth: 0.0 };
        if let FeatureFamily::Rbf { centers_per_dim } = config.family {
            let batch = SampleBatch::new(d, hi, xs.clone())?;
            let (mean, var) = (batch.mean(), batch.variance());
            let sd: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
            let lo_c: Vec<f64> = mean.iter().zip(&sd).map(|(m, s)| m - 2.5 * s).collect();
            let hi_c: Vec<f64> = mean.iter().zip(&sd).map(|(m, s)| m + 2.5 * s).collect();
            bin.centers = grid_centers(&lo_c, &hi_c, centers_per_dim);
            let spacing = if centers_per_dim > 1 { 5.0 / (centers_per_dim - 1) as f64 } else { 5.0 };
            bin.bandwidth = spacing * sd.iter().sum::<f64>() / d as f64;
        }

        let mut gram = DMatrix::<f64>::zeros(nf, nf);
        let mut rhs = DMatrix::<f64>::zeros(nf, d);
        {
            let feats = Features::new(config.family, d, &bin);
            let mut phi = DMatrix::<f64>::zeros(nf, config.batch_size);
            let mut yb = DMatrix::<f64>::zeros(config.batch_size, d);
            let mut start = 0;
            while start < draws {
                let end = (start + config.batch_size).min(draws);
                let m = end - start;
                let mut col = vec![0.0; nf];
                for (c, i) in (start..end).enumerate() {
                    feats.eval(&xs[i * d..(i + 1) * d], &mut col);
                    let sw = ws[i].sqrt();
                    for f in 0..nf {
                        phi[(f, c)] = col[f] * sw;
                    }
                    for j in 0..d {
                        yb[(c, j)] = ys[i * d + j] * sw;
                    }
                }
                let pv = phi.columns(0, m);
                gram += pv * pv.transpose();
                rhs += pv * yb.rows(0, m);
                start = end;
            }
        }
        let scale = (gram.trace() / nf as f64).max(1e-300);
        let mut ridge = config.ridge * scale;
        let mut solved = None;
        for attempt in 0..12 {
            let mut a = gram.clone();
            for i in 0..nf {
                a[(i, i)] += ridge;
            }
            if let Some(ch) = a.cholesky() {
                let sol = ch.solve(&rhs);
                if sol.iter().all(|v| v.is_finite()) {
                    solved = Some(sol);
                    break;
                }
            }
            let floor = (1e-12 * scale).max(ridge * 10.0);
            if attempt == 0 {
                warnings.push(format!("bin {b}: normal equations singular, ridge floor applied"));
            }
            ridge = floor;
        }
        let theta = solved.ok_or_else(|| Error::Numerical(format!("bin {b}: ridge solve failed")))?;
        for f in 0..nf {
            for j in 0..d {
                bin.theta[f * d + j] = theta[(f, j)];
            }
        }

        let feats = Features::new(config.family, d, &bin);
        let mut phi = vec![0.0; nf];
        for i in 0..draws {
            feats.eval(&xs[i * d..(i + 1) * d], &mut phi);
            let mut r2 = 0.0;
            for j in 0..d {
                let pred: f64 = (0..nf).map(|f| phi[f] * bin.theta[f * d + j]).sum();
                r2 += (pred - ys[i * d + j]).powi(2);
            }
            loss += ws[i] * r2;
            wsum += ws[i];
        }
        params.push(bin);
    }
    let model = ScoreModel { family: config.family, dim: d, horizon, bins: params };
    model.validate()?;
    Ok((model, TrainReport { objective: loss / wsum, warnings }))
}

/// Evaluation grid for [`score_mse`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseGrid {
    pub times: Vec<f64>,
    pub points_per_dim: usize,
}

impl MseGrid {
    /// `count` times spread uniformly over `(0, T]` and a `points_per_dim` spatial grid.
    pub fn uniform(count: usize, horizon: f64, points_per_dim: usize) -> Self {
        Self { times: (1..=count).map(|i| horizon * (i as f64 - 0.5) / count as f64).collect(), points_per_dim }
    }
}

/// Mean squared score error, weighted by `p_t` on a grid covering +-6 standard deviations
/// of every marginal component, pooled over the grid's times.
pub fn score_mse(model: &ScoreModel, truth: &GaussianMixture, schedule: &NoiseSchedule, grid: &MseGrid) -> Result<f64> {
    if model.dim != truth.dim() {
        return Err(Error::DimensionMismatch { expected: truth.dim(), got: model.dim });
    }
    let d = model.dim;
    let n = grid.points_per_dim.max(2);
    if n.checked_pow(d as u32).is_none_or(|v| v > 4_000_000) {
        return Err(Error::Unsupported("score_mse grid too large for this dimension".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    let mut sm = vec![0.0; d];
    for &t in &grid.times {
        let marg = truth.marginal_at(schedule, t)?;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for (m, c) in marg.means().iter().zip(marg.covariances()) {
            for j in 0..d {
                let s = c[(j, j)].sqrt();
                lo[j] = lo[j].min(m[j] - 6.0 * s);
                hi[j] = hi[j].max(m[j] + 6.0 * s);
            }
        }
        let pts = grid_centers(&lo, &hi, n);
        let slice = model.score_slice(t)?;
        for x in pts.chunks_exact(d) {
            let p = marg.density(x);
            if p == 0.0 {
                continue;
            }
            slice.score_into(x, &mut sm);
            let st = marg.score(x);
            num += p * sm.iter().zip(&st).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            den += p;
        }
    }
    Ok(num / den)
}

/// Parameter-wise convex combination `sum_i w_i theta_i` (centres and bandwidths included).
pub fn average_params(models: &[ScoreModel], w: &PreferenceWeights) -> Result<ScoreModel> {
    let first = models.first().ok_or(Error::Empty("model list"))?;
    if models.len() != w.len() {
        return Err(Error::LengthMismatch(format!("{} models but {} weights", models.len(), w.len())));
    }
    for m in models {
        if m.family != first.family || m.dim != first.dim || m.bins.len() != first.bins.len() {
            return Err(Error::ArchitectureMismatch("models differ in feature family, dimension or bin count".into()));
        }
        if (m.horizon - first.horizon).abs() > 1e-12 {
            return Err(Error::ArchitectureMismatch("models differ in horizon".into()));
        }
        m.validate()?;
    }
    let ws = w.as_slice();
    let bins = (0..first.bins.len())
        .map(|b| {
            let mut theta = vec![0.0; first.bins[b].theta.len()];
            let mut centers = vec![0.0; first.bins[b].centers.len()];
            let mut bandwidth = 0.0;
            for (m, wi) in models.iter().zip(ws) {
                let p = &m.bins[b];
                theta.iter_mut().zip(&p.theta).for_each(|(a, v)| *a += wi * v);
                centers.iter_mut().zip(&p.centers).for_each(|(a, v)| *a += wi * v);
                bandwidth += wi * p.bandwidth;
            }
            BinParams { theta, centers, bandwidth }
        })
        .collect();
    Ok(ScoreModel { family: first.family, dim: first.dim, horizon: first.horizon, bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blend::db_mpa;

    fn poly1(slope: f64, bins: usize) -> ScoreModel {
        let mut m = ScoreModel::zeros(FeatureFamily::Polynomial { degree: 1 }, 1, bins, 1.0).unwrap();
        for b in &mut m.bins {
            b.theta = vec![0.0, slope];
        }
        m
    }

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(3, 1).len(), 4);
    }

    #[test]
    fn exact_model_has_zero_mse() {
        let s = NoiseSchedule::default();
        let truth = GaussianMixture::standard_normal(1).unwrap();
        let mse = score_mse(&poly1(-1.0, 8), &truth, &s, &MseGrid::uniform(10, 1.0, 201)).unwrap();
        assert!(mse < 1e-10);
        let zero = ScoreModel::zeros(FeatureFamily::Polynomial { degree: 1 }, 1, 8, 1.0).unwrap();
        let mse0 = score_mse(&zero, &truth, &s, &MseGrid::uniform(10, 1.0, 401)).unwrap();
        assert!((mse0 - 1.0).abs() < 1e-3, "{mse0}");
    }

    #[test]
    fn fits_standard_normal_slope() {
        let s = NoiseSchedule::default();
        let data = GaussianMixture::standard_normal(1).unwrap().sample(50_000, RandomSource::new(1)).unwrap();
        let cfg = TrainConfig { family: FeatureFamily::Polynomial { degree: 1 }, ..Default::default() };
        let (m, rep) = dsm_train(&data, &s, &cfg, RandomSource::new(2)).unwrap();
        for b in &m.bins {
            assert!((b.theta[1] + 1.0).abs() < 0.05, "slope {}", b.theta[1]);
        }
        assert!(rep.objective.is_finite());
        let empty = SampleBatch::new(1, 0.0, vec![]).unwrap();
        assert!(dsm_train(&empty, &s, &cfg, RandomSource::new(2)).is_err());
    }

    #[test]
    fn rbf_beats_linear_on_mixture() {
        let s = NoiseSchedule::default();
        let truth = GaussianMixture::univariate(vec![0.5, 0.5], vec![-2.0, 2.0], vec![0.5, 0.5]).unwrap();
        let data = truth.sample(20_000, RandomSource::new(3)).unwrap();
        let grid = MseGrid::uniform(16, 1.0, 201);
        let lin = TrainConfig { family: FeatureFamily::Polynomial { degree: 1 }, ..Default::default() };
        let rbf = TrainConfig::default();
        let (ml, _) = dsm_train(&data, &s, &lin, RandomSource::new(4)).unwrap();
        let (mr, _) = dsm_train(&data, &s, &rbf, RandomSource::new(4)).unwrap();
        let (el, er) = (score_mse(&ml, &truth, &s, &grid).unwrap(), score_mse(&mr, &truth, &s, &grid).unwrap());
        assert!(er < el, "rbf {er} vs linear {el}");
    }

    #[test]
    fn mse_shrinks_with_more_data() {
        let s = NoiseSchedule::default();
        let truth = GaussianMixture::univariate(vec![0.5, 0.5], vec![-1.5, 1.5], vec![0.7, 0.7]).unwrap();
        let grid = MseGrid::uniform(16, 1.0, 201);
        let cfg = |n| TrainConfig {
            family: FeatureFamily::Polynomial { degree: 3 },
            num_samples: n,
            epochs: 2,
            ..Default::default()
        };
        let mse = |n: usize| {
            let data = truth.sample(n, RandomSource::new(5)).unwrap();
            let (m, _) = dsm_train(&data, &s, &cfg(n), RandomSource::new(6)).unwrap();
            score_mse(&m, &truth, &s, &grid).unwrap()
        };
        let (small, large) = (mse(300), mse(3000));
        assert!(large < small, "{large} vs {small}");
    }

    #[test]
    fn fit_on_tilted_samples_reproduces_tilt() {
        use crate::analytic::tilt;
        use crate::metrics::wasserstein1_1d;
        use crate::rewards::RewardSpec;
        use crate::sde::{euler_maruyama_reverse, TimeGrid};
        let s = NoiseSchedule::default();
        let prior = GaussianMixture::univariate(vec![0.5, 0.5], vec![-2.0, 2.0], vec![1.0, 1.0]).unwrap();
        let oracle = tilt(&prior, &RewardSpec::linear(vec![1.0], 0.0).unwrap(), 1.0).unwrap().mixture;
        let data = oracle.sample(50_000, RandomSource::new(7)).unwrap();
        let (m, _) = dsm_train(&data, &s, &TrainConfig::default(), RandomSource::new(8)).unwrap();
        let drift = Arc::new(m).drift(s, "tilted");
        let grid = TimeGrid::uniform(500, 1.0).unwrap();
        let gen = euler_maruyama_reverse(&drift, &s, &grid, RandomSource::new(9), 20_000).unwrap();
        let reference = oracle.sample(20_000, RandomSource::new(10)).unwrap();
        let w1 = wasserstein1_1d(gen.as_slice(), reference.as_slice()).unwrap();
        assert!(w1 < 0.1, "W1 {w1}");
    }

    #[test]
    fn averaging_rules() {
        let a = poly1(-1.0, 4);
        let b = poly1(-3.0, 4);
        let one = average_params(&[a.clone(), b.clone()], &PreferenceWeights::one_hot(2, 0).unwrap()).unwrap();
        assert_eq!(one, a);
        let same = average_params(&[a.clone(), a.clone()], &PreferenceWeights::pair(0.3).unwrap()).unwrap();
        for (x, y) in same.bins.iter().flat_map(|b| &b.theta).zip(a.bins.iter().flat_map(|b| &b.theta)) {
            assert!((x - y).abs() < 1e-15);
        }
        let other = ScoreModel::zeros(FeatureFamily::Polynomial { degree: 2 }, 1, 4, 1.0).unwrap();
        assert!(matches!(
            average_params(&[a, other], &PreferenceWeights::pair(0.5).unwrap()),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn linear_family_average_equals_blend() {
        let s = NoiseSchedule::default();
        let a = Arc::new(poly1(-1.0, 4));
        let b = Arc::new(poly1(-2.5, 4));
        let w = PreferenceWeights::pair(0.3).unwrap();
        let avg = Arc::new(average_params(&[(*a).clone(), (*b).clone()], &w).unwrap());
        let blend = db_mpa(&[a.drift(s, "a"), b.drift(s, "b")], &w).unwrap();
        let rs = avg.drift(s, "avg");
        for &t in &[0.01, 0.4, 0.99] {
            for x in [-2.0, 0.3] {
                assert!((rs.eval(&[x], t).unwrap()[0] - blend.eval(&[x], t).unwrap()[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let m = poly1(-1.0, 3);
        assert_eq!(ScoreModel::from_json(&m.to_json()).unwrap(), m);
        assert!(ScoreModel::from_json("{\"family\":{\"kind\":\"polynomial\",\"degree\":1},\"dim\":1,\"horizon\":1.0,\"bins\":[{\"theta\":[1.0]}]}").is_err());
    }
}
