use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::sde::{NoiseSchedule, SampleBatch};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A finite Gaussian mixture `sum_k w_k N(mu_k, Sigma_k)` on `R^d`.
///
/// Precisions, Cholesky factors and normalising constants are cached at
/// construction, so density and score evaluation are cheap.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    comps: Vec<Component>,
}

#[derive(Clone, Debug)]
pub(crate) struct Component {
    pub log_coef: f64,
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
    pub chol: DMatrix<f64>,
}

/// Plain serialisable form of a mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;
    fn try_from(s: MixtureSpec) -> Result<Self> {
        GaussianMixture::from_spec(&s)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(m: GaussianMixture) -> Self {
        m.to_spec()
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn cholesky(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let c = nalgebra::Cholesky::new(m.clone())?;
    let l = c.l();
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    log_det.is_finite().then_some((l, log_det))
}

impl GaussianMixture {
    /// Build and validate a mixture. Weights must sum to one within `1e-9`
    /// and are then renormalised exactly.
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidMixture("a mixture needs at least one component".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{k} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMixture("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        Self::build(weights.iter().map(|w| w / total).collect(), means, covariances)
    }

    /// Like [`new`](Self::new) but normalises arbitrary non-negative weights.
    pub fn normalized(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        Self::new(weights.iter().map(|w| w / total).collect(), means, covariances)
    }

    fn build(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        let mut comps = Vec::with_capacity(weights.len());
        for (i, ((w, m), c)) in weights.iter().zip(&means).zip(&covariances).enumerate() {
            if m.len() != dim || c.nrows() != dim || c.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: if m.len() != dim { m.len() } else { c.nrows().max(c.ncols()) },
                });
            }
            if m.iter().chain(c.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {i} has non-finite parameters")));
            }
            let scale = c.amax().max(1e-300);
            if (c - c.transpose()).amax() > 1e-9 * scale {
                return Err(Error::InvalidMixture(format!("covariance {i} is not symmetric")));
            }
            let (chol, log_det) =
                cholesky(c).ok_or_else(|| Error::InvalidMixture(format!("covariance {i} is not positive definite")))?;
            let prec = c
                .clone()
                .cholesky()
                .map(|ch| ch.inverse())
                .ok_or_else(|| Error::InvalidMixture(format!("covariance {i} is not positive definite")))?;
            let prec = 0.5 * (&prec + prec.transpose());
            comps.push(Component {
                log_coef: w.ln() - 0.5 * (dim as f64 * LN_2PI + log_det),
                mean: m.iter().cloned().collect(),
                precision: prec.transpose().iter().cloned().collect(),
                chol,
            });
        }
        Ok(Self { dim, weights, means, covariances, comps })
    }

    pub fn from_spec(s: &MixtureSpec) -> Result<Self> {
        let means = s.means.iter().map(|m| DVector::from_vec(m.clone())).collect();
        let mut covs = Vec::with_capacity(s.covariances.len());
        for c in &s.covariances {
            let n = c.len();
            if c.iter().any(|r| r.len() != n) {
                return Err(Error::InvalidMixture("covariance rows must form a square matrix".into()));
            }
            covs.push(DMatrix::from_fn(n, n, |i, j| c[i][j]));
        }
        Self::new(s.weights.clone(), means, covs)
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().cloned().collect()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| (0..self.dim).map(|i| (0..self.dim).map(|j| c[(i, j)]).collect()).collect())
                .collect(),
        }
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// `N(0, I_d)`.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::gaussian(DVector::zeros(dim), DMatrix::identity(dim, dim))
    }

    /// Components with isotropic covariance `variance * I`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let covs = means.iter().map(|m| DMatrix::identity(m.len(), m.len()) * variance).collect();
        Self::new(weights, means.into_iter().map(DVector::from_vec).collect(), covs)
    }

    /// One-dimensional mixture from means and standard deviations.
    pub fn univariate(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        if sds.len() != means.len() {
            return Err(Error::LengthMismatch("means and standard deviations".into()));
        }
        Self::new(
            weights,
            means.iter().map(|m| DVector::from_element(1, *m)).collect(),
            sds.iter().map(|s| DMatrix::from_element(1, 1, s * s)).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }
    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }
    pub(crate) fn components(&self) -> &[Component] {
        &self.comps
    }

    pub(crate) fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    /// `log w_k + log N(x; mu_k, Sigma_k)` for each component.
    pub fn component_log_densities_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut diff_buf = [0.0f64; 8];
        let mut diff_heap = Vec::new();
        let diff: &mut [f64] = if d <= 8 {
            &mut diff_buf[..d]
        } else {
            diff_heap.resize(d, 0.0);
            &mut diff_heap
        };
        for (c, o) in self.comps.iter().zip(out.iter_mut()) {
            for j in 0..d {
                diff[j] = x[j] - c.mean[j];
            }
            let mut q = 0.0;
            for i in 0..d {
                let row = &c.precision[i * d..(i + 1) * d];
                let pi: f64 = row.iter().zip(diff.iter()).map(|(a, b)| a * b).sum();
                q += diff[i] * pi;
            }
            *o = c.log_coef - 0.5 * q;
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut l: SmallVec<[f64; 16]> = SmallVec::from_elem(0.0, self.comps.len());
        self.component_log_densities_into(x, &mut l);
        log_sum_exp(&l)
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut l = vec![0.0; self.comps.len()];
        self.component_log_densities_into(x, &mut l);
        softmax_in_place(&mut l);
        l
    }

    /// `grad log p(x)` written into `out`, without heap allocation for small mixtures.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let k = self.comps.len();
        if d == 1 && k == 1 {
            let c = &self.comps[0];
            out[0] = -c.precision[0] * (x[0] - c.mean[0]);
            return;
        }
        let mut diff_buf = [0.0f64; 8];
        let mut diff_heap = Vec::new();
        let diff: &mut [f64] = if d <= 8 {
            &mut diff_buf[..d]
        } else {
            diff_heap.resize(d, 0.0);
            &mut diff_heap
        };
        let neg_grad = |c: &Component, diff: &mut [f64], out: &mut [f64], scale: f64| {
            for j in 0..d {
                diff[j] = x[j] - c.mean[j];
            }
            for i in 0..d {
                let row = &c.precision[i * d..(i + 1) * d];
                out[i] -= scale * row.iter().zip(diff.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        if k == 1 {
            neg_grad(&self.comps[0], diff, out, 1.0);
            return;
        }
        let mut log_buf = [0.0f64; 16];
        let mut log_heap = Vec::new();
        let logs: &mut [f64] = if k <= 16 {
            &mut log_buf[..k]
        } else {
            log_heap.resize(k, 0.0);
            &mut log_heap
        };
        self.component_log_densities_into(x, logs);
        softmax_in_place(logs);
        for (c, r) in self.comps.iter().zip(logs.iter()) {
            if *r > 0.0 {
                neg_grad(c, diff, out, *r);
            }
        }
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        out
    }

    /// Hessian of `log p` at `x`.
    pub fn log_density_hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let xv = DVector::from_column_slice(x);
        let rho = self.responsibilities(x);
        let mut s = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for (r, c) in rho.iter().zip(&self.comps) {
            let p = DMatrix::from_row_slice(d, d, &c.precision);
            let g = -(&p * (&xv - DVector::from_column_slice(&c.mean)));
            h += *r * (&g * g.transpose() - p);
            s += *r * g;
        }
        h - &s * s.transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights.iter().zip(&self.means).fold(DVector::zeros(self.dim), |acc, (w, m)| acc + *w * m)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let dm = m - &mu;
            c += *w * (s + &dm * dm.transpose());
        }
        c
    }

    /// Exact i.i.d. draws.
    pub fn sample(&self, n: usize, rng: RandomSource) -> Result<SampleBatch> {
        let mut g = rng.rng();
        let d = self.dim;
        let mut data = Vec::with_capacity(n * d);
        let mut z = DVector::zeros(d);
        for _ in 0..n {
            let u: f64 = g.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for v in z.iter_mut() {
                *v = g.sample(StandardNormal);
            }
            let x = &self.means[k] + &self.comps[k].chol * &z;
            data.extend(x.iter());
        }
        SampleBatch::new(d, 0.0, data)
    }

    /// Marginal of the forward process started from this mixture, at a given `alpha_bar`.
    pub fn marginal_at_alpha_bar(&self, alpha_bar: f64) -> Result<Self> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::Domain { what: "alpha_bar", value: alpha_bar, domain: "(0, 1]" });
        }
        if alpha_bar == 1.0 {
            return Ok(self.clone());
        }
        let a = alpha_bar.sqrt();
        let eye = DMatrix::identity(self.dim, self.dim);
        Self::build(
            self.weights.clone(),
            self.means.iter().map(|m| m * a).collect(),
            self.covariances.iter().map(|c| c * alpha_bar + &eye * (1.0 - alpha_bar)).collect(),
        )
    }

    /// Law of `x_t` when `x_0` follows this mixture.
    pub fn marginal_at(&self, schedule: &NoiseSchedule, t: f64) -> Result<Self> {
        self.marginal_at_alpha_bar(schedule.alpha_bar(t)?)
    }
}
