//! Reward functions, preference weights and regularisation settings.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::SampleBatch;

type RewardFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A reward known only through evaluations.
#[derive(Clone)]
pub struct BlackBoxReward {
    name: String,
    dim: usize,
    lipschitz: Option<f64>,
    func: Arc<RewardFn>,
}

impl BlackBoxReward {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        lipschitz: Option<f64>,
        func: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), dim, lipschitz, func: Arc::new(func) }
    }
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

impl fmt::Debug for BlackBoxReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBoxReward").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

/// A scalar reward `r: R^d -> R`.
#[derive(Clone, Debug)]
pub enum RewardSpec {
    /// `a . x + b`
    Linear {
        a: DVector<f64>,
        b: f64,
    },
    /// `x' A x + a . x + b` with symmetric `A`
    Quadratic {
        matrix: DMatrix<f64>,
        a: DVector<f64>,
        b: f64,
    },
    BlackBox(BlackBoxReward),
}

impl RewardSpec {
    pub fn linear(a: Vec<f64>, b: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::Config("a linear reward needs a non-empty coefficient vector".into()));
        }
        if a.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::Config("reward coefficients must be finite".into()));
        }
        Ok(Self::Linear { a: DVector::from_vec(a), b })
    }

    /// Quadratic reward; `matrix` is symmetrised.
    pub fn quadratic(matrix: DMatrix<f64>, a: Vec<f64>, b: f64) -> Result<Self> {
        let d = a.len();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: matrix.nrows() });
        }
        if matrix.iter().chain(a.iter()).any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::Config("reward coefficients must be finite".into()));
        }
        let sym = 0.5 * (&matrix + matrix.transpose());
        Ok(Self::Quadratic { matrix: sym, a: DVector::from_vec(a), b })
    }

    pub fn dim(&self) -> usize {
        match self {
            RewardSpec::Linear { a, .. } | RewardSpec::Quadratic { a, .. } => a.len(),
            RewardSpec::BlackBox(bb) => bb.dim,
        }
    }

    pub fn label(&self) -> String {
        match self {
            RewardSpec::Linear { a, b } => format!("linear(a={:?}, b={b})", a.as_slice()),
            RewardSpec::Quadratic { a, b, .. } => format!("quadratic(a={:?}, b={b})", a.as_slice()),
            RewardSpec::BlackBox(bb) => bb.name.clone(),
        }
    }

    /// Unchecked evaluation on the hot path.
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            RewardSpec::Linear { a, b } => a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b,
            RewardSpec::Quadratic { matrix, a, b } => {
                let d = a.len();
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += x[i] * matrix[(i, j)] * x[j];
                    }
                }
                q + a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b
            }
            RewardSpec::BlackBox(bb) => (bb.func)(x),
        }
    }

    /// Checked evaluation at one point.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let v = self.value(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteReward { x: x.to_vec() })
        }
    }

    /// Values on every row of a batch.
    pub fn evaluate_batch(&self, batch: &SampleBatch) -> Result<Vec<f64>> {
        batch.rows().map(|r| self.evaluate(r)).collect()
    }

    /// Gradient; analytic for linear and quadratic rewards, central differences otherwise.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let g = self.gradient_unchecked(x);
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(Error::NonFiniteReward { x: x.to_vec() })
        }
    }

    pub(crate) fn gradient_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match self {
            RewardSpec::Linear { a, .. } => a.iter().cloned().collect(),
            RewardSpec::Quadratic { matrix, a, .. } => {
                let xv = DVector::from_column_slice(x);
                (2.0 * matrix * xv + a).iter().cloned().collect()
            }
            RewardSpec::BlackBox(bb) => {
                let mut xp = x.to_vec();
                (0..x.len())
                    .map(|j| {
                        let h = 1e-5 * x[j].abs().max(1.0);
                        xp[j] = x[j] + h;
                        let fp = (bb.func)(&xp);
                        xp[j] = x[j] - h;
                        let fm = (bb.func)(&xp);
                        xp[j] = x[j];
                        (fp - fm) / (2.0 * h)
                    })
                    .collect()
            }
        }
    }

    pub fn as_linear(&self) -> Option<(&DVector<f64>, f64)> {
        match self {
            RewardSpec::Linear { a, b } => Some((a, *b)),
            _ => None,
        }
    }

    pub fn to_config(&self) -> RewardConfig {
        match self {
            RewardSpec::Linear { a, b } => RewardConfig::Linear { a: a.iter().cloned().collect(), b: *b },
            RewardSpec::Quadratic { matrix, a, b } => RewardConfig::Quadratic {
                matrix: (0..a.len()).map(|i| (0..a.len()).map(|j| matrix[(i, j)]).collect()).collect(),
                a: a.iter().cloned().collect(),
                b: *b,
            },
            RewardSpec::BlackBox(bb) => RewardConfig::Blackbox { name: bb.name.clone(), dim: Some(bb.dim) },
        }
    }
}

/// Serialisable reward description; black-box rewards are named entries of [`catalog`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardConfig {
    Linear {
        a: Vec<f64>,
        #[serde(default)]
        b: f64,
    },
    Quadratic {
        matrix: Vec<Vec<f64>>,
        a: Vec<f64>,
        #[serde(default)]
        b: f64,
    },
    Blackbox {
        name: String,
        #[serde(default)]
        dim: Option<usize>,
    },
}

impl RewardConfig {
    /// Resolve into a reward on `R^dim`.
    pub fn build(&self, dim: usize) -> Result<RewardSpec> {
        let r = match self {
            RewardConfig::Linear { a, b } => RewardSpec::linear(a.clone(), *b)?,
            RewardConfig::Quadratic { matrix, a, b } => {
                let n = a.len();
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::Config("quadratic reward matrix must be square and match a".into()));
                }
                RewardSpec::quadratic(DMatrix::from_fn(n, n, |i, j| matrix[i][j]), a.clone(), *b)?
            }
            RewardConfig::Blackbox { name, dim: d } => catalog(name, d.unwrap_or(dim))?,
        };
        if r.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: r.dim() });
        }
        Ok(r)
    }
}

/// Named black-box rewards: `negdist(c1, ..., cd)` is `-|x - c|^2`,
/// `tanh(a1, ..., ad)` is `tanh(a . x)`, `sin(k)` is `sum_j sin(k x_j)`.
pub fn catalog(name: &str, dim: usize) -> Result<RewardSpec> {
    let (head, args) = match name.find('(') {
        Some(i) if name.ends_with(')') => (&name[..i], &name[i + 1..name.len() - 1]),
        _ => (name, ""),
    };
    let nums: Vec<f64> = if args.trim().is_empty() {
        Vec::new()
    } else {
        args.split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad argument list in reward `{name}`: {e}")))?
    };
    let vec_arg = |default: f64| -> Result<Vec<f64>> {
        match nums.len() {
            0 => Ok(vec![default; dim]),
            n if n == dim => Ok(nums.clone()),
            n => Err(Error::DimensionMismatch { expected: dim, got: n }),
        }
    };
    let bb = match head.trim() {
        "negdist" => {
            let c = vec_arg(0.0)?;
            BlackBoxReward::new(name, dim, None, move |x| -x.iter().zip(&c).map(|(x, c)| (x - c).powi(2)).sum::<f64>())
        }
        "tanh" => {
            let a = vec_arg(1.0)?;
            let lip = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            BlackBoxReward::new(name, dim, Some(lip), move |x| x.iter().zip(&a).map(|(x, a)| x * a).sum::<f64>().tanh())
        }
        "sin" => {
            let k = match nums.as_slice() {
                [] => 1.0,
                [k] => *k,
                _ => return Err(Error::Config("sin takes a single frequency".into())),
            };
            BlackBoxReward::new(name, dim, Some(k.abs() * (dim as f64).sqrt()), move |x| {
                x.iter().map(|v| (k * v).sin()).sum()
            })
        }
        other => return Err(Error::Config(format!("unknown black-box reward `{other}`"))),
    };
    Ok(RewardSpec::BlackBox(bb))
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PreferenceWeights(Vec<f64>);

impl TryFrom<Vec<f64>> for PreferenceWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PreferenceWeights> for Vec<f64> {
    fn from(w: PreferenceWeights) -> Self {
        w.0
    }
}

impl PreferenceWeights {
    /// Entries must be non-negative and sum to one within `1e-9`.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Empty("preference weights"));
        }
        if let Some(&bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain { what: "preference weight", value: bad, domain: "[0, 1]" });
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain { what: "sum of preference weights", value: s, domain: "{1}" });
        }
        Ok(Self(w))
    }

    /// `(w, 1 - w)` for two rewards.
    pub fn pair(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Domain { what: "preference weight", value: w, domain: "[0, 1]" });
        }
        Self::new(vec![w, 1.0 - w])
    }

    pub fn one_hot(m: usize, i: usize) -> Result<Self> {
        if i >= m {
            return Err(Error::Config(format!("index {i} out of range for {m} rewards")));
        }
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// KL regularisation strength `alpha` and the blend factor `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationSpec {
    pub alpha: f64,
    pub lambda: f64,
}

impl RegularizationSpec {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Domain { what: "lambda", value: lambda, domain: "[0, inf)" });
        }
        Ok(Self { alpha, lambda })
    }

    /// `alpha / lambda`, or `None` when `lambda = 0` (the pre-trained model).
    pub fn effective_alpha(&self) -> Option<f64> {
        (self.lambda > 0.0).then(|| self.alpha / self.lambda)
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain { what: "alpha", value: alpha, domain: "(0, inf)" })
    }
}

/// `r(w) = sum_i w_i r_i`, kept in closed form when every term is linear or quadratic.
pub fn scalarize(rewards: &[RewardSpec], w: &PreferenceWeights) -> Result<RewardSpec> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward list"));
    }
    if rewards.len() != w.len() {
        return Err(Error::LengthMismatch(format!("{} rewards but {} preference weights", rewards.len(), w.len())));
    }
    let d = rewards[0].dim();
    if let Some(r) = rewards.iter().find(|r| r.dim() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: r.dim() });
    }
    let ws = w.as_slice();
    if rewards.iter().all(|r| matches!(r, RewardSpec::Linear { .. })) {
        let mut a = DVector::zeros(d);
        let mut b = 0.0;
        for (r, wi) in rewards.iter().zip(ws) {
            let (ra, rb) = r.as_linear().unwrap();
            a += *wi * ra;
            b += wi * rb;
        }
        return Ok(RewardSpec::Linear { a, b });
    }
    if rewards.iter().all(|r| !matches!(r, RewardSpec::BlackBox(_))) {
        let mut m = DMatrix::zeros(d, d);
        let mut a = DVector::zeros(d);
        let mut b = 0.0;
        for (r, wi) in rewards.iter().zip(ws) {
            match r {
                RewardSpec::Linear { a: ra, b: rb } => {
                    a += *wi * ra;
                    b += wi * rb;
                }
                RewardSpec::Quadratic { matrix, a: ra, b: rb } => {
                    m += *wi * matrix;
                    a += *wi * ra;
                    b += wi * rb;
                }
                RewardSpec::BlackBox(_) => unreachable!(),
            }
        }
        return Ok(RewardSpec::Quadratic { matrix: m, a, b });
    }
    let parts: Vec<(f64, RewardSpec)> = rewards.iter().cloned().zip(ws.iter().cloned()).map(|(r, w)| (w, r)).collect();
    let name =
        format!("sum[{}]", parts.iter().map(|(w, r)| format!("{w}*{}", r.label())).collect::<Vec<_>>().join(" + "));
    Ok(RewardSpec::BlackBox(BlackBoxReward::new(name, d, None, move |x| {
        parts.iter().filter(|(w, _)| *w != 0.0).map(|(w, r)| w * r.value(x)).sum()
    })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalarize_linear_stays_linear() {
        let r = vec![RewardSpec::linear(vec![1.0], 0.0).unwrap(), RewardSpec::linear(vec![-1.0], 0.0).unwrap()];
        let s = scalarize(&r, &PreferenceWeights::pair(0.5).unwrap()).unwrap();
        let (a, b) = s.as_linear().unwrap();
        assert_eq!(a[0], 0.0);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn scalarize_one_hot_recovers_component() {
        let r = vec![
            RewardSpec::linear(vec![1.0, 2.0], 0.5).unwrap(),
            RewardSpec::quadratic(DMatrix::identity(2, 2) * -1.0, vec![0.0, 1.0], 0.0).unwrap(),
        ];
        let s = scalarize(&r, &PreferenceWeights::one_hot(2, 1).unwrap()).unwrap();
        for x in [[0.3, -1.0], [2.0, 1.0]] {
            assert!((s.value(&x) - r[1].value(&x)).abs() < 1e-15);
        }
    }

    #[test]
    fn scalarize_mixed_black_box() {
        let r = vec![RewardSpec::linear(vec![1.0], 0.0).unwrap(), catalog("negdist(1)", 1).unwrap()];
        let s = scalarize(&r, &PreferenceWeights::pair(0.25).unwrap()).unwrap();
        assert!(matches!(s, RewardSpec::BlackBox(_)));
        let x = [0.4];
        assert!((s.value(&x) - (0.25 * 0.4 - 0.75 * 0.36)).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        assert!(PreferenceWeights::new(vec![0.5, 0.6]).is_err());
        assert!(PreferenceWeights::new(vec![-0.1, 1.1]).is_err());
        assert!(RegularizationSpec::new(0.0, 1.0).is_err());
        let r = vec![RewardSpec::linear(vec![1.0], 0.0).unwrap()];
        assert!(matches!(scalarize(&r, &PreferenceWeights::pair(0.5).unwrap()), Err(Error::LengthMismatch(_))));
        assert!(catalog("nope", 1).is_err());
        let nan = RewardSpec::BlackBox(BlackBoxReward::new("nan", 1, None, |_| f64::NAN));
        assert!(matches!(nan.evaluate(&[0.0]), Err(Error::NonFiniteReward { .. })));
    }

    #[test]
    fn gradients() {
        let q =
            RewardSpec::quadratic(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, -2.0]), vec![0.3, -0.1], 1.0).unwrap();
        let bb = RewardSpec::BlackBox(BlackBoxReward::new("q", 2, None, {
            let q = q.clone();
            move |x| q.value(x)
        }));
        let x = [0.7, -1.2];
        let (g1, g2) = (q.gradient(&x).unwrap(), bb.gradient(&x).unwrap());
        for j in 0..2 {
            assert!((g1[j] - g2[j]).abs() < 1e-7);
        }
    }
}
