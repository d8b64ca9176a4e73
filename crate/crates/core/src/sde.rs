//! Variance-preserving forward SDE, time grids, sample batches and the reverse-time sampler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::drift::DriftModel;
use crate::error::{Error, Result};
use crate::rng::RandomSource;

const TIME_SLACK: f64 = 1e-12;

/// Linear noise schedule `beta(t) = beta_min + (t / T)(beta_max - beta_min)` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    horizon: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    #[serde(default = "default_beta_min")]
    beta_min: f64,
    #[serde(default = "default_beta_max")]
    beta_max: f64,
    #[serde(default = "default_horizon")]
    horizon: f64,
}

fn default_beta_min() -> f64 {
    0.1
}
fn default_beta_max() -> f64 {
    20.0
}
fn default_horizon() -> f64 {
    1.0
}

impl TryFrom<RawSchedule> for NoiseSchedule {
    type Error = Error;
    fn try_from(r: RawSchedule) -> Result<Self> {
        NoiseSchedule::new(r.beta_min, r.beta_max, r.horizon)
    }
}

impl From<NoiseSchedule> for RawSchedule {
    fn from(s: NoiseSchedule) -> Self {
        RawSchedule { beta_min: s.beta_min, beta_max: s.beta_max, horizon: s.horizon }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, horizon: 1.0 }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        if !(beta_min.is_finite() && beta_min >= 0.0) {
            return Err(Error::Domain { what: "beta_min", value: beta_min, domain: "[0, inf)" });
        }
        if !(beta_max.is_finite() && beta_max >= beta_min && beta_max > 0.0) {
            return Err(Error::Domain { what: "beta_max", value: beta_max, domain: "[beta_min, inf) and > 0" });
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain { what: "horizon", value: horizon, domain: "(0, inf)" });
        }
        Ok(Self { beta_min, beta_max, horizon })
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }
    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        if t.is_finite() && t >= -TIME_SLACK && t <= self.horizon * (1.0 + TIME_SLACK) {
            Ok(t.clamp(0.0, self.horizon))
        } else {
            Err(Error::Domain { what: "t", value: t, domain: "[0, T]" })
        }
    }

    /// `beta(t)`; errors outside `[0, T]`.
    pub fn beta_at(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.beta(t))
    }

    pub(crate) fn beta(&self, t: f64) -> f64 {
        self.beta_min + t / self.horizon * (self.beta_max - self.beta_min)
    }

    /// `int_0^t beta(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.integral(t))
    }

    fn integral(&self, t: f64) -> f64 {
        self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.horizon)
    }

    /// `alpha_bar(t) = exp(-int_0^t beta)`, strictly decreasing from 1.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.ab(t))
    }

    pub(crate) fn ab(&self, t: f64) -> f64 {
        (-self.integral(t)).exp()
    }

    /// Inverse of [`alpha_bar`](Self::alpha_bar).
    pub fn time_for_alpha_bar(&self, alpha_bar: f64) -> Result<f64> {
        let lo = self.ab(self.horizon);
        if !(alpha_bar.is_finite() && alpha_bar <= 1.0 && alpha_bar >= lo * (1.0 - 1e-12)) {
            return Err(Error::Domain { what: "alpha_bar", value: alpha_bar, domain: "[alpha_bar(T), 1]" });
        }
        let l = -alpha_bar.ln();
        let c = (self.beta_max - self.beta_min) / (2.0 * self.horizon);
        let t = if c == 0.0 {
            l / self.beta_min
        } else {
            2.0 * l / (self.beta_min + (self.beta_min * self.beta_min + 4.0 * c * l).sqrt())
        };
        Ok(t.clamp(0.0, self.horizon))
    }
}

/// Strictly increasing knots `0 = t_0 < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    /// `steps` equal steps on `[0, horizon]`.
    pub fn uniform(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("a time grid needs at least one step".into()));
        }
        let knots = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        Self::from_knots(knots)
    }

    /// Geometrically spaced knots, finest near `t = 0`, with first positive knot `first`.
    pub fn geometric(steps: usize, horizon: f64, first: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config("a geometric grid needs at least two steps".into()));
        }
        if !(first > 0.0 && first < horizon) {
            return Err(Error::Domain { what: "first knot", value: first, domain: "(0, T)" });
        }
        let ratio = (horizon / first).powf(1.0 / (steps - 1) as f64);
        let mut knots = vec![0.0];
        knots.extend((0..steps).map(|k| first * ratio.powi(k as i32)));
        knots[steps] = horizon;
        Self::from_knots(knots)
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Config("a time grid needs at least one step".into()));
        }
        if knots[0] != 0.0 {
            return Err(Error::Config(format!("first knot must be 0, got {}", knots[0])));
        }
        for w in knots.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::Config("time knots must be finite and strictly increasing".into()));
            }
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
    pub fn num_steps(&self) -> usize {
        self.knots.len() - 1
    }
    pub fn horizon(&self) -> f64 {
        *self.knots.last().unwrap()
    }
}

/// `n` points in `R^d` stored row-major, tagged with the time they live at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    dim: usize,
    t: f64,
    data: Vec<f64>,
}

impl SampleBatch {
    pub fn new(dim: usize, t: f64, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::LengthMismatch(format!("{} values do not split into rows of length {dim}", data.len())));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain { what: "sample coordinate", value: data[bad], domain: "finite reals" });
        }
        Ok(Self { dim, t, data })
    }

    pub fn from_rows(t: f64, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::Empty("sample rows"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, t, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn time(&self) -> f64 {
        self.t
    }
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Per-coordinate unbiased variance.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for r in self.rows() {
            for j in 0..self.dim {
                v[j] += (r[j] - m[j]).powi(2);
            }
        }
        let n = (self.len().max(2) - 1) as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

/// Draw `x_t ~ N(sqrt(alpha_bar) x_0, (1 - alpha_bar) I)` for each row of `x0`.
pub fn forward_perturb(x0: &SampleBatch, t: f64, schedule: &NoiseSchedule, rng: RandomSource) -> Result<SampleBatch> {
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut gen = rng.rng();
    let data = x0
        .as_slice()
        .iter()
        .map(|&x| {
            let z: f64 = gen.sample(StandardNormal);
            a * x + s * z
        })
        .collect();
    SampleBatch::new(x0.dim(), t, data)
}

/// A population of reverse-time trajectories, each with its own random stream.
pub struct Trajectories {
    dim: usize,
    states: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
}

impl Trajectories {
    /// `n` trajectories started from `N(0, I)`; trajectory `i` draws from substream `i`.
    pub fn from_prior(n: usize, dim: usize, rng: RandomSource) -> Result<Self> {
        Self::from_sources(dim, (0..n).map(|i| rng.substream(i as u64)))
    }

    /// One trajectory per source, each started from `N(0, I)` drawn from its own source.
    pub fn from_sources(dim: usize, sources: impl IntoIterator<Item = RandomSource>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        let mut states = Vec::new();
        let mut rngs = Vec::new();
        for src in sources {
            let mut g = src.rng();
            states.extend((0..dim).map(|_| g.sample::<f64, _>(StandardNormal)));
            rngs.push(g);
        }
        if rngs.is_empty() {
            return Err(Error::Empty("trajectory count"));
        }
        Ok(Self { dim, states, rngs })
    }

    pub(crate) fn from_parts(dim: usize, states: Vec<f64>, rngs: Vec<ChaCha8Rng>) -> Self {
        debug_assert_eq!(states.len(), dim * rngs.len());
        Self { dim, states, rngs }
    }

    pub(crate) fn into_parts(self) -> (Vec<f64>, Vec<ChaCha8Rng>) {
        (self.states, self.rngs)
    }

    pub fn len(&self) -> usize {
        self.rngs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rngs.is_empty()
    }
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Run the reverse Euler–Maruyama recursion from knot `from` down to knot `to`.
    pub fn advance(
        &mut self,
        drift: &DriftModel,
        schedule: &NoiseSchedule,
        grid: &TimeGrid,
        from: usize,
        to: usize,
    ) -> Result<()> {
        if drift.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: drift.dim(), got: self.dim });
        }
        let knots = grid.knots();
        if from >= knots.len() || to > from {
            return Err(Error::Config(format!(
                "invalid knot range {from} -> {to} for a grid with {} steps",
                grid.num_steps()
            )));
        }
        let dim = self.dim;
        for k in (to + 1..=from).rev() {
            let t = knots[k];
            let dt = t - knots[k - 1];
            let slice = drift.slice(t)?;
            let sd = (schedule.beta(t) * dt).sqrt();
            self.states.par_chunks_exact_mut(dim).zip(self.rngs.par_iter_mut()).with_min_len(512).try_for_each(
                |(x, g)| {
                    let mut f: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, dim);
                    slice.eval_into(x, &mut f);
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
        Ok(())
    }

    pub fn into_batch(self, t: f64) -> Result<SampleBatch> {
        SampleBatch::new(self.dim, t, self.states)
    }
}

/// Sample `batch_size` points at `t = 0` by integrating the reverse SDE driven by `drift`.
///
/// Trajectory `i` uses substream `i` of `rng`, so results are bit-identical for a given seed.
pub fn euler_maruyama_reverse(
    drift: &DriftModel,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    rng: RandomSource,
    batch_size: usize,
) -> Result<SampleBatch> {
    check_grid(schedule, grid)?;
    let mut traj = Trajectories::from_prior(batch_size, drift.dim(), rng)?;
    traj.advance(drift, schedule, grid, grid.num_steps(), 0)?;
    traj.into_batch(0.0)
}

pub(crate) fn check_grid(schedule: &NoiseSchedule, grid: &TimeGrid) -> Result<()> {
    if (grid.horizon() - schedule.horizon()).abs() > 1e-12 * schedule.horizon() {
        return Err(Error::Config(format!(
            "time grid ends at {} but the schedule horizon is {}",
            grid.horizon(),
            schedule.horizon()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;
    use proptest::prelude::*;

    #[test]
    fn alpha_bar_matches_quadrature() {
        let s = NoiseSchedule::default();
        for &t in &[0.0, 0.01, 0.1, 0.37, 0.5, 0.9, 1.0] {
            let integral = integrate(|u| s.beta_at(u).unwrap(), 0.0, t, 1e-14);
            assert!((s.alpha_bar(t).unwrap() - (-integral).exp()).abs() < 1e-10);
        }
        assert!((s.alpha_bar(0.5).unwrap() - (-2.5375f64).exp()).abs() < 1e-12);
        assert!((s.alpha_bar(1.0).unwrap() - (-10.05f64).exp()).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let s = NoiseSchedule::default();
        assert!(matches!(s.alpha_bar(1.5), Err(Error::Domain { .. })));
        assert!(matches!(s.beta_at(-0.1), Err(Error::Domain { .. })));
        assert!(NoiseSchedule::new(1.0, 0.5, 1.0).is_err());
        assert!(TimeGrid::uniform(0, 1.0).is_err());
    }

    #[test]
    fn geometric_grid_is_increasing() {
        let g = TimeGrid::geometric(50, 1.0, 1e-3).unwrap();
        assert_eq!(g.num_steps(), 50);
        assert_eq!(g.knots()[1], 1e-3);
        assert_eq!(g.horizon(), 1.0);
    }

    #[test]
    fn forward_perturb_moments() {
        let s = NoiseSchedule::default();
        let x0 = SampleBatch::new(1, 0.0, vec![2.0; 40_000]).unwrap();
        let xt = forward_perturb(&x0, 0.3, &s, RandomSource::new(3)).unwrap();
        let ab = s.alpha_bar(0.3).unwrap();
        assert!((xt.mean()[0] - 2.0 * ab.sqrt()).abs() < 0.02);
        assert!((xt.variance()[0] - (1.0 - ab)).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn alpha_bar_monotone_and_invertible(t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let s = NoiseSchedule::default();
            let (a, b) = (t1.min(t2), t1.max(t2));
            let (aa, ab) = (s.alpha_bar(a).unwrap(), s.alpha_bar(b).unwrap());
            prop_assert!(aa > 0.0 && aa <= 1.0);
            if b > a + 1e-9 { prop_assert!(ab < aa); }
            let back = s.time_for_alpha_bar(aa).unwrap();
            prop_assert!((back - a).abs() < 1e-9);
        }
    }
}
