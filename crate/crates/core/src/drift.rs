//! Reverse-time drift fields and score fields.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::NoiseSchedule;

/// A drift frozen at one time `t`. Evaluation must not allocate on the hot path.
pub trait DriftSlice: Send + Sync {
    fn eval_into(&self, x: &[f64], out: &mut [f64]);
}

/// A time-dependent drift `f(x, t)` of the reverse SDE.
pub trait DriftField: Send + Sync {
    fn dim(&self) -> usize;
    fn slice(&self, t: f64) -> Result<Box<dyn DriftSlice + '_>>;
}

/// A score `grad log p_t` frozen at one time.
pub trait ScoreSlice: Send + Sync {
    fn score_into(&self, x: &[f64], out: &mut [f64]);

    /// Jacobian of the score; central differences unless overridden.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let mut jac = DMatrix::zeros(d, d);
        let mut xp = x.to_vec();
        let mut sp = vec![0.0; d];
        let mut sm = vec![0.0; d];
        for j in 0..d {
            let h = 1e-5 * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            self.score_into(&xp, &mut sp);
            xp[j] = x[j] - h;
            self.score_into(&xp, &mut sm);
            xp[j] = x[j];
            for i in 0..d {
                jac[(i, j)] = (sp[i] - sm[i]) / (2.0 * h);
            }
        }
        jac
    }
}

/// A time-dependent score field.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;
    fn score_slice(&self, t: f64) -> Result<Box<dyn ScoreSlice + '_>>;
}

/// How a drift model was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Pretrained,
    ExactTilted { label: String, alpha: f64 },
    Learned { label: String },
    DbMpa { weights: Vec<f64>, children: Vec<Provenance> },
    DbKla { lambda: f64, pretrained: Box<Provenance>, finetuned: Box<Provenance> },
    Rgg { weights: Vec<f64>, alpha: f64 },
    LateSwitch { switch_time: f64, early: Box<Provenance>, late: Box<Provenance> },
    Custom { label: String },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Pretrained => write!(f, "pretrained"),
            Provenance::ExactTilted { label, alpha } => write!(f, "exact[{label}, alpha={alpha}]"),
            Provenance::Learned { label } => write!(f, "learned[{label}]"),
            Provenance::DbMpa { weights, children } => {
                write!(f, "db_mpa(")?;
                for (i, (w, c)) in weights.iter().zip(children).enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{w}*{c}")?;
                }
                write!(f, ")")
            }
            Provenance::DbKla { lambda, pretrained, finetuned } => {
                write!(f, "db_kla(lambda={lambda}, {pretrained}, {finetuned})")
            }
            Provenance::Rgg { weights, alpha } => write!(f, "rgg(w={weights:?}, alpha={alpha})"),
            Provenance::LateSwitch { switch_time, early, late } => {
                write!(f, "switch(t<={switch_time}: {late}; else {early})")
            }
            Provenance::Custom { label } => write!(f, "{label}"),
        }
    }
}

/// A drift field together with its dimension, horizon and provenance.
#[derive(Clone)]
pub struct DriftModel {
    field: Arc<dyn DriftField>,
    provenance: Provenance,
    horizon: f64,
}

impl fmt::Debug for DriftModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftModel")
            .field("dim", &self.dim())
            .field("horizon", &self.horizon)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl DriftModel {
    pub fn new(field: Arc<dyn DriftField>, provenance: Provenance, horizon: f64) -> Self {
        Self { field, provenance, horizon }
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
    pub fn field(&self) -> &Arc<dyn DriftField> {
        &self.field
    }

    pub fn slice(&self, t: f64) -> Result<Box<dyn DriftSlice + '_>> {
        self.field.slice(t)
    }

    /// Evaluate at a single point.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let mut out = vec![0.0; x.len()];
        self.slice(t)?.eval_into(x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDrift { t, x: x.to_vec() });
        }
        Ok(out)
    }
}

/// Drift `f = -beta/2 x - beta s` induced by a score field.
pub struct ScoreDrift {
    score: Arc<dyn ScoreField>,
    schedule: NoiseSchedule,
}

impl ScoreDrift {
    pub fn new(score: Arc<dyn ScoreField>, schedule: NoiseSchedule) -> Self {
        Self { score, schedule }
    }
}

struct ScoreDriftSlice<'a> {
    score: Box<dyn ScoreSlice + 'a>,
    beta: f64,
}

impl DriftSlice for ScoreDriftSlice<'_> {
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.score.score_into(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -0.5 * self.beta * xi - self.beta * *o;
        }
    }
}

impl DriftField for ScoreDrift {
    fn dim(&self) -> usize {
        self.score.dim()
    }
    fn slice(&self, t: f64) -> Result<Box<dyn DriftSlice + '_>> {
        let beta = self.schedule.beta_at(t)?;
        Ok(Box::new(ScoreDriftSlice { score: self.score.score_slice(t)?, beta }))
    }
}

/// Wrap a score field as a drift model.
pub fn drift_from_score(score: Arc<dyn ScoreField>, schedule: NoiseSchedule, provenance: Provenance) -> DriftModel {
    DriftModel::new(Arc::new(ScoreDrift::new(score, schedule)), provenance, schedule.horizon())
}

/// Recovers the score implied by a drift: `s = -(f + beta/2 x) / beta`.
pub struct DriftScore {
    drift: DriftModel,
    schedule: NoiseSchedule,
}

impl DriftScore {
    pub fn new(drift: DriftModel, schedule: NoiseSchedule) -> Self {
        Self { drift, schedule }
    }
}

struct DriftScoreSlice<'a> {
    drift: Box<dyn DriftSlice + 'a>,
    beta: f64,
}

impl ScoreSlice for DriftScoreSlice<'_> {
    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        self.drift.eval_into(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -(*o + 0.5 * self.beta * xi) / self.beta;
        }
    }
}

impl ScoreField for DriftScore {
    fn dim(&self) -> usize {
        self.drift.dim()
    }
    fn score_slice(&self, t: f64) -> Result<Box<dyn ScoreSlice + '_>> {
        let beta = self.schedule.beta_at(t)?;
        if beta <= 0.0 {
            return Err(Error::Domain { what: "beta(t)", value: beta, domain: "(0, inf)" });
        }
        Ok(Box::new(DriftScoreSlice { drift: self.drift.slice(t)?, beta }))
    }
}
