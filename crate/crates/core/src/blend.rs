//! Affine combinations of drifts.

use std::sync::Arc;

use crate::drift::{DriftField, DriftModel, DriftSlice, Provenance};
use crate::error::{Error, Result};
use crate::rewards::PreferenceWeights;

/// Pointwise affine combination `sum_i c_i f_i(x, t)`. Terms with `c_i = 0` are skipped.
struct AffineBlend {
    children: Vec<DriftModel>,
    coeffs: Vec<f64>,
    dim: usize,
}

struct AffineSlice<'a> {
    parts: Vec<(f64, Box<dyn DriftSlice + 'a>)>,
}

impl DriftSlice for AffineSlice<'_> {
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let mut arr = [0.0f64; 8];
        let mut heap = Vec::new();
        let buf: &mut [f64] = if x.len() <= 8 {
            &mut arr[..x.len()]
        } else {
            heap.resize(x.len(), 0.0);
            &mut heap
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, s) in &self.parts {
            s.eval_into(x, buf);
            for (o, b) in out.iter_mut().zip(buf.iter()) {
                *o += c * b;
            }
        }
    }
}

impl DriftField for AffineBlend {
    fn dim(&self) -> usize {
        self.dim
    }
    fn slice(&self, t: f64) -> Result<Box<dyn DriftSlice + '_>> {
        let mut parts = Vec::new();
        for (c, m) in self.coeffs.iter().zip(&self.children) {
            if *c != 0.0 {
                parts.push((*c, m.slice(t)?));
            }
        }
        if parts.len() == 1 && parts[0].0 == 1.0 {
            return Ok(parts.pop().unwrap().1);
        }
        Ok(Box::new(AffineSlice { parts }))
    }
}

fn check_compatible(models: &[&DriftModel]) -> Result<(usize, f64)> {
    let first = models.first().ok_or(Error::Empty("drift list"))?;
    let (d, h) = (first.dim(), first.horizon());
    for m in models {
        if m.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: m.dim() });
        }
        if (m.horizon() - h).abs() > 1e-12 * h {
            return Err(Error::Config(format!("drift horizons differ: {h} vs {}", m.horizon())));
        }
    }
    Ok((d, h))
}

/// Multi-preference blend: `f = sum_i w_i f_i`.
pub fn db_mpa(drifts: &[DriftModel], w: &PreferenceWeights) -> Result<DriftModel> {
    if drifts.len() != w.len() {
        return Err(Error::LengthMismatch(format!("{} drifts but {} preference weights", drifts.len(), w.len())));
    }
    let (dim, horizon) = check_compatible(&drifts.iter().collect::<Vec<_>>())?;
    let provenance = Provenance::DbMpa {
        weights: w.as_slice().to_vec(),
        children: drifts.iter().map(|d| d.provenance().clone()).collect(),
    };
    let field = AffineBlend { children: drifts.to_vec(), coeffs: w.as_slice().to_vec(), dim };
    Ok(DriftModel::new(Arc::new(field), provenance, horizon))
}

/// Regularisation blend: `f = (1 - lambda) f_pre + lambda f_ft`; `lambda > 1` extrapolates.
pub fn db_kla(pretrained: &DriftModel, finetuned: &DriftModel, lambda: f64) -> Result<DriftModel> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Domain { what: "lambda", value: lambda, domain: "[0, inf)" });
    }
    let (dim, horizon) = check_compatible(&[pretrained, finetuned])?;
    let provenance = Provenance::DbKla {
        lambda,
        pretrained: Box::new(pretrained.provenance().clone()),
        finetuned: Box::new(finetuned.provenance().clone()),
    };
    let field =
        AffineBlend { children: vec![pretrained.clone(), finetuned.clone()], coeffs: vec![1.0 - lambda, lambda], dim };
    Ok(DriftModel::new(Arc::new(field), provenance, horizon))
}

struct Switch {
    early: DriftModel,
    late: DriftModel,
    switch_time: f64,
}

impl DriftField for Switch {
    fn dim(&self) -> usize {
        self.early.dim()
    }
    fn slice(&self, t: f64) -> Result<Box<dyn DriftSlice + '_>> {
        if t <= self.switch_time {
            self.late.slice(t)
        } else {
            self.early.slice(t)
        }
    }
}

/// Follow `early` while `t > switch_time` and `late` afterwards (the reverse process runs from `T` to 0).
pub fn late_switch(early: &DriftModel, late: &DriftModel, switch_time: f64) -> Result<DriftModel> {
    let (_, horizon) = check_compatible(&[early, late])?;
    if !(0.0..=horizon).contains(&switch_time) {
        return Err(Error::Domain { what: "switch time", value: switch_time, domain: "[0, T]" });
    }
    let provenance = Provenance::LateSwitch {
        switch_time,
        early: Box::new(early.provenance().clone()),
        late: Box::new(late.provenance().clone()),
    };
    Ok(DriftModel::new(Arc::new(Switch { early: early.clone(), late: late.clone(), switch_time }), provenance, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{exact_finetuned_drift, pretrained_drift, GaussianMixture};
    use crate::rewards::{scalarize, RewardSpec};
    use crate::sde::NoiseSchedule;
    use proptest::prelude::*;

    fn setup() -> (GaussianMixture, NoiseSchedule, Vec<RewardSpec>) {
        (
            GaussianMixture::standard_normal(1).unwrap(),
            NoiseSchedule::default(),
            vec![RewardSpec::linear(vec![1.0], 0.0).unwrap(), RewardSpec::linear(vec![-1.0], 0.0).unwrap()],
        )
    }

    #[test]
    fn mpa_is_exact_for_gaussian_prior_and_linear_rewards() {
        let (p, s, r) = setup();
        let fts: Vec<_> = r.iter().map(|r| exact_finetuned_drift(&p, r, 1.0, s).unwrap()).collect();
        for w in [0.1, 0.3, 0.5, 0.9] {
            let pw = PreferenceWeights::pair(w).unwrap();
            let blend = db_mpa(&fts, &pw).unwrap();
            let oracle = exact_finetuned_drift(&p, &scalarize(&r, &pw).unwrap(), 1.0, s).unwrap();
            for &t in &[0.01, 0.3, 0.8] {
                for x in [-2.0, 0.0, 1.7] {
                    let (a, b) = (blend.eval(&[x], t).unwrap()[0], oracle.eval(&[x], t).unwrap()[0]);
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn one_hot_weights_recover_child() {
        let (p, s, r) = setup();
        let fts: Vec<_> = r.iter().map(|r| exact_finetuned_drift(&p, r, 1.0, s).unwrap()).collect();
        let blend = db_mpa(&fts, &PreferenceWeights::one_hot(2, 1).unwrap()).unwrap();
        for x in [-1.0, 0.5] {
            assert!((blend.eval(&[x], 0.4).unwrap()[0] - fts[1].eval(&[x], 0.4).unwrap()[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn kla_endpoints() {
        let (p, s, r) = setup();
        let pre = pretrained_drift(&p, s);
        let ft = exact_finetuned_drift(&p, &r[0], 1.0, s).unwrap();
        let zero = db_kla(&pre, &ft, 0.0).unwrap();
        let one = db_kla(&pre, &ft, 1.0).unwrap();
        for x in [-1.0, 2.0] {
            assert!((zero.eval(&[x], 0.2).unwrap()[0] - pre.eval(&[x], 0.2).unwrap()[0]).abs() < 1e-12);
            assert!((one.eval(&[x], 0.2).unwrap()[0] - ft.eval(&[x], 0.2).unwrap()[0]).abs() < 1e-12);
        }
        assert!(db_kla(&pre, &ft, -0.5).is_err());
    }

    #[test]
    fn mismatched_inputs() {
        let (p, s, r) = setup();
        let fts: Vec<_> = r.iter().map(|r| exact_finetuned_drift(&p, r, 1.0, s).unwrap()).collect();
        assert!(matches!(db_mpa(&fts, &PreferenceWeights::new(vec![1.0]).unwrap()), Err(Error::LengthMismatch(_))));
        let other = pretrained_drift(&GaussianMixture::standard_normal(2).unwrap(), s);
        assert!(matches!(db_kla(&fts[0], &other, 0.5), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn late_switch_picks_by_time() {
        let (p, s, r) = setup();
        let pre = pretrained_drift(&p, s);
        let ft = exact_finetuned_drift(&p, &r[0], 1.0, s).unwrap();
        let sw = late_switch(&pre, &ft, 0.3).unwrap();
        assert_eq!(sw.eval(&[0.5], 0.2).unwrap(), ft.eval(&[0.5], 0.2).unwrap());
        assert_eq!(sw.eval(&[0.5], 0.6).unwrap(), pre.eval(&[0.5], 0.6).unwrap());
    }

    proptest! {
        #[test]
        fn blend_is_linear(w in 0.0f64..1.0, x in -4.0f64..4.0, t in 0.001f64..1.0) {
            let p = GaussianMixture::univariate(vec![0.5, 0.5], vec![-2.0, 2.0], vec![1.0, 1.0]).unwrap();
            let s = NoiseSchedule::default();
            let a = exact_finetuned_drift(&p, &RewardSpec::linear(vec![1.0], 0.0).unwrap(), 1.0, s).unwrap();
            let b = pretrained_drift(&p, s);
            let m = db_mpa(&[a.clone(), b.clone()], &PreferenceWeights::pair(w).unwrap()).unwrap();
            let expect = w * a.eval(&[x], t).unwrap()[0] + (1.0 - w) * b.eval(&[x], t).unwrap()[0];
            prop_assert!((m.eval(&[x], t).unwrap()[0] - expect).abs() < 1e-9 * expect.abs().max(1.0));
        }
    }
}
