//! Motion-compensation loss and the weighted total objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub eta_mc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 5.0,
            eta_mc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.eta_mc >= 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
    pub obj: f64,
    pub mc: f64,
}

/// Sum over adjacent frames of the mean absolute difference to the target.
/// Gradients reach both the aligned features and the target.
pub fn motion_compensation_var<T: Scalar>(g: &mut Graph<'_, T>, aligned: &[Var], target: Var) -> Result<Var> {
    let terms = aligned
        .iter()
        .map(|&a| Ok((g.l1_mean(a, target)?, T::one())))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&terms)
}

pub fn motion_compensation_loss<T: Scalar>(aligned: &[FeatureMap<T>], target: &FeatureMap<T>) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.input(target.clone());
    let a: Vec<Var> = aligned.iter().map(|f| g.input(f.clone())).collect();
    let l = motion_compensation_var(&mut g, &a, t)?;
    Ok(g.value(l).data()[0].as_f64())
}

fn check_finite(terms: [(&'static str, f64); 4]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some(&(term, value)) => Err(Error::NonFinite { term, value }),
        None => Ok(()),
    }
}

/// `lambda * reg + cls + obj + eta * mc`.
pub fn total_loss(reg: f64, cls: f64, obj: f64, mc: f64, w: &LossWeights) -> Result<f64> {
    check_finite([("reg", reg), ("cls", cls), ("obj", obj), ("mc", mc)])?;
    Ok(w.lambda_reg * reg + cls + obj + w.eta_mc * mc)
}

/// Graph form of [`total_loss`]; `mc` is absent when alignment is disabled.
pub fn total_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    reg: Var,
    cls: Var,
    obj: Var,
    mc: Option<Var>,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let val = |g: &Graph<'_, T>, v: Var| g.value(v).data()[0].as_f64();
    let mc_val = mc.map_or(0.0, |m| val(g, m));
    let (r, c, o) = (val(g, reg), val(g, cls), val(g, obj));
    let total = total_loss(r, c, o, mc_val, w)?;
    let mut terms = vec![(reg, T::lit(w.lambda_reg)), (cls, T::one()), (obj, T::one())];
    if let Some(m) = mc {
        terms.push((m, T::lit(w.eta_mc)));
    }
    let v = g.weighted_sum(&terms)?;
    Ok((
        v,
        LossTerms {
            total,
            reg: r,
            cls: c,
            obj: o,
            mc: mc_val,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_features_cost_nothing() {
        let t = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(motion_compensation_loss(&vec![t.clone(); 4], &t).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_in_one_frame_costs_one() {
        let t = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let shifted = t.map(|v| v + 1.0);
        let l = motion_compensation_loss(&[t.clone(), shifted, t.clone(), t.clone()], &t).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::<f64>::randn(&[2, 3, 5], 1.0, &mut rng);
        let a: Vec<_> = (0..4).map(|_| Tensor::<f64>::randn(&[2, 3, 5], 1.0, &mut rng)).collect();
        let mut want = 0.0;
        for f in &a {
            let mut s = 0.0;
            for c in 0..2 {
                for y in 0..3 {
                    for x in 0..5 {
                        s += (f.at3(c, y, x) - t.at3(c, y, x)).abs();
                    }
                }
            }
            want += s / 30.0;
        }
        assert!((motion_compensation_loss(&a, &t).unwrap() - want).abs() < 1e-12);
        assert!(motion_compensation_loss(&[Tensor::zeros(&[2, 3, 4])], &t).is_err());
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let w = LossWeights::default();
        assert!((total_loss(0.2, 0.1, 0.3, 0.05, &w).unwrap() - 1.45).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let no_mc = LossWeights { eta_mc: 0.0, ..w };
        assert_eq!(total_loss(0.0, 0.0, 0.0, 123.0, &no_mc).unwrap(), 0.0);
        // linear in each term
        let base = total_loss(0.2, 0.1, 0.3, 0.05, &w).unwrap();
        assert!((total_loss(0.3, 0.1, 0.3, 0.05, &w).unwrap() - base - 0.5).abs() < 1e-12);
        assert!((total_loss(0.2, 0.1, 0.3, 0.15, &w).unwrap() - base - 0.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_is_named() {
        match total_loss(0.1, f64::NAN, 0.0, 0.0, &LossWeights::default()) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "cls"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            total_loss(0.1, 0.0, 0.0, f64::INFINITY, &LossWeights::default()),
            Err(Error::NonFinite { term: "mc", .. })
        ));
    }
}
