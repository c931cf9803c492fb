//! Null-prompt calibration of relation label probabilities.
//!
//! The label distribution the model assigns to a content-free input ("N/A")
//! measures its prior preference for each label. Scaling every probability by
//! the reciprocal of that prior, then renormalizing, maps the null-input
//! distribution to uniform. No offset term is used.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{DecodeError, LabelProbs};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("transform covers {expected} labels but probabilities have {got}")]
    LabelMismatch { expected: usize, got: usize },
    #[error("null-input probability of label {0} is not positive")]
    NonPositive(usize),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTransform {
    pub weights: Vec<f64>,
    pub source_null_probs: LabelProbs,
}

pub fn fit_calibration(null_probs: &LabelProbs) -> Result<CalibrationTransform, CalibrationError> {
    let weights = null_probs
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 {
                Ok(1.0 / p)
            } else {
                Err(CalibrationError::NonPositive(i))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CalibrationTransform {
        weights,
        source_null_probs: null_probs.clone(),
    })
}

impl CalibrationTransform {
    pub fn apply(&self, probs: &LabelProbs) -> Result<LabelProbs, CalibrationError> {
        if probs.len() != self.weights.len() {
            return Err(CalibrationError::LabelMismatch {
                expected: self.weights.len(),
                got: probs.len(),
            });
        }
        let scaled: Vec<f64> = self
            .weights
            .iter()
            .zip(probs.as_slice())
            .map(|(w, p)| w * p)
            .collect();
        Ok(LabelProbs::from_unnormalized(&scaled)?)
    }
}

pub fn apply_calibration(
    transform: &CalibrationTransform,
    probs: &LabelProbs,
) -> Result<LabelProbs, CalibrationError> {
    transform.apply(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::decide_label;
    use proptest::prelude::*;

    fn probs(v: &[f64]) -> LabelProbs {
        LabelProbs::new(v.to_vec()).unwrap()
    }

    #[test]
    fn reciprocal_weights() {
        let t = fit_calibration(&probs(&[0.8, 0.2])).unwrap();
        assert!((t.weights[0] - 1.25).abs() < 1e-12);
        assert!((t.weights[1] - 5.0).abs() < 1e-12);
        let t = fit_calibration(&probs(&[0.5, 0.25, 0.25])).unwrap();
        assert_eq!(t.weights, vec![2.0, 4.0, 4.0]);
        let t = fit_calibration(&LabelProbs::uniform(4)).unwrap();
        assert!(t.weights.iter().all(|w| (w - t.weights[0]).abs() < 1e-12));
    }

    #[test]
    fn flips_biased_decision() {
        let t = fit_calibration(&probs(&[0.8, 0.2])).unwrap();
        let p = probs(&[0.6, 0.4]);
        assert_eq!(decide_label(&p, 1), 0);
        let q = t.apply(&p).unwrap();
        // 0.75 / 2.75 and 2.0 / 2.75
        assert!((q.get(0) - 0.75 / 2.75).abs() < 1e-12);
        assert!((q.get(1) - 2.0 / 2.75).abs() < 1e-12);
        assert_eq!(decide_label(&q, 1), 1);
    }

    #[test]
    fn uniform_transform_is_identity() {
        let t = fit_calibration(&LabelProbs::uniform(3)).unwrap();
        let p = probs(&[0.5, 0.3, 0.2]);
        let q = t.apply(&p).unwrap();
        for i in 0..3 {
            assert!((q.get(i) - p.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn label_mismatch() {
        let t = fit_calibration(&LabelProbs::uniform(3)).unwrap();
        assert_eq!(
            t.apply(&LabelProbs::uniform(2)),
            Err(CalibrationError::LabelMismatch { expected: 3, got: 2 })
        );
    }

    proptest! {
        #[test]
        fn null_probs_map_to_uniform(raw in prop::collection::vec(1e-6f64..1.0, 1..8)) {
            let p = LabelProbs::from_unnormalized(&raw).unwrap();
            let t = fit_calibration(&p).unwrap();
            for (w, q) in t.weights.iter().zip(p.as_slice()) {
                prop_assert!((w * q - 1.0).abs() < 1e-9);
                prop_assert!(w.is_finite() && *w > 0.0);
            }
            let u = t.apply(&p).unwrap();
            let k = raw.len() as f64;
            for &x in u.as_slice() {
                prop_assert!((x - 1.0 / k).abs() < 1e-9);
            }
        }

        #[test]
        fn apply_preserves_simplex(
            null in prop::collection::vec(1e-6f64..1.0, 4),
            raw in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let t = fit_calibration(&LabelProbs::from_unnormalized(&null).unwrap()).unwrap();
            let q = t.apply(&LabelProbs::from_unnormalized(&raw).unwrap()).unwrap();
            let sum: f64 = q.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(q.as_slice().iter().all(|&x| x >= 0.0));
        }
    }
}
