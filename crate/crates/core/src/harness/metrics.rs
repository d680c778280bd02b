use serde::{Deserialize, Serialize};

use crate::models::Prediction;
use crate::optim::bce_value;

use super::Result;

/// Classification metrics over one split.
///
/// `accuracy` is the headline figure (fraction correct at the 0.5
/// threshold). `precision` and `recall` are the positive-predictive value and
/// true-positive rate for the fake class; `None` when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// `confusion[actual][predicted]`, 0 = real, 1 = fake.
    pub confusion: [[usize; 2]; 2],
}

pub fn metrics_from_probs(probs: &[f64], labels: &[u8]) -> Result<EvalMetrics> {
    let targets: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let loss = bce_value(probs, &targets)?;
    let mut confusion = [[0usize; 2]; 2];
    for (&p, &l) in probs.iter().zip(labels) {
        confusion[l as usize][Prediction::new(p).label() as usize] += 1;
    }
    let [[tn, fp], [fn_, tp]] = confusion;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(EvalMetrics {
        count: probs.len(),
        accuracy: (tn + tp) as f64 / probs.len() as f64,
        loss,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_example() {
        let m = metrics_from_probs(&[0.7, 0.4, 0.6, 0.2], &[1, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.confusion, [[2, 1], [0, 1]]);
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.count, 4);
    }

    #[test]
    fn all_correct() {
        let m = metrics_from_probs(&[0.999, 0.001, 0.998, 0.002], &[1, 0, 1, 0]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.loss < 0.01, "{}", m.loss);
    }

    #[test]
    fn undefined_precision() {
        let m = metrics_from_probs(&[0.1, 0.2], &[0, 0]).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.accuracy, 1.0);
    }
}
