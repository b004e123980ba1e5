//! Evaluation metrics: mIoU, RMSE, Δm and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One task's score and the direction in which it improves.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore<T> {
    pub value: T,
    pub lower_is_better: bool,
}

impl<T> TaskScore<T> {
    pub fn higher(value: T) -> Self {
        TaskScore {
            value,
            lower_is_better: false,
        }
    }

    pub fn lower(value: T) -> Self {
        TaskScore {
            value,
            lower_is_better: true,
        }
    }
}

/// Mean IoU over classes that occur in the prediction or the ground truth.
/// Classes absent from both are left out of the mean.
pub fn miou(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("miou", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::contract("miou of an empty map"));
    }
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fneg = vec![0u64; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::contract(format!(
                "label {} out of range for {n_classes} classes",
                p.max(t)
            )));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let ious: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let denom = tp[c] + fp[c] + fneg[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn rmse<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    if pred.len() != truth.len() {
        return Err(Error::dim("rmse", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::contract("rmse of empty input"));
    }
    let ss = pred
        .iter()
        .zip(truth)
        .fold(T::zero(), |acc, (&p, &a)| acc + (p - a) * (p - a));
    Ok((ss / T::from_usize_lossy(pred.len())).sqrt())
}

/// `(1/n) Σ (−1)^{l_i} (M_m,i − M_s,i) / M_s,i`; positive when the multi-task
/// model beats the single-task baselines on average.
pub fn delta_m<T: Scalar>(mtl: &[TaskScore<T>], stl: &[TaskScore<T>]) -> Result<T> {
    if mtl.len() != stl.len() || mtl.is_empty() {
        return Err(Error::contract(format!(
            "delta_m needs equal, non-empty score lists ({} vs {})",
            mtl.len(),
            stl.len()
        )));
    }
    let mut acc = T::zero();
    for (i, (m, s)) in mtl.iter().zip(stl).enumerate() {
        if m.lower_is_better != s.lower_is_better {
            return Err(Error::contract(format!("task {i} direction flags disagree")));
        }
        if s.value == T::zero() {
            return Err(Error::contract(format!("task {i} single-task score is zero")));
        }
        let rel = (m.value - s.value) / s.value;
        acc += if m.lower_is_better { -rel } else { rel };
    }
    Ok(acc / T::from_usize_lossy(mtl.len()))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("accuracy", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::contract("accuracy of empty input"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Serialized metric line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub task: String,
    pub value: f64,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_examples() {
        let t = [0, 0, 1, 1];
        assert_eq!(miou(&t, &t, 3).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1], &[0, 0], 2).unwrap(), 0.0);
        // class 0: TP 1, FN 1 → 1/2; class 1: TP 2, FP 1 → 2/3
        assert!((miou(&[0, 1, 1, 1], &t, 2).unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert!(miou(&[0, 5], &[0, 0], 2).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse::<f64>(&[1.5, 2.5, -0.5], &[1.0, 2.0, -1.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((rmse::<f64>(&[1.0, 2.0], &[0.0, 0.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert!(rmse::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn delta_m_examples() {
        let s = [TaskScore::higher(50.0), TaskScore::lower(0.5)];
        assert_eq!(delta_m(&s, &s).unwrap(), 0.0);
        let d: f64 = delta_m(&[TaskScore::lower(0.9)], &[TaskScore::lower(1.0)]).unwrap();
        assert!((d - 0.1).abs() < 1e-12);
        let d: f64 = delta_m(
            &[TaskScore::higher(50.0), TaskScore::lower(0.48)],
            &[TaskScore::higher(49.0), TaskScore::lower(0.50)],
        )
        .unwrap();
        assert!((d - (1.0 / 49.0 + 0.02 / 0.5) / 2.0).abs() < 1e-12);
        assert!(delta_m(&[TaskScore::higher(1.0)], &[TaskScore::higher(0.0)]).is_err());
        assert!(delta_m(&[TaskScore::higher(1.0)], &[TaskScore::lower(1.0)]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }
}
