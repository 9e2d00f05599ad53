//! Training objective: soft Dice on heatmaps plus a Hungarian-matched distance
//! term on coordinates, `L = L_dice + α · L_hungarian`.
//!
//! Each term exists twice: a plain `f64` evaluation used by metrics and tests,
//! and a tensor version that the trainer differentiates.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::assignment::{cost_matrix, hungarian, Assignment};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::heatmap::Heatmap;

/// Added under the square root of matched distances so the gradient stays finite
/// at zero distance.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceReduction {
    MeanOverMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub dice_smoothing: f64,
    pub distance_reduction: DistanceReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            dice_smoothing: 1e-6,
            distance_reduction: DistanceReduction::MeanOverMatched,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("loss.alpha", "must lie in (0, 1)"));
        }
        if !(self.dice_smoothing.is_finite() && self.dice_smoothing >= 0.0) {
            return Err(Error::config("loss.dice_smoothing", "must be non-negative"));
        }
        Ok(())
    }
}

/// `1 - (2 Σ p·q + ε) / (Σ p² + Σ q² + ε)` over raw slices.
pub fn dice_loss_values(pred: &[f64], truth: &[f64], smoothing: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            expected: truth.len().to_string(),
            actual: pred.len().to_string(),
        });
    }
    let (mut pq, mut pp, mut qq) = (0.0, 0.0, 0.0);
    for (&p, &q) in pred.iter().zip(truth) {
        pq += p * q;
        pp += p * p;
        qq += q * q;
    }
    Ok(1.0 - (2.0 * pq + smoothing) / (pp + qq + smoothing))
}

pub fn dice_loss(pred: &Heatmap, truth: &Heatmap, smoothing: f64) -> Result<f64> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.width(), truth.height()),
            actual: format!("{}x{}", pred.width(), pred.height()),
        });
    }
    dice_loss_values(pred.data(), truth.data(), smoothing)
}

/// Mean Euclidean distance over the optimally matched pairs.
pub fn hungarian_loss(pred: &[Point], truth: &[Point]) -> Result<(f64, Assignment)> {
    let cost = cost_matrix(pred, truth)?;
    let assignment = hungarian(&cost)?;
    let loss = assignment.total_cost / assignment.pairs.len() as f64;
    Ok((loss, assignment))
}

/// Mean matched distance with the pairing held fixed.
pub fn matched_distance(pred: &[Point], truth: &[Point], assignment: &Assignment) -> f64 {
    let sum: f64 = assignment
        .pairs
        .iter()
        .map(|&(p, t)| pred[p].distance(&truth[t]))
        .sum();
    sum / assignment.pairs.len() as f64
}

pub fn total_loss(
    pred_heatmap: &Heatmap,
    true_heatmap: &Heatmap,
    pred_tips: &[Point],
    true_tips: &[Point],
    config: &LossConfig,
) -> Result<f64> {
    let dice = dice_loss(pred_heatmap, true_heatmap, config.dice_smoothing)?;
    let (hung, _) = hungarian_loss(pred_tips, true_tips)?;
    Ok(combine(dice, hung, config.alpha))
}

pub fn combine(dice: f64, hungarian: f64, alpha: f64) -> f64 {
    dice + alpha * hungarian
}

/// Batch-mean soft Dice over `(B, ...)` tensors.
pub fn dice_loss_tensor(pred: &Tensor, truth: &Tensor, smoothing: f64) -> Result<Tensor> {
    if pred.dims() != truth.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", truth.dims()),
            actual: format!("{:?}", pred.dims()),
        });
    }
    let p = pred.flatten_from(1)?;
    let q = truth.flatten_from(1)?;
    let pq = (&p * &q)?.sum(D::Minus1)?;
    let pp = p.sqr()?.sum(D::Minus1)?;
    let qq = q.sqr()?.sum(D::Minus1)?;
    let num = ((pq * 2.0)? + smoothing)?;
    let den = ((pp + qq)? + smoothing)?;
    let per_sample = (1.0 - (num / den)?)?;
    Ok(per_sample.mean_all()?)
}

/// Batch-mean Hungarian loss for `(B, K, 2)` predictions. Assignments are solved on
/// detached values; gradients flow only through the matched distances.
pub fn hungarian_loss_tensor(
    pred: &Tensor,
    truths: &[Vec<Point>],
) -> Result<(Tensor, Vec<Assignment>)> {
    let (b, _, two) = pred.dims3()?;
    if two != 2 || b != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, K, 2)", truths.len()),
            actual: format!("{:?}", pred.dims()),
        });
    }
    let values: Vec<Vec<Vec<f64>>> = pred.to_dtype(DType::F64)?.to_vec3()?;
    let mut assignments = Vec::with_capacity(b);
    let mut per_sample = Vec::with_capacity(b);
    for (i, truth) in truths.iter().enumerate() {
        let points: Vec<Point> = values[i].iter().map(|v| Point::new(v[0], v[1])).collect();
        let (_, assignment) = hungarian_loss(&points, truth)?;
        per_sample.push(matched_distance_tensor(&pred.get(i)?, truth, &assignment)?);
        assignments.push(assignment);
    }
    let stacked = Tensor::stack(&per_sample, 0)?;
    Ok((stacked.mean_all()?, assignments))
}

/// Mean matched distance for one `(K, 2)` prediction under a fixed assignment.
pub fn matched_distance_tensor(
    pred: &Tensor,
    truth: &[Point],
    assignment: &Assignment,
) -> Result<Tensor> {
    let device = pred.device();
    let idx: Vec<u32> = assignment.pairs.iter().map(|p| p.0 as u32).collect();
    let idx = Tensor::from_vec(idx, assignment.pairs.len(), device)?;
    let matched = pred.index_select(&idx, 0)?;
    let targets: Vec<f64> = assignment
        .pairs
        .iter()
        .flat_map(|&(_, t)| [truth[t].x, truth[t].y])
        .collect();
    let targets = Tensor::from_vec(targets, (assignment.pairs.len(), 2), &Device::Cpu)?
        .to_device(device)?
        .to_dtype(pred.dtype())?;
    let d2 = (matched - targets)?.sqr()?.sum(D::Minus1)?;
    Ok((d2 + DISTANCE_EPS)?.sqrt()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{gaussian_heatmap, HeatmapConfig};

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn dice_examples() {
        let truth = gaussian_heatmap(&[p(10.0, 10.0)], 32, 32, &HeatmapConfig::default()).unwrap();
        assert!(dice_loss(&truth, &truth, 1e-6).unwrap() < 1e-5);

        // Σq² = 100 with a zero prediction.
        let q = vec![1.0; 100];
        let z = vec![0.0; 100];
        assert!((dice_loss_values(&z, &q, 1e-6).unwrap() - 1.0).abs() < 1e-6);

        // 1 - (2·0.5) / (1 + 0.5) = 1/3
        let d = dice_loss_values(&[1.0, 0.0, 0.0, 0.0], &[0.5, 0.5, 0.0, 0.0], 0.0).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hungarian_loss_examples() {
        let a = [p(0.0, 0.0), p(10.0, 0.0)];
        let b = [p(10.0, 0.0), p(0.0, 0.0)];
        assert_eq!(hungarian_loss(&a, &a).unwrap().0, 0.0);
        let (loss, assignment) = hungarian_loss(&a, &b).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(assignment.pairs, vec![(0, 1), (1, 0)]);
        // Pairings: {(0,0),(1,1)} costs 5 + 0, {(0,1),(1,0)} costs 10 + 5.
        let (loss, _) = hungarian_loss(&[p(0.0, 0.0), p(8.0, 6.0)], &[p(3.0, 4.0), p(8.0, 6.0)]).unwrap();
        assert_eq!(loss, 2.5);
        assert!(hungarian_loss(&[], &a).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert!((combine(0.4, 2.0, 0.15) - 0.7).abs() < 1e-15);
        let tips = [p(20.0, 20.0)];
        let h = gaussian_heatmap(&tips, 48, 48, &HeatmapConfig::default()).unwrap();
        let cfg = LossConfig::default();
        assert!(total_loss(&h, &h, &tips, &tips, &cfg).unwrap() < 1e-5);

        let pred = gaussian_heatmap(&[p(25.0, 20.0)], 48, 48, &HeatmapConfig::default()).unwrap();
        let tiny = LossConfig {
            alpha: 1e-12,
            ..cfg
        };
        let l = total_loss(&pred, &h, &[p(30.0, 20.0)], &tips, &tiny).unwrap();
        let dice = dice_loss(&pred, &h, tiny.dice_smoothing).unwrap();
        assert!((l - dice).abs() < 1e-10);
    }

    #[test]
    fn tensor_versions_match_scalar_versions() {
        let dev = Device::Cpu;
        let truth_tips = vec![vec![p(3.0, 4.0), p(8.0, 6.0)], vec![p(1.0, 1.0)]];
        let pred = Tensor::new(
            &[
                [[0.0f64, 0.0], [8.0, 6.0], [30.0, 30.0]],
                [[2.0, 1.0], [9.0, 9.0], [5.0, 5.0]],
            ],
            &dev,
        )
        .unwrap();
        let (t, _) = hungarian_loss_tensor(&pred, &truth_tips).unwrap();
        // The 1e-12 under the root shifts a zero distance to 1e-6.
        let expected = (2.5 + 1.0) / 2.0;
        assert!((t.to_scalar::<f64>().unwrap() - expected).abs() < 1e-6);

        let a = [0.2, 0.9, 0.0, 0.4];
        let b = [0.1, 1.0, 0.3, 0.0];
        let ta = Tensor::new(&[a], &dev).unwrap();
        let tb = Tensor::new(&[b], &dev).unwrap();
        let td = dice_loss_tensor(&ta, &tb, 1e-6).unwrap().to_scalar::<f64>().unwrap();
        assert!((td - dice_loss_values(&a, &b, 1e-6).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            alpha: 1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }
}
