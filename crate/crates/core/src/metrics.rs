//! minADE, minFDE, miss rate and Brier-minFDE over K-mode forecasts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Point2;

/// Endpoint distance at or below this counts as a hit.
pub const MISS_THRESHOLD_M: f64 = 2.0;

fn check(preds: &[Vec<Point2>], gt: &[Point2]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("metrics over modes"));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground truth"));
    }
    if let Some(p) = preds.iter().find(|p| p.len() != gt.len()) {
        return Err(Error::shape(
            "metrics",
            format!("mode of length {} vs ground truth of length {}", p.len(), gt.len()),
        ));
    }
    Ok(())
}

fn endpoint_dist(pred: &[Point2], gt: &[Point2]) -> f64 {
    pred[pred.len() - 1].dist(gt[gt.len() - 1])
}

/// Smallest endpoint error and the mode achieving it (lowest index on ties).
pub fn min_fde(preds: &[Vec<Point2>], gt: &[Point2]) -> Result<(f64, usize)> {
    check(preds, gt)?;
    let mut best = (endpoint_dist(&preds[0], gt), 0);
    for (k, p) in preds.iter().enumerate().skip(1) {
        let d = endpoint_dist(p, gt);
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(best)
}

pub fn ade(pred: &[Point2], gt: &[Point2]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| p.dist(*g)).sum::<f64>() / gt.len() as f64
}

/// ADE of the endpoint-selected mode.
pub fn min_ade(preds: &[Vec<Point2>], gt: &[Point2]) -> Result<f64> {
    let (_, k) = min_fde(preds, gt)?;
    Ok(ade(&preds[k], gt))
}

/// 1 when no endpoint lies within `threshold`, else 0.
pub fn miss(preds: &[Vec<Point2>], gt: &[Point2], threshold: f64) -> Result<u8> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("miss threshold {threshold} must be > 0")));
    }
    check(preds, gt)?;
    Ok(u8::from(preds.iter().all(|p| endpoint_dist(p, gt) > threshold)))
}

pub fn check_simplex(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "probabilities must be a simplex point (sum {sum})"
        )));
    }
    Ok(())
}

pub fn brier_min_fde(preds: &[Vec<Point2>], probs: &[f64], gt: &[Point2]) -> Result<f64> {
    if probs.len() != preds.len() {
        return Err(Error::shape(
            "brier_min_fde",
            format!("{} probabilities for {} modes", probs.len(), preds.len()),
        ));
    }
    check_simplex(probs)?;
    let (fde, k) = min_fde(preds, gt)?;
    Ok(fde + (1.0 - probs[k]).powi(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: u8,
    pub b_min_fde: f64,
}

pub fn scene_metrics(
    scene_id: &str,
    preds: &[Vec<Point2>],
    probs: &[f64],
    gt: &[Point2],
    threshold: f64,
) -> Result<SceneMetrics> {
    let (fde, _) = min_fde(preds, gt)?;
    Ok(SceneMetrics {
        scene_id: scene_id.to_string(),
        min_ade: min_ade(preds, gt)?,
        min_fde: fde,
        miss: miss(preds, gt, threshold)?,
        b_min_fde: brier_min_fde(preds, probs, gt)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub miss_threshold: f64,
    pub scenes: Vec<SceneMetrics>,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub b_min_fde: f64,
}

/// Arithmetic means in scene order.
pub fn aggregate(scenes: Vec<SceneMetrics>, k: usize, miss_threshold: f64) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("metrics aggregation"));
    }
    let n = scenes.len() as f64;
    let mean = |f: fn(&SceneMetrics) -> f64| scenes.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        k,
        miss_threshold,
        min_ade: mean(|s| s.min_ade),
        min_fde: mean(|s| s.min_fde),
        miss_rate: mean(|s| f64::from(s.miss)),
        b_min_fde: mean(|s| s.b_min_fde),
        scenes,
    })
}

impl MetricsReport {
    /// Per-scene rows followed by a `MEAN` footer row.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# k={} miss_threshold={}\nscene_id,min_ade,min_fde,miss,b_min_fde\n",
            self.k, self.miss_threshold
        );
        for s in &self.scenes {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{},{:.17e}\n",
                s.scene_id, s.min_ade, s.min_fde, s.miss, s.b_min_fde
            ));
        }
        out.push_str(&format!(
            "MEAN,{:.17e},{:.17e},{:.17e},{:.17e}\n",
            self.min_ade, self.min_fde, self.miss_rate, self.b_min_fde
        ));
        out
    }
}
