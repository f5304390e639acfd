//! Forecasting over datasets, prediction records and metric reports.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aggregate, scene_metrics, MetricsReport, MISS_THRESHOLD_M};
use crate::model::{ForecastOutput, Model, ModelConfig, PreparedScene};
use crate::nn::{Checkpoint, ParamStore};
use crate::scene::{normalize_scene, Point2, RawScene, Transform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Normalized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModePrediction {
    pub probability: f64,
    pub endpoint: Point2,
    pub trajectory: Vec<Point2>,
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub modes: Vec<ModePrediction>,
    pub frame: Frame,
    /// Raw-to-normalized map, present for raw-frame records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
}

impl PredictionRecord {
    pub fn from_forecast(out: &ForecastOutput, frame: Frame) -> Self {
        let trajectories = match frame {
            Frame::Normalized => out.trajectories.clone(),
            Frame::Raw => out.raw_trajectories(),
        };
        let modes = trajectories
            .into_iter()
            .zip(&out.probabilities)
            .map(|(trajectory, &probability)| ModePrediction {
                probability,
                endpoint: *trajectory.last().expect("trajectory is nonempty"),
                trajectory,
            })
            .collect();
        PredictionRecord {
            scene_id: out.scene_id.clone(),
            k: out.k(),
            modes,
            frame,
            transform: (frame == Frame::Raw).then_some(out.transform),
        }
    }

    pub fn trajectories(&self) -> Vec<Vec<Point2>> {
        self.modes.iter().map(|m| m.trajectory.clone()).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.probability).collect()
    }
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("prediction serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        if rec.modes.len() != rec.k {
            return Err(Error::schema(&rec.scene_id, "modes", format!("{} modes for K={}", rec.modes.len(), rec.k)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// The `k` most probable modes in descending probability (stable), with
/// probabilities renormalized over the kept modes.
pub fn top_k(trajectories: &[Vec<Point2>], probs: &[f64], k: usize) -> Result<(Vec<Vec<Point2>>, Vec<f64>)> {
    if k == 0 || k > trajectories.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot evaluate K={k} with {} predicted modes",
            trajectories.len()
        )));
    }
    if k == trajectories.len() {
        return Ok((trajectories.to_vec(), probs.to_vec()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order.truncate(k);
    let sum: f64 = order.iter().map(|&i| probs[i]).sum();
    let kept = order.iter().map(|&i| trajectories[i].clone()).collect();
    let p = order
        .iter()
        .map(|&i| if sum > 0.0 { probs[i] / sum } else { 1.0 / k as f64 })
        .collect();
    Ok((kept, p))
}

/// Forecasts every prepared scene.
pub fn forecast_all(model: &Model, store: &ParamStore, scenes: &[PreparedScene]) -> Result<Vec<ForecastOutput>> {
    scenes.iter().map(|p| model.forecast(store, p)).collect()
}

fn gt_of(p: &PreparedScene) -> Result<&[Point2]> {
    p.gt
        .as_deref()
        .ok_or_else(|| Error::schema(p.scene_id(), "gt_future", "required for evaluation"))
}

/// Metrics of `k` modes per scene, in the normalized frame.
pub fn evaluate_prepared(
    model: &Model,
    store: &ParamStore,
    scenes: &[PreparedScene],
    k: usize,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(scenes.len());
    for p in scenes {
        let out = model.forecast(store, p)?;
        let (trajs, probs) = top_k(&out.trajectories, &out.probabilities, k)?;
        rows.push(scene_metrics(p.scene_id(), &trajs, &probs, gt_of(p)?, MISS_THRESHOLD_M)?);
    }
    aggregate(rows, k, MISS_THRESHOLD_M)
}

/// Metrics from prediction records matched to scenes by id.
pub fn evaluate_records(records: &[PredictionRecord], scenes: &[RawScene], k: usize) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let rec = records
            .iter()
            .find(|r| r.scene_id == scene.scene_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for scene `{}`", scene.scene_id)))?;
        let gt: Vec<Point2> = match rec.frame {
            Frame::Raw => scene.gt_future.clone(),
            Frame::Normalized => normalize_scene(scene)?.gt_future.clone(),
        };
        if gt.is_empty() {
            return Err(Error::schema(&scene.scene_id, "gt_future", "required for evaluation"));
        }
        let (trajs, probs) = top_k(&rec.trajectories(), &rec.probabilities(), k)?;
        rows.push(scene_metrics(&scene.scene_id, &trajs, &probs, &gt, MISS_THRESHOLD_M)?);
    }
    aggregate(rows, k, MISS_THRESHOLD_M)
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from a checkpoint. With `expected`, the configuration
/// stored in the checkpoint must hash identically.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg: ModelConfig = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("{}: bad configuration: {e}", path.display())))?;
    if cfg.hash_bytes() != ckpt.config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: stored configuration does not match its hash",
            path.display()
        )));
    }
    if let Some(exp) = expected {
        if exp.hash_bytes() != ckpt.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint configuration {} differs from requested {}",
                path.display(),
                cfg.hash_hex(),
                exp.hash_hex()
            )));
        }
    }
    let (model, mut store) = Model::new(cfg, 0)?;
    ckpt.restore_into(&mut store)?;
    Ok((model, store))
}

pub fn save_model(model: &Model, store: &ParamStore, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&model.cfg).expect("config serializes");
    Checkpoint::new(model.cfg.hash_bytes(), json, store).save(path)
}
