//! Winner-takes-all trajectory loss, goal regression and goal scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::scene::Point2;

pub use crate::nn::tape::smooth_l1;

/// Floor applied inside the log of the scoring loss.
pub const CLS_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub traj: f64,
    pub reg: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            traj: 1.0,
            reg: 1.0,
            cls: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub traj_loss: f64,
    pub goal_reg_loss: f64,
    pub goal_cls_loss: f64,
    pub total: f64,
    pub best_mode_index: usize,
    pub closest_goal_index: usize,
}

/// Index of the point nearest `target`; ties go to the lowest index.
pub fn closest_goal_index(points: &[Point2], target: Point2) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::Empty("closest_goal_index"));
    }
    let mut best = (points[0].dist(target), 0);
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = p.dist(target);
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// `(mean smooth-L1 of refined[closest] - gt_end, -ln scores[closest])`.
pub fn goal_losses(refined: &[Point2], scores: &[f64], gt_end: Point2) -> Result<(f64, f64)> {
    let c = closest_goal_index(refined, gt_end)?;
    let r = refined[c];
    let reg = 0.5 * (smooth_l1(r.x - gt_end.x) + smooth_l1(r.y - gt_end.y));
    let cls = -scores[c].max(CLS_LOG_FLOOR).ln();
    Ok((reg, cls))
}

/// Mean smooth-L1 over all coordinates of `modes[best]`, where `best` is the
/// goal closest to the ground-truth endpoint.
pub fn trajectory_loss(modes: &[Vec<Point2>], goals: &[Point2], gt: &[Point2]) -> Result<f64> {
    let end = *gt.last().ok_or(Error::Empty("ground truth"))?;
    let best = closest_goal_index(goals, end)?;
    let m = &modes[best];
    if m.len() != gt.len() {
        return Err(Error::shape("trajectory_loss", "mode length differs from ground truth"));
    }
    let total: f64 = m
        .iter()
        .zip(gt)
        .map(|(p, g)| smooth_l1(p.x - g.x) + smooth_l1(p.y - g.y))
        .sum();
    Ok(total / (2 * gt.len()) as f64)
}

pub fn points_of(values: &[f64]) -> Vec<Point2> {
    values.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect()
}

/// What the loss reads from a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    /// `K x 60` trajectories.
    pub trajectories: Var,
    /// `K x 2` refined goals and `1 x K` scores; `None` without goal prediction.
    pub goals: Option<(Var, Var)>,
}

/// Whether the goal regression term enters the total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub goal_loss: bool,
}

/// Builds the total loss on the tape. The selected index is a constant;
/// `fixed_mode` overrides it.
pub fn total_loss(
    tape: &mut Tape,
    inputs: LossInputs,
    gt: &[Point2],
    settings: LossSettings,
    fixed_mode: Option<usize>,
) -> Result<(Var, LossReport)> {
    let end = *gt.last().ok_or(Error::Empty("ground truth"))?;
    let target: Vec<f64> = gt.iter().flat_map(|p| [p.x, p.y]).collect();
    let w = settings.weights;
    match inputs.goals {
        Some((refined, scores)) => {
            let goals = points_of(&tape.value(refined).data);
            let idx = match fixed_mode {
                Some(i) => i,
                None => closest_goal_index(&goals, end)?,
            };
            let traj_row = tape.gather_rows(inputs.trajectories, &[idx])?;
            let traj = tape.smooth_l1_mean(traj_row, &target)?;
            let goal_row = tape.gather_rows(refined, &[idx])?;
            let reg = tape.smooth_l1_mean(goal_row, &[end.x, end.y])?;
            let cls = tape.neg_log_at(scores, idx, CLS_LOG_FLOOR)?;
            let mut terms = vec![(traj, w.traj), (cls, w.cls)];
            if settings.goal_loss {
                terms.push((reg, w.reg));
            }
            let total = tape.weighted_sum(&terms)?;
            let scalar = |t: &Tape, v: Var| t.value(v).data[0];
            let report = LossReport {
                traj_loss: scalar(tape, traj),
                goal_reg_loss: if settings.goal_loss { scalar(tape, reg) } else { 0.0 },
                goal_cls_loss: scalar(tape, cls),
                total: scalar(tape, total),
                best_mode_index: idx,
                closest_goal_index: idx,
            };
            Ok((total, report))
        }
        None => {
            let tv = tape.value(inputs.trajectories);
            let ends: Vec<Point2> = (0..tv.rows)
                .map(|r| {
                    let row = tv.row(r);
                    Point2::new(row[row.len() - 2], row[row.len() - 1])
                })
                .collect();
            let idx = match fixed_mode {
                Some(i) => i,
                None => closest_goal_index(&ends, end)?,
            };
            let traj_row = tape.gather_rows(inputs.trajectories, &[idx])?;
            let traj = tape.smooth_l1_mean(traj_row, &target)?;
            let total = tape.weighted_sum(&[(traj, w.traj)])?;
            let report = LossReport {
                traj_loss: tape.value(traj).data[0],
                goal_reg_loss: 0.0,
                goal_cls_loss: 0.0,
                total: tape.value(total).data[0],
                best_mode_index: idx,
                closest_goal_index: idx,
            };
            Ok((total, report))
        }
    }
}
