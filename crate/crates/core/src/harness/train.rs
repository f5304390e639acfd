//! Seeded mini-batch training with Adam and a step learning-rate schedule.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate_prepared, save_model};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{prepare_normalized, Model, PreparedScene};
use crate::nn::{adam_step, AdamState, Checkpoint, ParamGrads, ParamStore};
use crate::scene::{augment_noise, augment_scale, normalize_scene, NormalizedScene, RawScene, NOISE_SIGMA_M, SCALE_RANGE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean total loss.
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSummary {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub b_min_fde: f64,
}

impl From<&MetricsReport> for ValSummary {
    fn from(r: &MetricsReport) -> Self {
        ValSummary {
            min_ade: r.min_ade,
            min_fde: r.min_fde,
            miss_rate: r.miss_rate,
            b_min_fde: r.b_min_fde,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_traj_loss: f64,
    pub mean_goal_reg_loss: f64,
    pub mean_goal_cls_loss: f64,
    pub val: Option<ValSummary>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub b_min_fde: f64,
    pub path: Option<PathBuf>,
}

/// Append-only log of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub num_parameters: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best: Option<BestCheckpoint>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub const FILE: &'static str = "run_record.json";

    pub fn loss_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("run record serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub record: RunRecord,
}

/// Where to write artifacts and whether to report progress on stderr.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

enum TrainSet {
    Fixed(Vec<PreparedScene>),
    Augmented(Vec<NormalizedScene>),
}

fn prepare_all(model: &Model, scenes: &[RawScene]) -> Result<Vec<PreparedScene>> {
    scenes.iter().map(|s| model.prepare(s)).collect()
}

/// Trains on `train`, validating on `val` (may be empty).
pub fn train(cfg: &TrainConfig, train: &[RawScene], val: &[RawScene], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if train.iter().any(|s| s.gt_future.is_empty()) {
        return Err(Error::InvalidArgument("every training scene needs gt_future".into()));
    }
    let start = Instant::now();
    let (model, mut store) = Model::new(cfg.model.clone(), seed)?;
    if let Some(init) = &cfg.init_checkpoint {
        let copied = Checkpoint::load(init)?.restore_matching(&mut store)?;
        if opts.verbose {
            eprintln!("warm start: {copied} blocks from {}", init.display());
        }
    }
    let ckpt_dir = match &opts.out_dir {
        Some(d) => {
            let c = d.join("checkpoints");
            fs::create_dir_all(&c).map_err(|e| Error::io(&c, e))?;
            Some(c)
        }
        None => None,
    };
    let set = if cfg.augment {
        TrainSet::Augmented(
            train
                .iter()
                .map(|s| {
                    s.validate()?;
                    normalize_scene(s)
                })
                .collect::<Result<_>>()?,
        )
    } else {
        TrainSet::Fixed(prepare_all(&model, train)?)
    };
    let val_prepared = prepare_all(&model, val)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(&store);
    let mut record = RunRecord {
        config_hash: model.cfg.hash_hex(),
        seed,
        train_scenes: train.len(),
        val_scenes: val.len(),
        num_parameters: store.num_scalars(),
        steps: Vec::new(),
        epochs: Vec::new(),
        best: None,
        wall_clock_s: 0.0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let mut grads = ParamGrads::zeros_like(&store);
            let mut batch_loss = 0.0;
            for &i in batch {
                let prepared;
                let p = match &set {
                    TrainSet::Fixed(v) => &v[i],
                    TrainSet::Augmented(v) => {
                        let s = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
                        let noise_seed: u64 = rng.random();
                        let scaled = augment_scale(&v[i], s)?;
                        prepared = prepare_normalized(augment_noise(&scaled, NOISE_SIGMA_M, noise_seed)?, &model.cfg)?;
                        &prepared
                    }
                };
                let (report, g) = model.loss_and_grad(&store, p, None).map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} (scene `{}`, step {})", p.scene_id(), step + 1))
                    }
                    other => other,
                })?;
                if !report.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} at scene `{}`, step {}",
                        report.total,
                        p.scene_id(),
                        step + 1
                    )));
                }
                grads.accumulate(&g.params);
                batch_loss += report.total;
                sums[0] += report.total;
                sums[1] += report.traj_loss;
                sums[2] += report.goal_reg_loss;
                sums[3] += report.goal_cls_loss;
                seen += 1;
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            adam_step(&mut store, &grads, &mut adam, lr)?;
            step += 1;
            epoch_steps += 1;
            record.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: batch_loss / n,
            });
        }
        if epoch_steps == 0 {
            break 'epochs;
        }
        let last = epoch == cfg.epochs || cfg.max_steps.is_some_and(|m| step >= m);
        let val_summary = if !val_prepared.is_empty() && (epoch % cfg.validate_every == 0 || last) {
            Some(ValSummary::from(&evaluate_prepared(&model, &store, &val_prepared, model.cfg.k)?))
        } else {
            None
        };
        let ckpt_path = match &ckpt_dir {
            Some(dir) => {
                let p = dir.join(format!("epoch_{epoch:03}.ckpt"));
                save_model(&model, &store, &p)?;
                Some(p)
            }
            None => None,
        };
        if let Some(v) = val_summary {
            if record.best.as_ref().is_none_or(|b| v.b_min_fde < b.b_min_fde) {
                let path = match &ckpt_dir {
                    Some(dir) => {
                        let p = dir.join("best.ckpt");
                        save_model(&model, &store, &p)?;
                        Some(p)
                    }
                    None => None,
                };
                record.best = Some(BestCheckpoint {
                    epoch,
                    b_min_fde: v.b_min_fde,
                    path,
                });
            }
        }
        let m = seen as f64;
        let er = EpochRecord {
            epoch,
            lr,
            steps: epoch_steps,
            mean_loss: sums[0] / m,
            mean_traj_loss: sums[1] / m,
            mean_goal_reg_loss: sums[2] / m,
            mean_goal_cls_loss: sums[3] / m,
            val: val_summary,
            checkpoint: ckpt_path,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            let v = er
                .val
                .map(|v| format!(" val minADE {:.3} minFDE {:.3} MR {:.3} b-minFDE {:.3}", v.min_ade, v.min_fde, v.miss_rate, v.b_min_fde))
                .unwrap_or_default();
            eprintln!("epoch {epoch:3} lr {lr:.1e} loss {:.4}{v}", er.mean_loss);
        }
        record.epochs.push(er);
        record.wall_clock_s = start.elapsed().as_secs_f64();
        if let Some(d) = &opts.out_dir {
            record.save(&d.join(RunRecord::FILE))?;
        }
        if last {
            break;
        }
    }
    Ok(TrainOutcome { model, store, record })
}
