//! Toggle grid over training runs and seeds.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::TrainConfig;
use super::train::{train, TrainOptions, ValSummary};
use crate::error::{Error, Result};
use crate::model::Toggles;
use crate::scene::RawScene;

const fn row(tg: bool, seq_mem: bool, scene_mem: bool, goal_pred: bool, goal_loss: bool) -> Toggles {
    Toggles {
        tg,
        seq_mem,
        scene_mem,
        goal_pred,
        goal_loss,
    }
}

/// The seven component-ablation rows, baseline first.
pub const TABLE_ROWS: [(&str, Toggles); 7] = [
    ("no_tg", row(false, false, false, false, false)),
    ("tg", row(true, false, false, false, false)),
    ("tg_seq", row(true, true, false, false, false)),
    ("tg_scene", row(true, false, true, false, false)),
    ("tg_seq_scene", row(true, true, true, false, false)),
    ("tg_seq_scene_goal", row(true, true, true, true, false)),
    ("full", row(true, true, true, true, true)),
];

pub fn variant(name: &str) -> Result<Toggles> {
    TABLE_ROWS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = TABLE_ROWS.iter().map(|(n, _)| *n).collect();
            Error::InvalidArgument(format!("unknown variant `{name}`; expected one of {}", names.join(", ")))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub num_parameters: usize,
    /// Validation metrics of the epoch selected by b-minFDE.
    pub val: ValSummary,
    pub best_epoch: usize,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub median: ValSummary,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every variant with every seed; the base configuration supplies
/// everything except toggles and seed.
pub fn ablate(
    base: &TrainConfig,
    variants: &[(&str, Toggles)],
    seeds: &[u64],
    train_set: &[RawScene],
    val_set: &[RawScene],
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<Vec<AblationRun>> {
    if val_set.is_empty() {
        return Err(Error::Empty("ablation validation set"));
    }
    let mut runs = Vec::new();
    for &(name, toggles) in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.toggles = toggles;
            cfg.seed = Some(seed);
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("{name}_seed{seed}"))),
                verbose,
            };
            let out = train(&cfg, train_set, val_set, &opts)?;
            let best = out.record.best.as_ref().expect("validation ran");
            let val = out.record.epochs[best.epoch - 1].val.expect("best epoch was validated");
            if verbose {
                eprintln!("{name} seed {seed}: minFDE {:.4} b-minFDE {:.4}", val.min_fde, val.b_min_fde);
            }
            runs.push(AblationRun {
                variant: name.to_string(),
                seed,
                num_parameters: out.record.num_parameters,
                val,
                best_epoch: best.epoch,
                wall_clock_s: out.record.wall_clock_s,
            });
        }
    }
    Ok(runs)
}

/// Per-variant medians over seeds, in first-appearance order.
pub fn summarize(runs: &[AblationRun]) -> Vec<VariantSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == n).collect();
            let m = |f: fn(&ValSummary) -> f64| median(&rs.iter().map(|r| f(&r.val)).collect::<Vec<_>>());
            VariantSummary {
                variant: n.to_string(),
                median: ValSummary {
                    min_ade: m(|v| v.min_ade),
                    min_fde: m(|v| v.min_fde),
                    miss_rate: m(|v| v.miss_rate),
                    b_min_fde: m(|v| v.b_min_fde),
                },
            }
        })
        .collect()
}

pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut s = String::from("variant,seed,params,best_epoch,min_ade,min_fde,miss_rate,b_min_fde,wall_clock_s\n");
    for r in runs {
        writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.1}",
            r.variant, r.seed, r.num_parameters, r.best_epoch, r.val.min_ade, r.val.min_fde, r.val.miss_rate, r.val.b_min_fde, r.wall_clock_s
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rows_cover_baseline_and_full() {
        assert_eq!(variant("no_tg").unwrap(), Toggles::NONE);
        assert_eq!(variant("tg").unwrap(), Toggles::TG_ONLY);
        assert_eq!(variant("full").unwrap(), Toggles::FULL);
        assert!(variant("nope").is_err());
    }
}
