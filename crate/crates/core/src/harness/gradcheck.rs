//! Finite-difference check of the full training loss on micro-scenes.

use serde::Serialize;

use crate::datagen::micro_scene;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{grad_check, grad_check_sampled};
use crate::scene::noise_offsets;

#[derive(Clone, Debug)]
pub struct GradCheckSettings {
    pub model: ModelConfig,
    pub scenes: usize,
    pub eps: f64,
    /// Check at most this many coordinates per block; `None` checks all.
    pub per_block: Option<usize>,
    pub seed: u64,
    /// Standard deviation of the noise added to every parameter so the
    /// check runs away from zero-initialized kinks.
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneGradCheck {
    pub scene_id: String,
    pub max_rel_error: f64,
    pub worst_block: Option<String>,
    pub coordinates: usize,
    pub blocks: usize,
}

/// Parameters are jittered, then the winning mode is frozen at the unperturbed parameters so the loss is
/// smooth in every probed direction.
pub fn run_grad_check(settings: &GradCheckSettings) -> Result<Vec<SceneGradCheck>> {
    let mut out = Vec::with_capacity(settings.scenes);
    for i in 0..settings.scenes as u64 {
        let seed = settings.seed.wrapping_add(i);
        let (model, mut store) = Model::new(settings.model.clone(), seed)?;
        let offsets = noise_offsets(store.num_scalars(), settings.jitter, seed ^ 0x5eed);
        let mut it = offsets.into_iter();
        for id in store.ids().collect::<Vec<_>>() {
            for v in &mut store.block_mut(id).data {
                *v += it.next().expect("one offset per scalar");
            }
        }
        let p = model.prepare(&micro_scene(seed))?;
        let (report, _) = model.loss_and_grad(&store, &p, None)?;
        let mode = Some(report.best_mode_index);
        let (_, grads) = model.loss_and_grad(&store, &p, mode)?;
        let loss = |s: &_| model.loss(s, &p, mode).map(|r| r.total).unwrap_or(f64::NAN);
        let r = match settings.per_block {
            None => grad_check(loss, &store, &grads.params, settings.eps),
            Some(n) => grad_check_sampled(loss, &store, &grads.params, settings.eps, n, seed),
        };
        out.push(SceneGradCheck {
            scene_id: p.scene_id().to_string(),
            max_rel_error: r.max_rel_error,
            worst_block: r.worst.map(|w| w.0),
            coordinates: r.coordinates,
            blocks: store.len(),
        });
    }
    Ok(out)
}
