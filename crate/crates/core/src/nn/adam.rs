use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place.
///
/// A non-finite gradient aborts before any parameter is touched.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} blocks, {} gradients, {} moments",
                store.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for id in store.ids() {
        if grads.block(id).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter block `{}`",
                store.block(id).name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for id in store.ids() {
        let g = grads.block(id);
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let p = &mut store.block_mut(id).data;
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
