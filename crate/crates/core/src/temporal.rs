//! Masked attention over the per-step graphs with cosine time encoding.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::TemporalGraph;
use crate::nn::{Attention, AttentionMask, Init, Mat, Mlp2, ParamId, ParamStore, Tape, Var};
use crate::scene::{NormalizedScene, DT, T_OBS};

/// Per-node state fed to the state embedding: scaled position and a presence flag.
pub const STATE_WIDTH: usize = 3;

/// `cos(omega * t * dt + phase)` entrywise.
pub fn time_encode(t: usize, dt: f64, omega: &[f64], phase: &[f64]) -> Vec<f64> {
    let s = t as f64 * dt;
    omega.iter().zip(phase).map(|(w, b)| (w * s + b).cos()).collect()
}

/// Learnable frequencies and phases.
#[derive(Clone, Copy, Debug)]
pub struct TimeEncoder {
    pub omega: ParamId,
    pub phase: ParamId,
}

impl TimeEncoder {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let omega = store.add("temporal.time.omega", 1, dim, Init::Zeros, rng);
        let freqs: Vec<f64> = (0..dim)
            .map(|i| 2.0 * PI * 10f64.powf(-3.0 * i as f64 / dim as f64))
            .collect();
        store.set(omega, &freqs).expect("frequency count matches dim");
        let phase = store.add("temporal.time.phase", 1, dim, Init::Zeros, rng);
        TimeEncoder { omega, phase }
    }

    pub fn forward(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        let w = tape.param(self.omega);
        let b = tape.param(self.phase);
        let wt = tape.affine_scalar(w, t as f64 * DT, 0.0);
        let arg = tape.add(wt, b)?;
        Ok(tape.cos(arg))
    }
}

/// Node states at step `t`: agents present at `t` get `(x, y) / scale, 1`;
/// lanes and absent agents get zeros.
pub fn node_states(scene: &NormalizedScene, num_lanes: usize, t: usize, coord_scale: f64) -> Mat {
    let n = num_lanes + scene.agents.len();
    let mut m = Mat::zeros(n, STATE_WIDTH);
    for (i, a) in scene.agents.iter().enumerate() {
        if let Some(p) = a.position_at(t) {
            m.row_mut(num_lanes + i)
                .copy_from_slice(&[p.x / coord_scale, p.y / coord_scale, 1.0]);
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub time: TimeEncoder,
    pub attn: Attention,
    pub g1: Mlp2,
    pub state_embed: Mlp2,
    /// Adds the embedding of each step's node state before fusion.
    pub reembed_state: bool,
}

impl TemporalEncoder {
    pub fn new(store: &mut ParamStore, dim: usize, reembed_state: bool, rng: &mut ChaCha8Rng) -> Self {
        TemporalEncoder {
            time: TimeEncoder::new(store, dim, rng),
            attn: Attention::new(store, "temporal.attn", dim, rng),
            g1: Mlp2::new(store, "temporal.g1", dim, dim, dim, rng),
            state_embed: Mlp2::new(store, "temporal.state_embed", STATE_WIDTH, dim, dim, rng),
            reembed_state,
        }
    }

    /// Context features plus the embedding of each node's step-0 state.
    pub fn init_node_features(&self, tape: &mut Tape, ctx: Var, states0: &Mat) -> Result<Var> {
        if tape.shape(ctx).0 != states0.rows {
            return Err(Error::shape(
                "init_node_features",
                format!("{} context rows vs {} node states", tape.shape(ctx).0, states0.rows),
            ));
        }
        let s = tape.constant(states0.clone());
        let e = self.state_embed.forward(tape, s)?;
        tape.add(ctx, e)
    }

    /// Masked attention over the previous step's features.
    pub fn temporal_step(&self, tape: &mut Tape, f_prev: Var, mask: &AttentionMask) -> Result<Var> {
        self.attn.self_attend(tape, f_prev, Some(mask))
    }

    /// `g1(f_hat + time_encode(t))` per row.
    pub fn fuse_time(&self, tape: &mut Tape, f_hat: Var, t: usize) -> Result<Var> {
        let phi = self.time.forward(tape, t)?;
        let x = tape.add_row(f_hat, phi)?;
        self.g1.forward(tape, x)
    }

    /// Feature matrices `F_0..F_19`. Rows of nodes absent at a step keep
    /// their previous value.
    pub fn run(
        &self,
        tape: &mut Tape,
        ctx: Var,
        graph: &TemporalGraph,
        states: &[Mat],
    ) -> Result<Vec<Var>> {
        let mut seq = Vec::with_capacity(T_OBS);
        seq.push(self.init_node_features(tape, ctx, &states[0])?);
        for t in 1..T_OBS {
            let prev = seq[t - 1];
            let mask = graph.mask_ref(t)?;
            let f_hat = self.temporal_step(tape, prev, mask)?;
            let f_in = if self.reembed_state {
                let s = tape.constant(states[t].clone());
                let e = self.state_embed.forward(tape, s)?;
                tape.add(f_hat, e)?
            } else {
                f_hat
            };
            let fused = self.fuse_time(tape, f_in, t)?;
            seq.push(tape.select_rows(fused, prev, &mask.present)?);
        }
        Ok(seq)
    }
}
