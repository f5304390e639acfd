//! Sequential agent memory, layered scene memory and the enhanced agent
//! representation.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Attention, Gru, LayerNorm, Linear, Mat, Mlp2, ParamStore, Tape, Var};

/// GRU over the agent-of-interest row of each `F_t`.
#[derive(Clone, Debug)]
pub struct SeqMemory {
    pub gru: Gru,
}

impl SeqMemory {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        SeqMemory {
            gru: Gru::new(store, "memory.seq.gru", dim, dim, rng),
        }
    }

    pub fn update(&self, tape: &mut Tape, f_t: Var, h_prev: Var) -> Result<Var> {
        self.gru.forward(tape, f_t, h_prev)
    }

    /// Runs from a zero state over every step; reads exactly one row per step.
    pub fn run(&self, tape: &mut Tape, seq: &[Var], aoi_node: usize) -> Result<Var> {
        let mut h = tape.constant(Mat::zeros(1, self.gru.hidden));
        for &f in seq {
            let row = tape.gather_rows(f, &[aoi_node])?;
            h = self.update(tape, row, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct SceneMemoryLayer {
    pub attn: Attention,
    pub norm: LayerNorm,
    pub mlp: Option<Mlp2>,
}

#[derive(Clone, Debug)]
pub struct SceneMemory {
    pub g0: Linear,
    pub layers: Vec<SceneMemoryLayer>,
    pub gru: Gru,
}

impl SceneMemory {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        num_layers: usize,
        layer_mlp: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g0 = Linear::new(store, "memory.scene.g0", dim, dim, true, rng);
        let layers = (0..num_layers)
            .map(|l| SceneMemoryLayer {
                attn: Attention::new(store, &format!("memory.scene.layer{l}.attn"), dim, rng),
                norm: LayerNorm::new(store, &format!("memory.scene.layer{l}.norm"), dim, rng),
                mlp: layer_mlp
                    .then(|| Mlp2::new(store, &format!("memory.scene.layer{l}.mlp"), dim, dim, dim, rng)),
            })
            .collect();
        SceneMemory {
            g0,
            layers,
            gru: Gru::new(store, "memory.scene.gru", dim, dim, rng),
        }
    }

    /// `g0`, then per layer full self-attention and layer norm, then max-pool.
    pub fn encode(&self, tape: &mut Tape, f_t: Var) -> Result<Var> {
        let mut m = self.g0.forward(tape, f_t)?;
        for layer in &self.layers {
            let a = layer.attn.self_attend(tape, m, None)?;
            m = layer.norm.forward(tape, a)?;
            if let Some(mlp) = &layer.mlp {
                m = mlp.forward(tape, m)?;
            }
        }
        tape.max_pool_rows(m)
    }

    pub fn update(&self, tape: &mut Tape, m_t: Var, h_prev: Var) -> Result<Var> {
        self.gru.forward(tape, m_t, h_prev)
    }

    pub fn run(&self, tape: &mut Tape, seq: &[Var]) -> Result<Var> {
        let mut h = tape.constant(Mat::zeros(1, self.gru.hidden));
        for &f in seq {
            let m = self.encode(tape, f)?;
            h = self.update(tape, m, h)?;
        }
        Ok(h)
    }
}

/// Cross-attention readouts of the agent of interest over all nodes and
/// over lane nodes.
#[derive(Clone, Debug)]
pub struct AgentEncoder {
    pub all: Attention,
    pub lanes: Attention,
    pub dim: usize,
}

impl AgentEncoder {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AgentEncoder {
            all: Attention::new(store, "memory.agent.all", dim, rng),
            lanes: Attention::new(store, "memory.agent.lanes", dim, rng),
            dim,
        }
    }

    /// `[f_aoi, attend(f_aoi, F_T), attend(f_aoi, lanes of F_T)]`, width `3 d`.
    /// Without lanes the last block is zero.
    pub fn enhanced(&self, tape: &mut Tape, f_last: Var, aoi_node: usize, num_lanes: usize) -> Result<Var> {
        let q = tape.gather_rows(f_last, &[aoi_node])?;
        let all = self.all.cross(tape, q, f_last)?;
        let lane = if num_lanes == 0 {
            tape.constant(Mat::zeros(1, self.dim))
        } else {
            let rows: Vec<usize> = (0..num_lanes).collect();
            let l = tape.gather_rows(f_last, &rows)?;
            self.lanes.cross(tape, q, l)?
        };
        tape.concat_cols(&[q, all, lane])
    }
}
