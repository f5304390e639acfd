//! End-to-end forecaster: context encoding, temporal graph, memories and
//! decoding, with the ablation toggles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{ContextEncoder, PolylineBatch};
use crate::decoder::{check_k, DirectDecoder, GoalDecoder, GoalDecoderDims, GoalVars};
use crate::error::{Error, Result};
use crate::graph::{build_temporal_graph, TemporalGraph, EDGE_RADIUS_M};
use crate::memory::{AgentEncoder, SceneMemory, SeqMemory};
use crate::nn::{Gradients, Mat, ParamStore, Tape, Var};
use crate::objective::{total_loss, LossInputs, LossReport, LossSettings, LossWeights};
use crate::scene::{
    filter_lanes, normalize_scene, vectorize, LaneFilter, NormalizedScene, Point2, RawScene, Transform,
    LANE_RADIUS_M, T_FUT, T_OBS,
};
use crate::temporal::{node_states, TemporalEncoder};

/// Component switches matching the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub tg: bool,
    pub seq_mem: bool,
    pub scene_mem: bool,
    pub goal_pred: bool,
    pub goal_loss: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::FULL
    }
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        tg: true,
        seq_mem: true,
        scene_mem: true,
        goal_pred: true,
        goal_loss: true,
    };
    pub const NONE: Toggles = Toggles {
        tg: false,
        seq_mem: false,
        scene_mem: false,
        goal_pred: false,
        goal_loss: false,
    };
    pub const TG_ONLY: Toggles = Toggles {
        tg: true,
        ..Toggles::NONE
    };
}

/// Which part of the agent representation feeds the agent-side goal head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentGoalInput {
    #[default]
    Composite,
    Enhanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub k: usize,
    /// Meters per model unit for coordinate inputs and outputs.
    pub coord_scale: f64,
    pub subgraph_layers: usize,
    pub scene_memory_layers: usize,
    pub scene_memory_mlp: bool,
    pub reembed_state: bool,
    pub agent_goal_input: AgentGoalInput,
    pub toggles: Toggles,
    pub loss_weights: LossWeights,
    pub lane_filter: LaneFilter,
    pub lane_radius_m: f64,
    pub edge_radius_m: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 128,
            k: 6,
            coord_scale: 10.0,
            subgraph_layers: 3,
            scene_memory_layers: 3,
            scene_memory_mlp: false,
            reembed_state: false,
            agent_goal_input: AgentGoalInput::Composite,
            toggles: Toggles::FULL,
            loss_weights: LossWeights::default(),
            lane_filter: LaneFilter::AnyAgent,
            lane_radius_m: LANE_RADIUS_M,
            edge_radius_m: EDGE_RADIUS_M,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.feature_dim < 2 {
            return bad(format!("feature_dim must be >= 2, got {}", self.feature_dim));
        }
        check_k(self.k)?;
        if self.subgraph_layers == 0 {
            return bad("subgraph_layers must be positive".into());
        }
        for (name, v) in [
            ("coord_scale", self.coord_scale),
            ("lane_radius_m", self.lane_radius_m),
            ("edge_radius_m", self.edge_radius_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let w = self.loss_weights;
        if [w.traj, w.reg, w.cls].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, lowercase hex.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }

    pub fn enhanced_width(&self) -> usize {
        3 * self.feature_dim
    }

    pub fn composite_width(&self) -> usize {
        let d = self.feature_dim;
        3 * d + d * usize::from(self.toggles.seq_mem) + d * usize::from(self.toggles.scene_mem)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything derived from a scene that does not depend on parameters.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene: NormalizedScene,
    pub batch: PolylineBatch,
    pub graph: TemporalGraph,
    /// Node states per observed step.
    pub states: Vec<Mat>,
    /// Ground-truth future in the normalized frame, if known.
    pub gt: Option<Vec<Point2>>,
}

impl PreparedScene {
    pub fn num_lanes(&self) -> usize {
        self.graph.num_lanes
    }

    pub fn scene_id(&self) -> &str {
        &self.scene.scene_id
    }
}

/// Normalizes, filters, vectorizes and builds the graph of a raw scene.
pub fn prepare_scene(raw: &RawScene, cfg: &ModelConfig) -> Result<PreparedScene> {
    raw.validate()?;
    let normalized = normalize_scene(raw)?;
    prepare_normalized(normalized, cfg)
}

/// As [`prepare_scene`] for a scene already in the normalized frame (e.g.
/// after augmentation).
pub fn prepare_normalized(scene: NormalizedScene, cfg: &ModelConfig) -> Result<PreparedScene> {
    let scene = filter_lanes(&scene, cfg.lane_radius_m, cfg.lane_filter);
    let set = vectorize(&scene);
    let batch = PolylineBatch::new(&set, cfg.coord_scale);
    let graph = build_temporal_graph(&scene, cfg.edge_radius_m);
    let states = (0..T_OBS)
        .map(|t| node_states(&scene, graph.num_lanes, t, cfg.coord_scale))
        .collect();
    let gt = (!scene.gt_future.is_empty()).then(|| scene.gt_future.clone());
    Ok(PreparedScene {
        scene,
        batch,
        graph,
        states,
        gt,
    })
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Goal(GoalDecoder),
    Direct(DirectDecoder),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub context: ContextEncoder,
    pub temporal: Option<TemporalEncoder>,
    pub seq: Option<SeqMemory>,
    pub scene: Option<SceneMemory>,
    pub agent: AgentEncoder,
    pub decoder: Decoder,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub context: Var,
    /// `F_0..F_19`; with the temporal graph off every entry is `context`.
    pub features: Vec<Var>,
    pub h_seq: Option<Var>,
    pub h_mem: Option<Var>,
    pub enhanced: Var,
    pub composite: Var,
    pub goals: Option<GoalVars>,
    /// `K x 60` trajectories in meters, normalized frame.
    pub trajectories: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalSet {
    pub proposals: Vec<Point2>,
    pub refined: Vec<Point2>,
    pub scores: Vec<f64>,
}

/// K trajectories in the normalized frame plus the transform back to raw.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastOutput {
    pub scene_id: String,
    pub trajectories: Vec<Vec<Point2>>,
    pub goals: GoalSet,
    pub probabilities: Vec<f64>,
    pub transform: Transform,
}

impl ForecastOutput {
    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    /// Trajectories mapped back to the raw frame.
    pub fn raw_trajectories(&self) -> Vec<Vec<Point2>> {
        self.trajectories
            .iter()
            .map(|t| t.iter().map(|p| self.transform.invert(*p)).collect())
            .collect()
    }
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Model {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.feature_dim;
        let t = cfg.toggles;
        let context = ContextEncoder::new(&mut store, d, cfg.subgraph_layers, &mut rng);
        let temporal = t
            .tg
            .then(|| TemporalEncoder::new(&mut store, d, cfg.reembed_state, &mut rng));
        let seq = t.seq_mem.then(|| SeqMemory::new(&mut store, d, &mut rng));
        let scene = t.scene_mem.then(|| {
            SceneMemory::new(&mut store, d, cfg.scene_memory_layers, cfg.scene_memory_mlp, &mut rng)
        });
        let agent = AgentEncoder::new(&mut store, d, &mut rng);
        let decoder = if t.goal_pred {
            let agent_goal_width = match cfg.agent_goal_input {
                AgentGoalInput::Composite => cfg.composite_width(),
                AgentGoalInput::Enhanced => cfg.enhanced_width(),
            };
            Decoder::Goal(GoalDecoder::new(
                &mut store,
                &GoalDecoderDims {
                    dim: d,
                    k: cfg.k,
                    coord_scale: cfg.coord_scale,
                    enhanced_width: cfg.enhanced_width(),
                    composite_width: cfg.composite_width(),
                    agent_goal_width,
                    scene_memory: t.scene_mem,
                },
                &mut rng,
            )?)
        } else {
            Decoder::Direct(DirectDecoder::new(
                &mut store,
                cfg.composite_width(),
                d,
                cfg.k,
                cfg.coord_scale,
                &mut rng,
            )?)
        };
        Ok((
            Model {
                cfg,
                context,
                temporal,
                seq,
                scene,
                agent,
                decoder,
            },
            store,
        ))
    }

    pub fn prepare(&self, raw: &RawScene) -> Result<PreparedScene> {
        prepare_scene(raw, &self.cfg)
    }

    pub fn forward(&self, tape: &mut Tape, p: &PreparedScene) -> Result<ForwardVars> {
        let context = self.context.forward(tape, &p.batch)?;
        check_finite(tape, context, "context_encoder")?;
        let features = match &self.temporal {
            Some(te) => te.run(tape, context, &p.graph, &p.states)?,
            None => vec![context; T_OBS],
        };
        let f_last = features[T_OBS - 1];
        check_finite(tape, f_last, "temporal_encoder")?;
        let aoi = p.graph.aoi_node;
        let h_seq = match &self.seq {
            Some(m) => Some(m.run(tape, &features, aoi)?),
            None => None,
        };
        let h_mem = match &self.scene {
            Some(m) => Some(m.run(tape, &features)?),
            None => None,
        };
        let enhanced = self.agent.enhanced(tape, f_last, aoi, p.num_lanes())?;
        let mut parts = vec![enhanced];
        parts.extend(h_seq);
        parts.extend(h_mem);
        let composite = tape.concat_cols(&parts)?;
        check_finite(tape, composite, "memory")?;
        let (goals, trajectories) = match &self.decoder {
            Decoder::Goal(dec) => {
                let agent_input = match self.cfg.agent_goal_input {
                    AgentGoalInput::Composite => composite,
                    AgentGoalInput::Enhanced => enhanced,
                };
                let (g, t) = dec.forward(tape, f_last, p.num_lanes(), enhanced, composite, agent_input, h_mem)?;
                (Some(g), t)
            }
            Decoder::Direct(dec) => (None, dec.forward(tape, composite)?),
        };
        check_finite(tape, trajectories, "goal_decoder")?;
        Ok(ForwardVars {
            context,
            features,
            h_seq,
            h_mem,
            enhanced,
            composite,
            goals,
            trajectories,
        })
    }

    pub fn output(&self, tape: &Tape, p: &PreparedScene, fv: &ForwardVars) -> ForecastOutput {
        let tv = tape.value(fv.trajectories);
        let trajectories: Vec<Vec<Point2>> = (0..tv.rows)
            .map(|r| tv.row(r).chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect())
            .collect();
        let k = trajectories.len();
        let goals = match &fv.goals {
            Some(g) => GoalSet {
                proposals: crate::objective::points_of(&tape.value(g.proposals).data),
                refined: crate::objective::points_of(&tape.value(g.refined).data),
                scores: tape.value(g.scores).data.clone(),
            },
            None => {
                let ends: Vec<Point2> = trajectories.iter().map(|t| t[T_FUT - 1]).collect();
                GoalSet {
                    proposals: ends.clone(),
                    refined: ends,
                    scores: vec![1.0 / k as f64; k],
                }
            }
        };
        ForecastOutput {
            scene_id: p.scene_id().to_string(),
            probabilities: goals.scores.clone(),
            trajectories,
            goals,
            transform: p.scene.transform,
        }
    }

    pub fn forecast(&self, store: &ParamStore, p: &PreparedScene) -> Result<ForecastOutput> {
        let mut tape = Tape::new(store);
        let fv = self.forward(&mut tape, p)?;
        Ok(self.output(&tape, p, &fv))
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: self.cfg.loss_weights,
            goal_loss: self.cfg.toggles.goal_loss,
        }
    }

    /// Forward pass plus total loss on `tape`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        p: &PreparedScene,
        fixed_mode: Option<usize>,
    ) -> Result<(Var, LossReport, ForwardVars)> {
        let gt = p
            .gt
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("scene `{}` has no ground truth", p.scene_id())))?;
        let fv = self.forward(tape, p)?;
        let inputs = LossInputs {
            trajectories: fv.trajectories,
            goals: fv.goals.map(|g| (g.refined, g.scores)),
        };
        let (total, report) = total_loss(tape, inputs, gt, self.loss_settings(), fixed_mode)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss of scene `{}`", p.scene_id())));
        }
        Ok((total, report, fv))
    }

    /// Loss value only.
    pub fn loss(&self, store: &ParamStore, p: &PreparedScene, fixed_mode: Option<usize>) -> Result<LossReport> {
        let mut tape = Tape::new(store);
        Ok(self.loss_on_tape(&mut tape, p, fixed_mode)?.1)
    }

    /// Loss and parameter gradients for one scene.
    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        p: &PreparedScene,
        fixed_mode: Option<usize>,
    ) -> Result<(LossReport, Gradients)> {
        let mut tape = Tape::new(store);
        let (total, report, _) = self.loss_on_tape(&mut tape, p, fixed_mode)?;
        Ok((report, tape.backward(total)))
    }
}
