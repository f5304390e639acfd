//! Goal proposal, refinement, scoring and goal-conditioned trajectories,
//! plus the direct multi-trajectory regression head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Attention, Linear, Mat, Mlp2, ParamStore, Tape, Var};
use crate::scene::T_FUT;

/// Values per trajectory (30 steps x 2 coordinates).
pub const TRAJ_WIDTH: usize = 2 * T_FUT;

pub fn check_k(k: usize) -> Result<()> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::InvalidArgument(format!("K must be even and at least 2, got {k}")));
    }
    Ok(())
}

/// Three affine layers with ReLU between, on `[point / scale, enhanced]`.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub layers: [Linear; 3],
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, enhanced_width: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        PointEncoder {
            layers: [
                Linear::new(store, "decoder.point.fc1", 2 + enhanced_width, dim, true, rng),
                Linear::new(store, "decoder.point.fc2", dim, dim, true, rng),
                Linear::new(store, "decoder.point.fc3", dim, dim, true, rng),
            ],
        }
    }

    /// `points` is `K x 2` in scaled units; `enhanced` is `1 x width`.
    pub fn forward(&self, tape: &mut Tape, points: Var, enhanced: Var) -> Result<Var> {
        let k = tape.shape(points).0;
        let rep = tape.gather_rows(enhanced, &vec![0; k])?;
        let mut x = tape.concat_cols(&[points, rep])?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < 2 {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// Vars produced by the goal stage.
#[derive(Clone, Copy, Debug)]
pub struct GoalVars {
    pub map_feature: Var,
    /// `K x 2` in meters.
    pub proposals: Var,
    pub refined: Var,
    /// `1 x K` logits and softmax scores.
    pub logits: Var,
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct GoalDecoder {
    pub k: usize,
    pub coord_scale: f64,
    pub agg: Option<Linear>,
    pub g2: Mlp2,
    pub agent_head: Mlp2,
    pub map_head: Mlp2,
    pub points: PointEncoder,
    pub scene_attn: Attention,
    pub offset_head: Linear,
    pub logit_head: Linear,
    pub traj_head: Mlp2,
}

pub struct GoalDecoderDims {
    pub dim: usize,
    pub k: usize,
    pub coord_scale: f64,
    pub enhanced_width: usize,
    pub composite_width: usize,
    pub agent_goal_width: usize,
    pub scene_memory: bool,
}

impl GoalDecoder {
    pub fn new(store: &mut ParamStore, dims: &GoalDecoderDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_k(dims.k)?;
        let d = dims.dim;
        let agg = dims
            .scene_memory
            .then(|| Linear::new(store, "decoder.agg", d, d, true, rng));
        let g2_in = if dims.scene_memory { 2 * d } else { d };
        Ok(GoalDecoder {
            k: dims.k,
            coord_scale: dims.coord_scale,
            agg,
            g2: Mlp2::new(store, "decoder.g2", g2_in, d, d, rng),
            agent_head: Mlp2::new(store, "decoder.agent_head", dims.agent_goal_width, d, dims.k, rng),
            map_head: Mlp2::new(store, "decoder.map_head", d, d, dims.k, rng),
            points: PointEncoder::new(store, dims.enhanced_width, d, rng),
            scene_attn: Attention::new(store, "decoder.scene_attn", d, rng),
            offset_head: Linear::new(store, "decoder.offset_head", 2 * d, 2, true, rng),
            logit_head: Linear::new(store, "decoder.logit_head", 2 * d, 1, true, rng),
            traj_head: Mlp2::new(store, "decoder.traj_head", dims.composite_width + d, d, TRAJ_WIDTH, rng),
        })
    }

    /// `g2([max-pool of lane rows, agg(h_mem)])`; no lanes pools to zero.
    pub fn map_feature(&self, tape: &mut Tape, f_last: Var, num_lanes: usize, h_mem: Option<Var>) -> Result<Var> {
        let d = tape.shape(f_last).1;
        let pooled = if num_lanes == 0 {
            tape.constant(Mat::zeros(1, d))
        } else {
            let rows: Vec<usize> = (0..num_lanes).collect();
            let lanes = tape.gather_rows(f_last, &rows)?;
            tape.max_pool_rows(lanes)?
        };
        let input = match (&self.agg, h_mem) {
            (Some(agg), Some(h)) => {
                let a = agg.forward(tape, h)?;
                tape.concat_cols(&[pooled, a])?
            }
            (None, None) => pooled,
            _ => {
                return Err(Error::InvalidArgument(
                    "scene memory state must be supplied exactly when the decoder aggregates it".into(),
                ))
            }
        };
        self.g2.forward(tape, input)
    }

    /// `K x 2` proposals in meters, agent half first.
    pub fn propose_goals(&self, tape: &mut Tape, agent_input: Var, map_f: Var) -> Result<Var> {
        let half = self.k / 2;
        let a = self.agent_head.forward(tape, agent_input)?;
        let a = tape.reshape(a, half, 2)?;
        let m = self.map_head.forward(tape, map_f)?;
        let m = tape.reshape(m, half, 2)?;
        let p = tape.concat_rows(&[a, m])?;
        Ok(tape.affine_scalar(p, self.coord_scale, 0.0))
    }

    pub fn encode_goal_points(&self, tape: &mut Tape, points_m: Var, enhanced: Var) -> Result<Var> {
        let scaled = tape.affine_scalar(points_m, 1.0 / self.coord_scale, 0.0);
        self.points.forward(tape, scaled, enhanced)
    }

    /// Cross-attends point features over `F_T`; offset and logit heads read
    /// `[point feature, attended context]`.
    pub fn refine_and_score(
        &self,
        tape: &mut Tape,
        proposals: Var,
        point_feats: Var,
        f_last: Var,
    ) -> Result<(Var, Var, Var)> {
        let ctx = self.scene_attn.cross(tape, point_feats, f_last)?;
        let x = tape.concat_cols(&[point_feats, ctx])?;
        let off = self.offset_head.forward(tape, x)?;
        let off = tape.affine_scalar(off, self.coord_scale, 0.0);
        let refined = tape.add(proposals, off)?;
        let logits = self.logit_head.forward(tape, x)?;
        let logits = tape.reshape(logits, 1, self.k)?;
        let scores = tape.softmax_rows(logits);
        Ok((refined, logits, scores))
    }

    /// `K x 60` trajectories in meters from `[composite, goal feature]`.
    pub fn complete_trajectories(&self, tape: &mut Tape, composite: Var, goal_feats: Var) -> Result<Var> {
        let k = tape.shape(goal_feats).0;
        let rep = tape.gather_rows(composite, &vec![0; k])?;
        let x = tape.concat_cols(&[rep, goal_feats])?;
        let t = self.traj_head.forward(tape, x)?;
        Ok(tape.affine_scalar(t, self.coord_scale, 0.0))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        f_last: Var,
        num_lanes: usize,
        enhanced: Var,
        composite: Var,
        agent_input: Var,
        h_mem: Option<Var>,
    ) -> Result<(GoalVars, Var)> {
        let map_feature = self.map_feature(tape, f_last, num_lanes, h_mem)?;
        let proposals = self.propose_goals(tape, agent_input, map_feature)?;
        let feats = self.encode_goal_points(tape, proposals, enhanced)?;
        let (refined, logits, scores) = self.refine_and_score(tape, proposals, feats, f_last)?;
        let goal_feats = self.encode_goal_points(tape, refined, enhanced)?;
        let traj = self.complete_trajectories(tape, composite, goal_feats)?;
        Ok((
            GoalVars {
                map_feature,
                proposals,
                refined,
                logits,
                scores,
            },
            traj,
        ))
    }
}

/// Regresses `K` trajectories straight from the composite representation.
#[derive(Clone, Debug)]
pub struct DirectDecoder {
    pub k: usize,
    pub coord_scale: f64,
    pub head: Mlp2,
}

impl DirectDecoder {
    pub fn new(
        store: &mut ParamStore,
        composite_width: usize,
        dim: usize,
        k: usize,
        coord_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        check_k(k)?;
        Ok(DirectDecoder {
            k,
            coord_scale,
            head: Mlp2::new(store, "decoder.direct", composite_width, dim, k * TRAJ_WIDTH, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, composite: Var) -> Result<Var> {
        let t = self.head.forward(tape, composite)?;
        let t = tape.reshape(t, self.k, TRAJ_WIDTH)?;
        Ok(tape.affine_scalar(t, self.coord_scale, 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dims(d: usize) -> GoalDecoderDims {
        GoalDecoderDims {
            dim: d,
            k: 6,
            coord_scale: 10.0,
            enhanced_width: 3 * d,
            composite_width: 5 * d,
            agent_goal_width: 5 * d,
            scene_memory: true,
        }
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_linear(store: &mut ParamStore, l: &Linear) {
        let n = store.block(l.w).len();
        store.set(l.w, &vec![0.0; n]).unwrap();
        if let Some(b) = l.b {
            let n = store.block(b).len();
            store.set(b, &vec![0.0; n]).unwrap();
        }
    }

    #[test]
    fn odd_k_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut d = dims(4);
        d.k = 5;
        assert!(GoalDecoder::new(&mut store, &d, &mut rng).is_err());
        assert!(DirectDecoder::new(&mut store, 8, 4, 3, 1.0, &mut rng).is_err());
    }

    #[test]
    fn full_pass_shapes_and_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let dec = GoalDecoder::new(&mut store, &dims(4), &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let f = tape.constant(random_mat(5, 4, &mut rng));
        let enh = tape.constant(random_mat(1, 12, &mut rng));
        let comp = tape.constant(random_mat(1, 20, &mut rng));
        let h = tape.constant(random_mat(1, 4, &mut rng));
        let (g, traj) = dec.forward(&mut tape, f, 2, enh, comp, comp, Some(h)).unwrap();
        assert_eq!(tape.shape(g.proposals), (6, 2));
        assert_eq!(tape.shape(g.refined), (6, 2));
        assert_eq!(tape.shape(traj), (6, TRAJ_WIDTH));
        let s = &tape.value(g.scores).data;
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn zero_offset_head_keeps_proposals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let dec = GoalDecoder::new(&mut store, &dims(4), &mut rng).unwrap();
        zero_linear(&mut store, &dec.offset_head);
        zero_linear(&mut store, &dec.logit_head);
        let mut tape = Tape::new(&store);
        let p = tape.constant(random_mat(6, 2, &mut rng));
        let feats = tape.constant(random_mat(6, 4, &mut rng));
        let f = tape.constant(random_mat(3, 4, &mut rng));
        let (refined, _, scores) = dec.refine_and_score(&mut tape, p, feats, f).unwrap();
        assert_eq!(tape.value(refined), tape.value(p));
        assert!(tape.value(scores).data.iter().all(|&s| (s - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn zero_heads_propose_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let dec = GoalDecoder::new(&mut store, &dims(4), &mut rng).unwrap();
        zero_linear(&mut store, &dec.agent_head.second);
        zero_linear(&mut store, &dec.map_head.second);
        let mut tape = Tape::new(&store);
        let a = tape.constant(random_mat(1, 20, &mut rng));
        let m = tape.constant(random_mat(1, 4, &mut rng));
        let p = dec.propose_goals(&mut tape, a, m).unwrap();
        assert!(tape.value(p).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_encoder_hand_case() {
        // d = 2, enhanced width 1: fc1 3 -> 2, fc2 2 -> 2, fc3 2 -> 2.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = PointEncoder::new(&mut store, 1, 2, &mut rng);
        let [a, b, c] = &enc.layers;
        store.set(a.w, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        store.set(a.b.unwrap(), &[0.0, 0.5]).unwrap();
        store.set(b.w, &[2.0, 0.0, 1.0, 1.0]).unwrap();
        store.set(b.b.unwrap(), &[-1.0, 0.0]).unwrap();
        store.set(c.w, &[1.0, -1.0, 0.0, 3.0]).unwrap();
        store.set(c.b.unwrap(), &[0.0, 1.0]).unwrap();
        let mut tape = Tape::new(&store);
        let p = tape.constant(Mat::from_rows(&[vec![1.0, -2.0], vec![1.0, -2.0]]).unwrap());
        let e = tape.constant(Mat::row_vector(vec![0.5]));
        let out = enc.forward(&mut tape, p, e).unwrap();
        // h1 = relu([1 + 0.5, 2 + 0.5]) = [1.5, 2.5]
        // h2 = relu([3 - 1, 1.5 + 2.5]) = [2, 4]
        // out = [2 - 4, 12 + 1] = [-2, 13]
        assert_eq!(tape.value(out).row(0), &[-2.0, 13.0]);
        assert_eq!(tape.value(out).row(1), &[-2.0, 13.0]);
    }

    #[test]
    fn zero_trajectory_head_outputs_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let dec = GoalDecoder::new(&mut store, &dims(4), &mut rng).unwrap();
        zero_linear(&mut store, &dec.traj_head.second);
        let mut tape = Tape::new(&store);
        let comp = tape.constant(random_mat(1, 20, &mut rng));
        let g = tape.constant(random_mat(6, 4, &mut rng));
        let t = dec.complete_trajectories(&mut tape, comp, g).unwrap();
        assert_eq!(tape.shape(t), (6, TRAJ_WIDTH));
        assert!(tape.value(t).data.iter().all(|&v| v == 0.0));
    }
}
