//! Per-timestep scene graphs and their attention masks.

use crate::error::{Error, Result};
use crate::nn::AttentionMask;
use crate::scene::{NormalizedScene, Point2, T_OBS};

/// Agent-lane edge radius (Euclidean, meters).
pub const EDGE_RADIUS_M: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Lane,
    AgentOfInterest,
    Agent,
}

/// Nodes ordered lanes first, then agents, with one mask per observed step.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    pub kinds: Vec<NodeKind>,
    pub num_lanes: usize,
    /// Node index of the agent of interest.
    pub aoi_node: usize,
    masks: Vec<AttentionMask>,
}

impl TemporalGraph {
    pub fn num_nodes(&self) -> usize {
        self.kinds.len()
    }

    pub fn num_agents(&self) -> usize {
        self.kinds.len() - self.num_lanes
    }

    pub fn lane_nodes(&self) -> std::ops::Range<usize> {
        0..self.num_lanes
    }

    pub fn present(&self, t: usize) -> Result<&[bool]> {
        Ok(&self.mask_ref(t)?.present)
    }

    /// The symmetric mask used by masked attention at step `t`.
    pub fn mask_at(&self, t: usize) -> Result<AttentionMask> {
        self.mask_ref(t).cloned()
    }

    pub fn mask_ref(&self, t: usize) -> Result<&AttentionMask> {
        self.masks.get(t).ok_or_else(|| {
            Error::InvalidArgument(format!("time index {t} outside 0..={}", T_OBS - 1))
        })
    }

    /// Number of undirected edges plus self-loops counted as mask entries.
    pub fn edge_entries(&self, t: usize) -> Result<usize> {
        Ok(self.mask_ref(t)?.count_true())
    }
}

fn nearest_distance(p: Point2, line: &[Point2]) -> f64 {
    line.iter().map(|c| c.dist(p)).fold(f64::INFINITY, f64::min)
}

pub fn build_temporal_graph(scene: &NormalizedScene, edge_radius_m: f64) -> TemporalGraph {
    let num_lanes = scene.lanes.len();
    let n = num_lanes + scene.agents.len();
    let mut kinds = vec![NodeKind::Lane; num_lanes];
    let mut aoi_node = num_lanes;
    for (i, a) in scene.agents.iter().enumerate() {
        if a.is_aoi {
            aoi_node = num_lanes + i;
            kinds.push(NodeKind::AgentOfInterest);
        } else {
            kinds.push(NodeKind::Agent);
        }
    }
    let mut masks = Vec::with_capacity(T_OBS);
    for t in 0..T_OBS {
        let mut m = AttentionMask {
            rows: n,
            cols: n,
            present: vec![false; n],
            allowed: vec![false; n * n],
        };
        for l in 0..num_lanes {
            m.present[l] = true;
            m.set(l, l, true);
        }
        let positions: Vec<Option<Point2>> = scene.agents.iter().map(|a| a.position_at(t)).collect();
        for (i, pos) in positions.iter().enumerate() {
            let Some(p) = *pos else { continue };
            let node = num_lanes + i;
            m.present[node] = true;
            m.set(node, node, true);
            for (l, lane) in scene.lanes.iter().enumerate() {
                if nearest_distance(p, &lane.centerline) < edge_radius_m {
                    m.set(node, l, true);
                    m.set(l, node, true);
                }
            }
        }
        if positions[aoi_node - num_lanes].is_some() {
            for (i, pos) in positions.iter().enumerate() {
                let node = num_lanes + i;
                if node != aoi_node && pos.is_some() {
                    m.set(aoi_node, node, true);
                    m.set(node, aoi_node, true);
                }
            }
        }
        masks.push(m);
    }
    TemporalGraph {
        kinds,
        num_lanes,
        aoi_node,
        masks,
    }
}
