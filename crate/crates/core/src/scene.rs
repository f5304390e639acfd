//! Raw and normalized scenes, the scene record format, lane filtering,
//! vectorization into polylines, and training-time augmentations.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed steps per scene.
pub const T_OBS: usize = 20;
/// Future steps to predict.
pub const T_FUT: usize = 30;
pub const T_TOTAL: usize = T_OBS + T_FUT;
/// Sampling period in seconds.
pub const DT: f64 = 0.1;
/// Index of the last observed step.
pub const LAST_OBS: usize = T_OBS - 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn manhattan(self, o: Point2) -> f64 {
        (self.x - o.x).abs() + (self.y - o.y).abs()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn scaled(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// One timestamped position of an agent track.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackStep {
    pub t: usize,
    pub x: f64,
    pub y: f64,
}

impl TrackStep {
    pub fn point(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    #[serde(default)]
    pub is_aoi: bool,
    pub steps: Vec<TrackStep>,
}

impl AgentTrack {
    /// Steps inside the observation window.
    pub fn observed(&self) -> impl Iterator<Item = &TrackStep> {
        self.steps.iter().filter(|s| s.t < T_OBS)
    }

    pub fn present_mask(&self) -> [bool; T_OBS] {
        let mut m = [false; T_OBS];
        for s in self.observed() {
            m[s.t] = true;
        }
        m
    }

    pub fn position_at(&self, t: usize) -> Option<Point2> {
        self.steps
            .binary_search_by_key(&t, |s| s.t)
            .ok()
            .map(|i| self.steps[i].point())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnDirection {
    #[default]
    None,
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub id: String,
    pub centerline: Vec<Point2>,
    #[serde(default)]
    pub is_intersection: bool,
    #[serde(default)]
    pub turn_direction: TurnDirection,
}

/// A scene in its original coordinate frame; also the on-disk record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawScene {
    pub scene_id: String,
    pub dt: f64,
    pub t_obs: usize,
    pub t_fut: usize,
    pub aoi_id: String,
    pub agents: Vec<AgentTrack>,
    pub lanes: Vec<LaneSegment>,
    /// Ground-truth future of the agent of interest; empty when unknown.
    #[serde(default)]
    pub gt_future: Vec<Point2>,
}

impl RawScene {
    pub fn aoi_index(&self) -> Option<usize> {
        self.agents.iter().position(|a| a.is_aoi)
    }

    pub fn aoi(&self) -> &AgentTrack {
        &self.agents[self.aoi_index().expect("validated scene has an agent of interest")]
    }

    /// Checks every structural invariant of a scene record.
    pub fn validate(&self) -> Result<()> {
        let rec = self.scene_id.as_str();
        if self.t_obs != T_OBS {
            return Err(Error::schema(rec, "t_obs", format!("expected {T_OBS}, got {}", self.t_obs)));
        }
        if self.t_fut != T_FUT {
            return Err(Error::schema(rec, "t_fut", format!("expected {T_FUT}, got {}", self.t_fut)));
        }
        if (self.dt - DT).abs() > 1e-12 {
            return Err(Error::schema(rec, "dt", format!("expected {DT}, got {}", self.dt)));
        }
        let aois: Vec<&AgentTrack> = self.agents.iter().filter(|a| a.is_aoi).collect();
        if aois.len() != 1 {
            return Err(Error::schema(
                rec,
                "agents.is_aoi",
                format!("exactly one agent of interest required, found {}", aois.len()),
            ));
        }
        if aois[0].id != self.aoi_id {
            return Err(Error::schema(
                rec,
                "aoi_id",
                format!("`{}` does not match agent of interest `{}`", self.aoi_id, aois[0].id),
            ));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if self.agents[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::schema(rec, "agents.id", format!("duplicate id `{}`", a.id)));
            }
            for w in a.steps.windows(2) {
                if w[1].t <= w[0].t {
                    return Err(Error::schema(
                        rec,
                        "agents.steps.t",
                        format!("agent `{}`: time indices not strictly increasing", a.id),
                    ));
                }
            }
            if let Some(s) = a.steps.iter().find(|s| s.t >= T_TOTAL) {
                return Err(Error::schema(
                    rec,
                    "agents.steps.t",
                    format!("agent `{}`: time index {} beyond {}", a.id, s.t, T_TOTAL - 1),
                ));
            }
            if a.steps.iter().any(|s| !s.point().is_finite()) {
                return Err(Error::schema(
                    rec,
                    "agents.steps",
                    format!("agent `{}` has a non-finite position", a.id),
                ));
            }
        }
        if aois[0].present_mask().iter().any(|p| !p) {
            return Err(Error::schema(
                rec,
                "agents.steps",
                "agent of interest must be present at every observed step",
            ));
        }
        for l in &self.lanes {
            if l.centerline.len() < 2 {
                return Err(Error::schema(
                    rec,
                    "lanes.centerline",
                    format!("lane `{}` needs at least two points", l.id),
                ));
            }
            if l.centerline.iter().any(|p| !p.is_finite()) {
                return Err(Error::schema(
                    rec,
                    "lanes.centerline",
                    format!("lane `{}` has a non-finite point", l.id),
                ));
            }
            if l.centerline.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::schema(
                    rec,
                    "lanes.centerline",
                    format!("lane `{}` repeats a centerline point", l.id),
                ));
            }
        }
        if !self.gt_future.is_empty() && self.gt_future.len() != T_FUT {
            return Err(Error::schema(
                rec,
                "gt_future",
                format!("expected {T_FUT} points, got {}", self.gt_future.len()),
            ));
        }
        if self.gt_future.iter().any(|p| !p.is_finite()) {
            return Err(Error::schema(rec, "gt_future", "non-finite point"));
        }
        Ok(())
    }

    /// Applies `f` to every coordinate (tracks, lanes, ground truth).
    pub fn map_points(&self, f: impl Fn(Point2) -> Point2) -> RawScene {
        let mut s = self.clone();
        for a in &mut s.agents {
            for st in &mut a.steps {
                let p = f(st.point());
                st.x = p.x;
                st.y = p.y;
            }
        }
        for l in &mut s.lanes {
            for p in &mut l.centerline {
                *p = f(*p);
            }
        }
        for p in &mut s.gt_future {
            *p = f(*p);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialization cannot fail")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let scene: RawScene = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Reads and validates a scene record.
pub fn load_scene(path: &Path) -> Result<RawScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RawScene::from_json(&text, path)
}

pub fn write_scene(scene: &RawScene, path: &Path) -> Result<()> {
    fs::write(path, scene.to_json()).map_err(|e| Error::io(path, e))
}

/// Rigid map `p -> R(angle) p + translation` into the normalized frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub angle: f64,
    pub translation: Point2,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        angle: 0.0,
        translation: Point2::ORIGIN,
    };

    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.angle.sin_cos();
        Point2::new(
            c * p.x - s * p.y + self.translation.x,
            s * p.x + c * p.y + self.translation.y,
        )
    }

    /// Maps a normalized-frame point back to the raw frame.
    pub fn invert(&self, p: Point2) -> Point2 {
        let (s, c) = self.angle.sin_cos();
        let x = p.x - self.translation.x;
        let y = p.y - self.translation.y;
        Point2::new(c * x + s * y, -s * x + c * y)
    }
}

/// A scene expressed in the agent-of-interest frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScene {
    pub scene: RawScene,
    pub transform: Transform,
}

impl std::ops::Deref for NormalizedScene {
    type Target = RawScene;

    fn deref(&self) -> &RawScene {
        &self.scene
    }
}

/// Translates and rotates the scene so that the agent of interest sits at
/// the origin at the last observed step, heading along +x.
///
/// The heading is taken from the last two distinct observed positions.
pub fn normalize_scene(scene: &RawScene) -> Result<NormalizedScene> {
    let aoi = scene
        .agents
        .iter()
        .find(|a| a.is_aoi)
        .ok_or_else(|| Error::schema(&scene.scene_id, "agents.is_aoi", "no agent of interest"))?;
    let observed: Vec<Point2> = aoi.observed().map(TrackStep::point).collect();
    let last = *observed
        .last()
        .ok_or_else(|| Error::DegenerateHeading(aoi.id.clone()))?;
    let prev = observed
        .iter()
        .rev()
        .find(|p| **p != last)
        .ok_or_else(|| Error::DegenerateHeading(aoi.id.clone()))?;
    let heading = (last.y - prev.y).atan2(last.x - prev.x);
    let angle = -heading;
    let (s, c) = angle.sin_cos();
    let translation = Point2::new(-(c * last.x - s * last.y), -(s * last.x + c * last.y));
    let transform = Transform { angle, translation };
    let mut normalized = scene.map_points(|p| transform.apply(p));
    // Pin the anchor exactly; rounding can leave ~1e-15 residue.
    for a in normalized.agents.iter_mut().filter(|a| a.is_aoi) {
        if let Some(st) = a.steps.iter_mut().find(|s| s.t == LAST_OBS) {
            st.x = 0.0;
            st.y = 0.0;
        }
    }
    Ok(NormalizedScene {
        scene: normalized,
        transform,
    })
}

/// Which agents define the lane neighbourhood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneFilter {
    /// Any agent at any observed step.
    #[default]
    AnyAgent,
    /// Only the agent of interest.
    AoiOnly,
}

/// Default lane neighbourhood radius (Manhattan, meters).
pub const LANE_RADIUS_M: f64 = 50.0;

/// Keeps lanes with some centerline point strictly closer than `radius_m`
/// (Manhattan distance) to an observed agent position.
pub fn filter_lanes(scene: &NormalizedScene, radius_m: f64, variant: LaneFilter) -> NormalizedScene {
    let anchors: Vec<Point2> = scene
        .agents
        .iter()
        .filter(|a| variant == LaneFilter::AnyAgent || a.is_aoi)
        .flat_map(|a| a.observed().map(TrackStep::point))
        .collect();
    let mut out = scene.clone();
    out.scene.lanes.retain(|l| {
        l.centerline
            .iter()
            .any(|c| anchors.iter().any(|a| c.manhattan(*a) < radius_m))
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Lane,
    AgentOfInterest,
    Agent,
}

/// One directed segment of a polyline with its attributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolyVector {
    pub start: Point2,
    pub end: Point2,
    pub kind: ElementKind,
    pub is_intersection: bool,
    pub turn: TurnDirection,
    /// Step index of the vector's start, agents only.
    pub timestamp: Option<usize>,
    /// Index of the owning polyline.
    pub element: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub source_id: String,
    pub kind: ElementKind,
    pub vectors: Vec<PolyVector>,
}

/// Polylines in node order: lanes first, then agents.
#[derive(Clone, Debug, PartialEq)]
pub struct PolylineSet {
    pub polylines: Vec<Polyline>,
    /// Polylines that came out empty (agents with fewer than two observed positions).
    pub empty: Vec<usize>,
}

/// Converts lanes and observed agent tracks into polylines.
pub fn vectorize(scene: &NormalizedScene) -> PolylineSet {
    let mut polylines = Vec::with_capacity(scene.lanes.len() + scene.agents.len());
    let mut empty = Vec::new();
    for lane in &scene.lanes {
        let element = polylines.len();
        let vectors = lane
            .centerline
            .windows(2)
            .map(|w| PolyVector {
                start: w[0],
                end: w[1],
                kind: ElementKind::Lane,
                is_intersection: lane.is_intersection,
                turn: lane.turn_direction,
                timestamp: None,
                element,
            })
            .collect();
        polylines.push(Polyline {
            source_id: lane.id.clone(),
            kind: ElementKind::Lane,
            vectors,
        });
    }
    for agent in &scene.agents {
        let element = polylines.len();
        let kind = if agent.is_aoi {
            ElementKind::AgentOfInterest
        } else {
            ElementKind::Agent
        };
        let obs: Vec<&TrackStep> = agent.observed().collect();
        let vectors: Vec<PolyVector> = obs
            .windows(2)
            .map(|w| PolyVector {
                start: w[0].point(),
                end: w[1].point(),
                kind,
                is_intersection: false,
                turn: TurnDirection::None,
                timestamp: Some(w[0].t),
                element,
            })
            .collect();
        if vectors.is_empty() {
            empty.push(element);
        }
        polylines.push(Polyline {
            source_id: agent.id.clone(),
            kind,
            vectors,
        });
    }
    PolylineSet { polylines, empty }
}

pub const SCALE_RANGE: (f64, f64) = (0.75, 1.25);
pub const NOISE_SIGMA_M: f64 = 0.2;

/// Multiplies every coordinate, including the ground truth, by `s`.
pub fn augment_scale(scene: &NormalizedScene, s: f64) -> Result<NormalizedScene> {
    if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "scale factor {s} outside [{}, {}]",
            SCALE_RANGE.0, SCALE_RANGE.1
        )));
    }
    Ok(NormalizedScene {
        scene: scene.map_points(|p| p.scaled(s)),
        transform: scene.transform,
    })
}

/// Draws `n` independent N(0, sigma) offsets from a seeded stream.
pub fn noise_offsets(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Perturbs lane and track coordinates with Gaussian noise; the ground-truth
/// future is left untouched.
pub fn augment_noise(scene: &NormalizedScene, sigma: f64, seed: u64) -> Result<NormalizedScene> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} must be >= 0")));
    }
    let count = 2 * (scene.agents.iter().map(|a| a.steps.len()).sum::<usize>()
        + scene.lanes.iter().map(|l| l.centerline.len()).sum::<usize>());
    let offsets = noise_offsets(count, sigma, seed);
    let mut it = offsets.chunks_exact(2);
    let mut out = scene.clone();
    for a in &mut out.scene.agents {
        for st in &mut a.steps {
            let o = it.next().expect("offset count matches coordinates");
            st.x += o[0];
            st.y += o[1];
        }
    }
    for l in &mut out.scene.lanes {
        for p in &mut l.centerline {
            let o = it.next().expect("offset count matches coordinates");
            p.x += o[0];
            p.y += o[1];
        }
    }
    Ok(out)
}
