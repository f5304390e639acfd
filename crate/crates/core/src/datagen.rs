//! Seeded synthetic traffic scenes: lane layouts, kinematic agents following
//! lane paths, yielding at intersections, and dataset manifests.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{
    load_scene, normalize_scene, AgentTrack, LaneSegment, Point2, RawScene, TrackStep, Transform,
    TurnDirection, DT, LAST_OBS, T_FUT, T_OBS, T_TOTAL,
};

const LANE_HALF_WIDTH: f64 = 1.75;
/// Half side of the intersection box.
const BOX_HALF: f64 = 7.0;
const ARM_LENGTH: f64 = 70.0;
const ROAD_HALF_LENGTH: f64 = 90.0;
const SEGMENT_LENGTH: f64 = 21.0;
const POINT_SPACING: f64 = 3.0;
const MAX_LATERAL_OFFSET: f64 = 0.3;
const MAX_AGENTS: usize = 8;
/// Minimum lateral displacement of a turn's endpoint from straight extrapolation.
pub const TURN_LATERAL_MIN_M: f64 = 2.0;
const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Straight,
    Curve,
    TIntersection,
    FourWay,
}

impl Layout {
    pub fn has_intersection(self) -> bool {
        matches!(self, Layout::TIntersection | Layout::FourWay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    ConstantSpeed,
    DecelerateYield,
    Accelerate,
    TurnLeft,
    TurnRight,
    LaneFollow,
}

impl Behavior {
    fn needs_intersection(self) -> bool {
        matches!(self, Behavior::TurnLeft | Behavior::TurnRight | Behavior::DecelerateYield)
    }
}

/// Layout and per-agent behaviors; the first behavior belongs to the agent
/// of interest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTemplate {
    pub layout: Layout,
    pub behaviors: Vec<Behavior>,
    /// Cruise speed range in m/s.
    pub speed_range: (f64, f64),
}

impl ScenarioTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.behaviors.is_empty() || self.behaviors.len() > MAX_AGENTS {
            return Err(Error::InvalidArgument(format!(
                "template needs 1..={MAX_AGENTS} agents, got {}",
                self.behaviors.len()
            )));
        }
        if !self.layout.has_intersection() {
            if let Some(b) = self.behaviors.iter().find(|b| b.needs_intersection()) {
                return Err(Error::InvalidArgument(format!(
                    "behavior {b:?} requires an intersection layout, got {:?}",
                    self.layout
                )));
            }
        }
        let (lo, hi) = self.speed_range;
        if !(lo >= 2.0 && hi >= lo && hi <= 25.0) {
            return Err(Error::InvalidArgument(format!(
                "speed range ({lo}, {hi}) must satisfy 2 <= lo <= hi <= 25"
            )));
        }
        Ok(())
    }
}

/// Arc-length motion of one agent along its route.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicProfile {
    pub route: Vec<String>,
    /// Arc length at each of the 50 steps.
    pub s: Vec<f64>,
    /// Speed at each step, m/s, never negative.
    pub speed: Vec<f64>,
    /// Steps during which the agent was braking for a yield or waiting.
    pub yield_phase: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Route {
    points: Vec<Point2>,
    cum: Vec<f64>,
    lane_ids: Vec<String>,
    /// Arc length of the stop line and of the intersection exit.
    stop_s: Option<f64>,
    exit_s: Option<f64>,
}

impl Route {
    fn new(points: Vec<Point2>, lane_ids: Vec<String>, stop_s: Option<f64>, exit_s: Option<f64>) -> Self {
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            cum.push(cum.last().unwrap() + w[0].dist(w[1]));
        }
        Route {
            points,
            cum,
            lane_ids,
            stop_s,
            exit_s,
        }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position offset to the right of travel by `lateral`, or `None` off the route.
    fn at(&self, s: f64, lateral: f64) -> Option<Point2> {
        if !(0.0..=self.length()).contains(&s) {
            return None;
        }
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i - 1,
        };
        let a = self.points[i];
        let b = self.points[i + 1];
        let seg = self.cum[i + 1] - self.cum[i];
        let u = (s - self.cum[i]) / seg;
        let (tx, ty) = ((b.x - a.x) / seg, (b.y - a.y) / seg);
        Some(Point2::new(
            a.x + u * (b.x - a.x) + lateral * ty,
            a.y + u * (b.y - a.y) - lateral * tx,
        ))
    }
}

fn densify(points: &[Point2], spacing: f64) -> Vec<Point2> {
    let mut out = vec![points[0]];
    for w in points.windows(2) {
        let n = (w[0].dist(w[1]) / spacing).ceil().max(1.0) as usize;
        for j in 1..=n {
            let u = j as f64 / n as f64;
            out.push(Point2::new(w[0].x + u * (w[1].x - w[0].x), w[0].y + u * (w[1].y - w[0].y)));
        }
    }
    out
}

fn path_length(p: &[Point2]) -> f64 {
    p.windows(2).map(|w| w[0].dist(w[1])).sum()
}

#[derive(Default)]
struct MapBuilder {
    lanes: Vec<LaneSegment>,
}

impl MapBuilder {
    /// Splits a dense path into lane segments of roughly `SEGMENT_LENGTH`.
    fn add_path(&mut self, dense: &[Point2], is_intersection: bool, turn: TurnDirection) -> Vec<String> {
        let total = path_length(dense);
        let pieces = (total / SEGMENT_LENGTH).round().max(1.0) as usize;
        let per = (dense.len() - 1).div_ceil(pieces).max(1);
        let mut ids = Vec::new();
        let mut start = 0;
        while start < dense.len() - 1 {
            let end = (start + per).min(dense.len() - 1);
            let id = format!("lane_{:03}", self.lanes.len());
            self.lanes.push(LaneSegment {
                id: id.clone(),
                centerline: dense[start..=end].to_vec(),
                is_intersection,
                turn_direction: turn,
            });
            ids.push(id);
            start = end;
        }
        ids
    }
}

fn concat_paths(parts: &[&[Point2]]) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::new();
    for p in parts {
        for &q in p.iter() {
            if out.last().is_none_or(|l| l.dist(q) > 1e-9) {
                out.push(q);
            }
        }
    }
    out
}

fn bezier(p0: Point2, p1: Point2, p2: Point2, p3: Point2, n: usize) -> Vec<Point2> {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let a = (1.0 - t).powi(3);
            let b = 3.0 * (1.0 - t).powi(2) * t;
            let c = 3.0 * (1.0 - t) * t * t;
            let d = t.powi(3);
            Point2::new(
                a * p0.x + b * p1.x + c * p2.x + d * p3.x,
                a * p0.y + b * p1.y + c * p2.y + d * p3.y,
            )
        })
        .collect()
}

struct Network {
    lanes: Vec<LaneSegment>,
    routes: Vec<RouteInfo>,
}

#[derive(Clone, Debug)]
struct RouteInfo {
    route: Route,
    /// Arm index entered from (intersections only).
    from_arm: Option<usize>,
    turn: TurnDirection,
}

/// Road along a centerline given by arc-length samples; returns forward and
/// backward lane routes.
fn build_road(center: &[Point2]) -> Network {
    let offset = |sign: f64| -> Vec<Point2> {
        let n = center.len();
        (0..n)
            .map(|i| {
                let a = center[i.saturating_sub(1)];
                let b = center[(i + 1).min(n - 1)];
                let len = a.dist(b);
                let (tx, ty) = ((b.x - a.x) / len, (b.y - a.y) / len);
                Point2::new(center[i].x + sign * LANE_HALF_WIDTH * ty, center[i].y - sign * LANE_HALF_WIDTH * tx)
            })
            .collect()
    };
    let forward = offset(1.0);
    let mut backward = offset(-1.0);
    backward.reverse();
    let mut mb = MapBuilder::default();
    let fid = mb.add_path(&forward, false, TurnDirection::None);
    let bid = mb.add_path(&backward, false, TurnDirection::None);
    Network {
        lanes: mb.lanes,
        routes: vec![
            RouteInfo {
                route: Route::new(forward, fid, None, None),
                from_arm: None,
                turn: TurnDirection::None,
            },
            RouteInfo {
                route: Route::new(backward, bid, None, None),
                from_arm: None,
                turn: TurnDirection::None,
            },
        ],
    }
}

fn straight_road() -> Network {
    let n = (2.0 * ROAD_HALF_LENGTH / POINT_SPACING) as usize;
    let center: Vec<Point2> = (0..=n)
        .map(|i| Point2::new(-ROAD_HALF_LENGTH + i as f64 * POINT_SPACING, 0.0))
        .collect();
    build_road(&center)
}

fn curved_road(radius: f64, sign: f64) -> Network {
    let n = (2.0 * ROAD_HALF_LENGTH / POINT_SPACING) as usize;
    let center: Vec<Point2> = (0..=n)
        .map(|i| {
            let s = -ROAD_HALF_LENGTH + i as f64 * POINT_SPACING;
            let phi = s / radius;
            Point2::new(radius * phi.sin(), sign * radius * (1.0 - phi.cos()))
        })
        .collect();
    build_road(&center)
}

fn turn_of(din: (f64, f64), dout: (f64, f64)) -> TurnDirection {
    let cross = din.0 * dout.1 - din.1 * dout.0;
    if cross > 0.5 {
        TurnDirection::Left
    } else if cross < -0.5 {
        TurnDirection::Right
    } else {
        TurnDirection::None
    }
}

/// Intersection with arms at the given outward headings.
fn intersection(arm_angles: &[f64]) -> Network {
    let mut mb = MapBuilder::default();
    let frames: Vec<((f64, f64), (f64, f64))> = arm_angles
        .iter()
        .map(|&a| ((a.cos(), a.sin()), (-a.sin(), a.cos())))
        .collect();
    let pt = |u: (f64, f64), v: (f64, f64), du: f64, dv: f64| {
        Point2::new(u.0 * du + v.0 * dv, u.1 * du + v.1 * dv)
    };
    let mut incoming = Vec::new();
    let mut outgoing = Vec::new();
    for &(u, v) in &frames {
        let inc = densify(
            &[pt(u, v, ARM_LENGTH, LANE_HALF_WIDTH), pt(u, v, BOX_HALF, LANE_HALF_WIDTH)],
            POINT_SPACING,
        );
        let out = densify(
            &[pt(u, v, BOX_HALF, -LANE_HALF_WIDTH), pt(u, v, ARM_LENGTH, -LANE_HALF_WIDTH)],
            POINT_SPACING,
        );
        let inc_ids = mb.add_path(&inc, false, TurnDirection::None);
        let out_ids = mb.add_path(&out, false, TurnDirection::None);
        incoming.push((inc, inc_ids));
        outgoing.push((out, out_ids));
    }
    let mut routes = Vec::new();
    for (a, &(ua, _)) in frames.iter().enumerate() {
        for (b, &(ub, _)) in frames.iter().enumerate() {
            if a == b {
                continue;
            }
            let din = (-ua.0, -ua.1);
            let dout = ub;
            let turn = turn_of(din, dout);
            let p0 = *incoming[a].0.last().unwrap();
            let p3 = outgoing[b].0[0];
            let c = 0.55 * p0.dist(p3);
            let p1 = Point2::new(p0.x + din.0 * c, p0.y + din.1 * c);
            let p2 = Point2::new(p3.x - dout.0 * c, p3.y - dout.1 * c);
            let conn = bezier(p0, p1, p2, p3, 8);
            let conn_ids = mb.add_path(&conn, true, turn);
            let points = concat_paths(&[&incoming[a].0, &conn, &outgoing[b].0]);
            let stop_s = path_length(&incoming[a].0);
            let exit_s = stop_s + path_length(&conn);
            let mut ids = incoming[a].1.clone();
            ids.extend(conn_ids);
            ids.extend(outgoing[b].1.iter().cloned());
            routes.push(RouteInfo {
                route: Route::new(points, ids, Some(stop_s), Some(exit_s)),
                from_arm: Some(a),
                turn,
            });
        }
    }
    Network {
        lanes: mb.lanes,
        routes,
    }
}

fn build_network(layout: Layout, rng: &mut ChaCha8Rng) -> Network {
    match layout {
        Layout::Straight => straight_road(),
        Layout::Curve => {
            let radius = rng.random_range(40.0..100.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            curved_road(radius, sign)
        }
        Layout::TIntersection => intersection(&[0.0, PI, -PI / 2.0]),
        Layout::FourWay => intersection(&[0.0, PI / 2.0, PI, -PI / 2.0]),
    }
}

/// Speed controller for one agent.
#[derive(Clone, Copy, Debug)]
enum Control {
    Cruise,
    Accelerate { start: usize, accel: f64, v_max: f64 },
    Follow { seed: u64 },
    Turn { v_turn: f64, brake: f64 },
    /// Stop at the stop line until `clear` (seconds), then resume.
    Yield { clear: f64, brake: f64 },
}

const RESUME_ACCEL: f64 = 2.0;

fn simulate(route: &Route, s0: f64, v0: f64, control: Control) -> KinematicProfile {
    let mut s = vec![s0];
    let mut speed = vec![v0];
    let mut yield_phase = vec![false];
    let follow_accels: Vec<f64> = match control {
        Control::Follow { seed } => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..T_TOTAL / 10 + 1).map(|_| r.random_range(-0.8..0.8)).collect()
        }
        _ => Vec::new(),
    };
    let mut stopped_once = false;
    for t in 0..T_TOTAL - 1 {
        let (st, v) = (s[t], speed[t]);
        let time = t as f64 * DT;
        let mut in_yield = false;
        let accel = match control {
            Control::Cruise => 0.0,
            Control::Accelerate { start, accel, v_max } => {
                if t >= start && v < v_max {
                    accel
                } else {
                    0.0
                }
            }
            Control::Follow { .. } => {
                let a = follow_accels[t / 10];
                if v + a * DT < 1.0 {
                    0.0
                } else {
                    a
                }
            }
            Control::Turn { v_turn, brake } => {
                let stop = route.stop_s.unwrap_or(f64::INFINITY);
                let exit = route.exit_s.unwrap_or(f64::INFINITY);
                let dist = stop - st;
                if st < stop && v > v_turn && dist <= (v * v - v_turn * v_turn) / (2.0 * brake) + v * DT {
                    -(v * v - v_turn * v_turn) / (2.0 * dist.max(0.5))
                } else if st >= exit && v < v0 {
                    1.5
                } else {
                    0.0
                }
            }
            Control::Yield { clear, brake } => {
                let stop = route.stop_s.unwrap_or(f64::INFINITY);
                let dist = stop - 1.0 - st;
                if time < clear && st < stop - 1.0 {
                    if stopped_once || dist <= v * v / (2.0 * brake) + v * DT {
                        in_yield = true;
                        if v < 0.3 || dist < 0.05 {
                            -v / DT
                        } else {
                            -(v * v) / (2.0 * dist.max(0.05))
                        }
                    } else {
                        0.0
                    }
                } else if time >= clear && v < v0 {
                    RESUME_ACCEL
                } else {
                    0.0
                }
            }
        };
        let mut v_next = (v + accel * DT).max(0.0);
        if let Control::Yield { .. } = control {
            if in_yield {
                v_next = v_next.min(v);
                if v_next == 0.0 {
                    stopped_once = true;
                }
            } else {
                v_next = v_next.min(v0);
            }
        }
        if let Control::Turn { .. } = control {
            v_next = v_next.min(v0);
        }
        let mut s_next = st + 0.5 * (v + v_next) * DT;
        if in_yield {
            if let Some(stop) = route.stop_s {
                s_next = s_next.min(stop - 1.0).max(st);
            }
        }
        s.push(s_next);
        speed.push(v_next);
        yield_phase.push(in_yield);
    }
    KinematicProfile {
        route: route.lane_ids.clone(),
        s,
        speed,
        yield_phase,
    }
}

/// Free-flow crossing window (entry, exit) in seconds; extrapolates past the horizon.
fn crossing_window(route: &Route, s0: f64, v: f64) -> Option<(f64, f64)> {
    let stop = route.stop_s?;
    let exit = route.exit_s?;
    Some(((stop - s0) / v, (exit - s0) / v))
}

struct PlacedAgent {
    id: String,
    route: usize,
    profile: KinematicProfile,
    lateral: f64,
    first: usize,
    last: usize,
}

fn pick_route(net: &Network, behavior: Behavior, rng: &mut ChaCha8Rng, exclude_arm: Option<usize>) -> Option<usize> {
    let want = match behavior {
        Behavior::TurnLeft => Some(TurnDirection::Left),
        Behavior::TurnRight => Some(TurnDirection::Right),
        _ if net.routes.len() > 2 => Some(TurnDirection::None),
        _ => None,
    };
    let candidates: Vec<usize> = (0..net.routes.len())
        .filter(|&i| want.is_none_or(|w| net.routes[i].turn == w))
        .filter(|&i| exclude_arm.is_none() || net.routes[i].from_arm != exclude_arm)
        .collect();
    candidates.choose(rng).copied()
}

fn control_for(behavior: Behavior, v0: f64, rng: &mut ChaCha8Rng) -> Control {
    match behavior {
        Behavior::ConstantSpeed => Control::Cruise,
        Behavior::Accelerate => Control::Accelerate {
            start: rng.random_range(5..35),
            accel: rng.random_range(0.8..2.5),
            v_max: v0 + rng.random_range(3.0..8.0),
        },
        Behavior::LaneFollow => Control::Follow { seed: rng.random() },
        Behavior::TurnLeft | Behavior::TurnRight => Control::Turn {
            v_turn: rng.random_range(3.5..6.0),
            brake: rng.random_range(1.5..3.0),
        },
        Behavior::DecelerateYield => Control::Cruise,
    }
}

/// Arc length at step 0 for the agent of interest.
fn aoi_start(route: &Route, behavior: Behavior, v0: f64, rng: &mut ChaCha8Rng) -> f64 {
    match route.stop_s {
        Some(stop) => {
            let lead = match behavior {
                Behavior::TurnLeft | Behavior::TurnRight => rng.random_range(1.8..3.6),
                _ => rng.random_range(1.6..4.0),
            };
            (stop - v0 * lead).max(1.0)
        }
        None => {
            let mid = route.length() / 2.0;
            mid - v0 * LAST_OBS as f64 * DT + rng.random_range(-10.0..10.0)
        }
    }
}

fn track_of(agent: &PlacedAgent, route: &Route, is_aoi: bool) -> AgentTrack {
    let steps = (agent.first..=agent.last)
        .filter_map(|t| {
            route
                .at(agent.profile.s[t], agent.lateral)
                .map(|p| TrackStep { t, x: p.x, y: p.y })
        })
        .collect();
    AgentTrack {
        id: agent.id.clone(),
        is_aoi,
        steps,
    }
}

/// One attempt at generating a scene; `None` when constraints are not met.
fn try_gen(
    template: &ScenarioTemplate,
    rng: &mut ChaCha8Rng,
    scene_id: &str,
) -> Option<(RawScene, Vec<KinematicProfile>)> {
    let net = build_network(template.layout, rng);
    let (lo, hi) = template.speed_range;
    let aoi_behavior = template.behaviors[0];
    let aoi_route = pick_route(&net, aoi_behavior, rng, None)?;
    let route = &net.routes[aoi_route].route;
    let v0 = rng.random_range(lo..=hi);
    let s0 = aoi_start(route, aoi_behavior, v0, rng);
    let mut agents: Vec<PlacedAgent> = Vec::new();
    let mut aoi_control = control_for(aoi_behavior, v0, rng);

    // A crossing agent whose free-flow timing decides who yields.
    let mut conflict: Option<PlacedAgent> = None;
    if aoi_behavior == Behavior::DecelerateYield {
        let arm = net.routes[aoi_route].from_arm;
        let others: Vec<usize> = (0..net.routes.len()).filter(|&i| net.routes[i].from_arm != arm).collect();
        let straight: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&i| net.routes[i].turn == TurnDirection::None)
            .collect();
        let cross = if straight.is_empty() { others } else { straight };
        let c_route = *cross.choose(rng)?;
        let cr = &net.routes[c_route].route;
        let (aoi_in, aoi_out) = crossing_window(route, s0, v0)?;
        let vc = rng.random_range(lo..=hi);
        let offset = rng.random_range(-2.5..2.0);
        let c_s0 = cr.stop_s? - vc * (aoi_in + offset);
        if c_s0 < 0.0 {
            return None;
        }
        let (c_in, c_out) = crossing_window(cr, c_s0, vc)?;
        let brake = rng.random_range(2.0..3.5);
        let (c_control, a_control) = if c_in < aoi_in {
            (Control::Cruise, Control::Yield { clear: c_out + 0.5, brake })
        } else {
            (Control::Yield { clear: aoi_out + 0.5, brake }, Control::Cruise)
        };
        aoi_control = a_control;
        conflict = Some(PlacedAgent {
            id: "agent_1".into(),
            route: c_route,
            profile: simulate(cr, c_s0, vc, c_control),
            lateral: rng.random_range(-MAX_LATERAL_OFFSET..MAX_LATERAL_OFFSET),
            first: 0,
            last: T_TOTAL - 1,
        });
    }

    let aoi_profile = simulate(route, s0, v0, aoi_control);
    agents.push(PlacedAgent {
        id: "aoi".into(),
        route: aoi_route,
        profile: aoi_profile,
        lateral: rng.random_range(-MAX_LATERAL_OFFSET..MAX_LATERAL_OFFSET),
        first: 0,
        last: T_TOTAL - 1,
    });
    agents.extend(conflict);

    for (i, &b) in template.behaviors.iter().enumerate().skip(agents.len()) {
        let arm = net.routes[aoi_route].from_arm;
        let r = pick_route(&net, b, rng, arm)?;
        let rr = &net.routes[r].route;
        let v = rng.random_range(lo..=hi);
        let s_start = rng.random_range(0.0..(rr.length() * 0.8));
        let control = match b {
            Behavior::DecelerateYield => Control::Yield {
                clear: rng.random_range(1.0..4.0),
                brake: rng.random_range(2.0..3.5),
            },
            other => control_for(other, v, rng),
        };
        let first = if rng.random_bool(0.2) { rng.random_range(1..15) } else { 0 };
        let last = if rng.random_bool(0.1) {
            rng.random_range(first + 1..T_TOTAL)
        } else {
            T_TOTAL - 1
        };
        agents.push(PlacedAgent {
            id: format!("agent_{i}"),
            route: r,
            profile: simulate(rr, s_start, v, control),
            lateral: rng.random_range(-MAX_LATERAL_OFFSET..MAX_LATERAL_OFFSET),
            first,
            last,
        });
    }

    let mut tracks: Vec<AgentTrack> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| track_of(a, &net.routes[a.route].route, i == 0))
        .collect();
    if tracks[0].steps.len() != T_TOTAL {
        return None;
    }
    tracks.retain(|t| !t.steps.is_empty());

    let aoi = &tracks[0];
    let gt: Vec<Point2> = aoi.steps[T_OBS..].iter().map(TrackStep::point).collect();
    let scene = RawScene {
        scene_id: scene_id.to_string(),
        dt: DT,
        t_obs: T_OBS,
        t_fut: T_FUT,
        aoi_id: "aoi".into(),
        agents: tracks,
        lanes: net.lanes,
        gt_future: gt,
    };
    let normalized = normalize_scene(&scene).ok()?;
    if matches!(aoi_behavior, Behavior::TurnLeft | Behavior::TurnRight) {
        let end = normalized.gt_future[T_FUT - 1];
        if end.y.abs() < TURN_LATERAL_MIN_M {
            return None;
        }
    }
    let profiles = agents.into_iter().map(|a| a.profile).collect();

    // Random placement in the raw frame.
    let g = Transform {
        angle: rng.random_range(-PI..PI),
        translation: Point2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)),
    };
    let raw = scene.map_points(|p| g.apply(p));
    Some((raw, profiles))
}

/// Generates a scene and the kinematic profiles behind it.
pub fn gen_scene_with_profiles(
    template: &ScenarioTemplate,
    seed: u64,
    scene_id: &str,
) -> Result<(RawScene, Vec<KinematicProfile>)> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some((scene, profiles)) = try_gen(template, &mut rng, scene_id) {
            scene.validate()?;
            return Ok((scene, profiles));
        }
    }
    Err(Error::InvalidArgument(format!(
        "template {template:?} produced no valid scene in {MAX_ATTEMPTS} attempts"
    )))
}

pub fn gen_scene(template: &ScenarioTemplate, seed: u64, scene_id: &str) -> Result<RawScene> {
    Ok(gen_scene_with_profiles(template, seed, scene_id)?.0)
}

/// Small random scene (2-4 agents, 2-5 short lanes) for gradient checks.
///
/// Lanes are laid along agent paths so that agent-lane edges occur, and one
/// non-AoI agent may appear late.
pub fn micro_scene(seed: u64) -> RawScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_agents = rng.random_range(2..=4);
    let n_lanes = rng.random_range(2..=5);
    let mut agents = Vec::new();
    let mut paths = Vec::new();
    for a in 0..n_agents {
        let start = Point2::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
        let heading: f64 = rng.random_range(-PI..PI);
        let speed = rng.random_range(2.0..8.0);
        let turn = rng.random_range(-0.02..0.02);
        let mut p = start;
        let mut h = heading;
        let mut pts = Vec::with_capacity(T_TOTAL);
        for _ in 0..T_TOTAL {
            pts.push(p);
            p = Point2::new(p.x + speed * DT * h.cos(), p.y + speed * DT * h.sin());
            h += turn;
        }
        let first = if a > 0 && rng.random_bool(0.3) { rng.random_range(1..10) } else { 0 };
        agents.push(AgentTrack {
            id: if a == 0 { "aoi".into() } else { format!("agent_{a}") },
            is_aoi: a == 0,
            steps: (first..T_TOTAL).map(|t| TrackStep { t, x: pts[t].x, y: pts[t].y }).collect(),
        });
        paths.push(pts);
    }
    let lanes = (0..n_lanes)
        .map(|l| {
            let path = &paths[l % n_agents];
            let from = rng.random_range(0..T_OBS);
            let lateral = rng.random_range(-2.5..2.5);
            let centerline = (0..rng.random_range(2..=4))
                .map(|j| {
                    let q = path[(from + 8 * j).min(T_TOTAL - 1)];
                    Point2::new(q.x + lateral, q.y - 0.5 * lateral)
                })
                .collect();
            LaneSegment {
                id: format!("lane_{l}"),
                centerline,
                is_intersection: rng.random_bool(0.3),
                turn_direction: *[TurnDirection::None, TurnDirection::Left, TurnDirection::Right]
                    .choose(&mut rng)
                    .unwrap(),
            }
        })
        .collect();
    let gt_future = paths[0][T_OBS..].to_vec();
    RawScene {
        scene_id: format!("micro_{seed}"),
        dt: DT,
        t_obs: T_OBS,
        t_fut: T_FUT,
        aoi_id: "aoi".into(),
        agents,
        lanes,
        gt_future,
    }
}

/// Named scenario families used for datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Straight,
    Curve,
    TIntersection,
    FourWay,
    Yield,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Straight,
        Preset::Curve,
        Preset::TIntersection,
        Preset::FourWay,
        Preset::Yield,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Straight => "straight",
            Preset::Curve => "curve",
            Preset::TIntersection => "t_intersection",
            Preset::FourWay => "four_way",
            Preset::Yield => "yield",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario preset `{s}`")))
    }

    /// Draws a concrete template from this family.
    pub fn sample(self, rng: &mut ChaCha8Rng) -> ScenarioTemplate {
        let n = rng.random_range(2..=6);
        let background = [Behavior::ConstantSpeed, Behavior::LaneFollow, Behavior::Accelerate];
        let inter_bg = [
            Behavior::ConstantSpeed,
            Behavior::LaneFollow,
            Behavior::TurnLeft,
            Behavior::TurnRight,
            Behavior::DecelerateYield,
        ];
        let (layout, aoi, pool): (Layout, Behavior, &[Behavior]) = match self {
            Preset::Straight => (Layout::Straight, *background.choose(rng).unwrap(), &background),
            Preset::Curve => (Layout::Curve, *background.choose(rng).unwrap(), &background),
            Preset::TIntersection => (
                Layout::TIntersection,
                *[Behavior::ConstantSpeed, Behavior::TurnLeft, Behavior::TurnRight]
                    .choose(rng)
                    .unwrap(),
                &inter_bg,
            ),
            Preset::FourWay => (
                Layout::FourWay,
                *[Behavior::LaneFollow, Behavior::TurnLeft, Behavior::TurnRight]
                    .choose(rng)
                    .unwrap(),
                &inter_bg,
            ),
            Preset::Yield => (
                if rng.random_bool(0.5) { Layout::FourWay } else { Layout::TIntersection },
                Behavior::DecelerateYield,
                &inter_bg[..2],
            ),
        };
        let mut behaviors = vec![aoi];
        if self == Preset::Yield {
            behaviors.push(Behavior::ConstantSpeed);
        }
        while behaviors.len() < n {
            behaviors.push(*pool.choose(rng).unwrap());
        }
        ScenarioTemplate {
            layout,
            behaviors,
            speed_range: (4.0, 14.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub template: Preset,
    pub seed: u64,
    pub split: Split,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub val_fraction: f64,
    pub counts: BTreeMap<Preset, usize>,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            msg: e.to_string(),
        })
    }

    pub fn ids(&self, split: Option<Split>) -> Vec<&ManifestEntry> {
        self.scenes
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .collect()
    }
}

/// Scene counts per preset plus the validation share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub counts: BTreeMap<Preset, usize>,
    pub val_fraction: f64,
}

/// `gen-data` configuration file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: Option<u64>,
    pub counts: BTreeMap<Preset, usize>,
    pub val_fraction: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            seed: None,
            counts: Preset::ALL.into_iter().map(|p| (p, 20)).collect(),
            val_fraction: 0.2,
            out_dir: None,
        }
    }
}

impl GenDataConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            counts: self.counts.clone(),
            val_fraction: self.val_fraction,
        }
    }
}

/// Parses `name=count` pairs such as `straight=10,yield=5`.
pub fn parse_counts(text: &str) -> Result<BTreeMap<Preset, usize>> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, n) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected name=count, got `{part}`")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad count in `{part}`")))?;
        out.insert(Preset::parse(name.trim())?, n);
    }
    Ok(out)
}

/// Turn and yield scenarios at intersections, split 400/100.
pub fn interaction_suite() -> DatasetSpec {
    DatasetSpec {
        counts: [(Preset::TIntersection, 150), (Preset::FourWay, 150), (Preset::Yield, 200)]
            .into_iter()
            .collect(),
        val_fraction: 0.2,
    }
}

/// Independent per-scene stream from the master seed.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates all scenes in memory, in manifest order.
pub fn gen_scenes(spec: &DatasetSpec, seed: u64) -> Result<(Manifest, Vec<RawScene>)> {
    if !(0.0..=1.0).contains(&spec.val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {} outside [0, 1]",
            spec.val_fraction
        )));
    }
    let mut entries = Vec::new();
    let mut scenes = Vec::new();
    let mut index = 0u64;
    for (&preset, &count) in &spec.counts {
        for j in 0..count {
            let s = scene_seed(seed, index);
            let mut trng = ChaCha8Rng::seed_from_u64(s);
            let template = preset.sample(&mut trng);
            let id = format!("{}_{j:05}", preset.name());
            let scene = gen_scene(&template, trng.random(), &id)?;
            entries.push(ManifestEntry {
                file: format!("scenes/{id}.json"),
                scene_id: id,
                template: preset,
                seed: s,
                split: Split::Train,
            });
            scenes.push(scene);
            index += 1;
        }
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(seed, u64::MAX)));
    let n_val = (spec.val_fraction * entries.len() as f64).round() as usize;
    for &i in &order[..n_val] {
        entries[i].split = Split::Val;
    }
    Ok((
        Manifest {
            seed,
            val_fraction: spec.val_fraction,
            counts: spec.counts.clone(),
            scenes: entries,
        },
        scenes,
    ))
}

/// Writes scene records under `dir/scenes/` and the manifest at `dir/manifest.json`.
pub fn gen_dataset(spec: &DatasetSpec, seed: u64, dir: &Path) -> Result<Manifest> {
    let (manifest, scenes) = gen_scenes(spec, seed)?;
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    for (entry, scene) in manifest.scenes.iter().zip(&scenes) {
        let path = dir.join(&entry.file);
        fs::write(&path, serde_json::to_string(scene).expect("scene serializes"))
            .map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(Manifest::FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every scene of a split (all scenes when `split` is `None`).
pub fn load_split(dir: &Path, split: Option<Split>) -> Result<Vec<RawScene>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .ids(split)
        .into_iter()
        .map(|e| load_scene(&dir.join(&e.file)))
        .collect()
}

/// Dataset path helper: a directory with a manifest, or a single scene file.
pub fn load_scenes(path: &Path, split: Option<Split>) -> Result<Vec<RawScene>> {
    if path.is_dir() {
        load_split(path, split)
    } else {
        Ok(vec![load_scene(path)?])
    }
}

pub fn scene_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("scenes").join(format!("{id}.json"))
}
