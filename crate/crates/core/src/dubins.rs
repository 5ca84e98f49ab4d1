//! Shortest curvature-bounded paths and the looping training routes built
//! from them.
//!
//! A path is one of six words over arc-left (L), straight (S), arc-right (R):
//! LSL, RSR, LSR, RSL, RLR, LRL. The shortest word is found in closed form;
//! ties break toward the earlier family in that fixed order.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::world::{clearance, wrap_angle, CarGeometry, Pose, WorldMap};

/// Default spacing when sampling paths and checking route clearance, meters.
pub const SAMPLE_SPACING: f64 = 0.05;

/// Default clearance kept between route points and anything solid, meters.
pub const SAFETY_MARGIN: f64 = 0.3;

/// Waypoint perturbation used when replanning, meters and radians.
pub const WAYPOINT_STD_XY: f64 = 0.10;
pub const WAYPOINT_STD_THETA: f64 = 7.0 * PI / 180.0;

const PLAN_ATTEMPTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegKind {
    Left,
    Straight,
    Right,
}

/// The six families, in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DubinsFamily {
    Lsl,
    Rsr,
    Lsr,
    Rsl,
    Rlr,
    Lrl,
}

pub const ALL_FAMILIES: [DubinsFamily; 6] = [
    DubinsFamily::Lsl,
    DubinsFamily::Rsr,
    DubinsFamily::Lsr,
    DubinsFamily::Rsl,
    DubinsFamily::Rlr,
    DubinsFamily::Lrl,
];

impl DubinsFamily {
    pub fn segments(&self) -> [SegKind; 3] {
        use DubinsFamily::*;
        use SegKind::*;
        match self {
            Lsl => [Left, Straight, Left],
            Rsr => [Right, Straight, Right],
            Lsr => [Left, Straight, Right],
            Rsl => [Right, Straight, Left],
            Rlr => [Right, Left, Right],
            Lrl => [Left, Right, Left],
        }
    }
}

/// A curvature-bounded path. Arc parameters are angles in radians; the
/// straight parameter is a length in meters.
#[derive(Clone, Copy, Debug)]
pub struct DubinsPath {
    pub start: Pose,
    pub family: DubinsFamily,
    pub params: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no curvature-bounded path between the poses")]
    NoPath,
    #[error("turn radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("no route with {margin} m clearance found in {attempts} attempts")]
    NoRoute { attempts: usize, margin: f64 },
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
}

fn mod2pi(x: f64) -> f64 {
    x.rem_euclid(TAU)
}

/// Normalized pose gap shared by all six family formulas.
struct Gap {
    alpha: f64,
    beta: f64,
    d: f64,
    sa: f64,
    ca: f64,
    sb: f64,
    cb: f64,
    c_ab: f64,
}

impl Gap {
    fn new(q0: &Pose, q1: &Pose, rho: f64) -> Gap {
        let dx = q1.x - q0.x;
        let dy = q1.y - q0.y;
        let theta = if dx == 0.0 && dy == 0.0 {
            0.0
        } else {
            dy.atan2(dx)
        };
        let alpha = mod2pi(q0.theta - theta);
        let beta = mod2pi(q1.theta - theta);
        Gap {
            alpha,
            beta,
            d: dx.hypot(dy) / rho,
            sa: alpha.sin(),
            ca: alpha.cos(),
            sb: beta.sin(),
            cb: beta.cos(),
            c_ab: (alpha - beta).cos(),
        }
    }
}

/// Treats cancellation dust around tangency configurations as exact: a
/// squared straight length a hair below zero is zero, and an arc a hair
/// below a full circle is no arc at all (same endpoint, shorter path).
fn snap(mut w: [f64; 3], straight_mid: bool) -> [f64; 3] {
    for (i, v) in w.iter_mut().enumerate() {
        if (i != 1 || !straight_mid) && *v >= TAU - 1e-9 {
            *v = 0.0;
        }
    }
    w
}

fn nonneg(p_sq: f64) -> Option<f64> {
    if p_sq < -1e-9 {
        None
    } else {
        Some(p_sq.max(0.0))
    }
}

/// Normalized segment parameters (arc angles, straight in radius units).
fn word(g: &Gap, family: DubinsFamily) -> Option<[f64; 3]> {
    let d = g.d;
    match family {
        DubinsFamily::Lsl => {
            let p = nonneg(2.0 + d * d - 2.0 * g.c_ab + 2.0 * d * (g.sa - g.sb))?.sqrt();
            let tmp = (g.cb - g.ca).atan2(d + g.sa - g.sb);
            Some(snap([mod2pi(tmp - g.alpha), p, mod2pi(g.beta - tmp)], true))
        }
        DubinsFamily::Rsr => {
            let p = nonneg(2.0 + d * d - 2.0 * g.c_ab + 2.0 * d * (g.sb - g.sa))?.sqrt();
            let tmp = (g.ca - g.cb).atan2(d - g.sa + g.sb);
            Some(snap([mod2pi(g.alpha - tmp), p, mod2pi(tmp - g.beta)], true))
        }
        DubinsFamily::Lsr => {
            let p = nonneg(-2.0 + d * d + 2.0 * g.c_ab + 2.0 * d * (g.sa + g.sb))?.sqrt();
            let tmp = (-g.ca - g.cb).atan2(d + g.sa + g.sb) - (-2.0f64).atan2(p);
            Some(snap(
                [mod2pi(tmp - g.alpha), p, mod2pi(tmp - mod2pi(g.beta))],
                true,
            ))
        }
        DubinsFamily::Rsl => {
            let p = nonneg(-2.0 + d * d + 2.0 * g.c_ab - 2.0 * d * (g.sa + g.sb))?.sqrt();
            let tmp = (g.ca + g.cb).atan2(d - g.sa - g.sb) - 2.0f64.atan2(p);
            Some(snap(
                [mod2pi(g.alpha - tmp), p, mod2pi(g.beta - tmp)],
                true,
            ))
        }
        DubinsFamily::Rlr => {
            let tmp = (6.0 - d * d + 2.0 * g.c_ab + 2.0 * d * (g.sa - g.sb)) / 8.0;
            if tmp.abs() > 1.0 {
                return None;
            }
            let p = mod2pi(TAU - tmp.acos());
            let phi = (g.ca - g.cb).atan2(d - g.sa + g.sb);
            let t = mod2pi(g.alpha - phi + mod2pi(p / 2.0));
            Some(snap(
                [t, p, mod2pi(g.alpha - g.beta - t + mod2pi(p))],
                false,
            ))
        }
        DubinsFamily::Lrl => {
            let tmp = (6.0 - d * d + 2.0 * g.c_ab + 2.0 * d * (g.sb - g.sa)) / 8.0;
            if tmp.abs() > 1.0 {
                return None;
            }
            let p = mod2pi(TAU - tmp.acos());
            let phi = (g.ca - g.cb).atan2(d + g.sa - g.sb);
            let t = mod2pi(-g.alpha - phi + p / 2.0);
            Some(snap(
                [t, p, mod2pi(mod2pi(g.beta) - g.alpha - t + mod2pi(p))],
                false,
            ))
        }
    }
}

/// Shortest curvature-bounded path from `q0` to `q1` with turn radius `rho`.
/// Coincident poses give a zero-length path.
pub fn dubins_shortest_path(q0: &Pose, q1: &Pose, rho: f64) -> Result<DubinsPath, PlanError> {
    if rho <= 0.0 || rho.is_nan() {
        return Err(PlanError::BadRadius(rho));
    }
    if q0.distance(q1) < 1e-12 && wrap_angle(q0.theta - q1.theta).abs() < 1e-12 {
        return Ok(DubinsPath {
            start: *q0,
            family: DubinsFamily::Lsl,
            params: [0.0; 3],
            radius: rho,
        });
    }
    let gap = Gap::new(q0, q1, rho);
    let mut best: Option<(f64, DubinsFamily, [f64; 3])> = None;
    for family in ALL_FAMILIES {
        if let Some(w) = word(&gap, family) {
            let total = w[0] + w[1] + w[2];
            if best.as_ref().is_none_or(|(l, _, _)| total < *l) {
                best = Some((total, family, w));
            }
        }
    }
    // Poses on a shared turn circle: the word formulas degenerate there
    // (both tangent lengths cancel to rounding dust), so offer the single
    // arc directly. It competes on length like any other candidate.
    for (family, left) in [(DubinsFamily::Lsl, true), (DubinsFamily::Rsr, false)] {
        let side = if left { 1.0 } else { -1.0 };
        let c0 = (
            q0.x - side * rho * q0.theta.sin(),
            q0.y + side * rho * q0.theta.cos(),
        );
        let c1 = (
            q1.x - side * rho * q1.theta.sin(),
            q1.y + side * rho * q1.theta.cos(),
        );
        if (c0.0 - c1.0).hypot(c0.1 - c1.1) < 1e-9 {
            let sweep = (side * (q1.theta - q0.theta)).rem_euclid(TAU);
            if best.as_ref().is_none_or(|(l, _, _)| sweep < *l) {
                best = Some((sweep, family, [sweep, 0.0, 0.0]));
            }
        }
    }
    let (_, family, w) = best.ok_or(PlanError::NoPath)?;
    let mut params = w;
    // Straight-segment parameter is stored in meters.
    if family.segments()[1] == SegKind::Straight {
        params[1] *= rho;
    } else {
        // CCC middle segments stay angles.
    }
    Ok(DubinsPath {
        start: *q0,
        family,
        params,
        radius: rho,
    })
}

impl DubinsPath {
    /// Segment kinds with their lengths in meters.
    pub fn segment_lengths(&self) -> [(SegKind, f64); 3] {
        let kinds = self.family.segments();
        let mut out = [(SegKind::Straight, 0.0); 3];
        for i in 0..3 {
            let len = match kinds[i] {
                SegKind::Straight => self.params[i],
                _ => self.params[i] * self.radius,
            };
            out[i] = (kinds[i], len);
        }
        out
    }

    pub fn total_length(&self) -> f64 {
        self.segment_lengths().iter().map(|(_, l)| l).sum()
    }

    /// Pose after traveling `s` meters along the path (clamped to the end).
    pub fn pose_at(&self, s: f64) -> Pose {
        let mut pose = self.start;
        let mut remaining = s.max(0.0);
        for (kind, len) in self.segment_lengths() {
            let take = remaining.min(len);
            pose = advance(&pose, kind, take, self.radius);
            remaining -= take;
            if remaining <= 0.0 {
                break;
            }
        }
        pose
    }

    pub fn end(&self) -> Pose {
        self.pose_at(self.total_length())
    }
}

/// Closed-form motion along one segment.
fn advance(pose: &Pose, kind: SegKind, len: f64, radius: f64) -> Pose {
    if len <= 0.0 {
        return *pose;
    }
    let (sin0, cos0) = pose.theta.sin_cos();
    match kind {
        SegKind::Straight => Pose {
            x: pose.x + len * cos0,
            y: pose.y + len * sin0,
            theta: pose.theta,
        },
        SegKind::Left => {
            let phi = len / radius;
            let theta = pose.theta + phi;
            let (sin1, cos1) = theta.sin_cos();
            Pose {
                x: pose.x + radius * (sin1 - sin0),
                y: pose.y - radius * (cos1 - cos0),
                theta: wrap_angle(theta),
            }
        }
        SegKind::Right => {
            let phi = len / radius;
            let theta = pose.theta - phi;
            let (sin1, cos1) = theta.sin_cos();
            Pose {
                x: pose.x - radius * (sin1 - sin0),
                y: pose.y + radius * (cos1 - cos0),
                theta: wrap_angle(theta),
            }
        }
    }
}

/// Poses along the path, spaced evenly at most `spacing` apart in arc
/// length, including both endpoints.
pub fn sample_path(path: &DubinsPath, spacing: f64) -> Vec<Pose> {
    let total = path.total_length();
    if total == 0.0 {
        return vec![path.start];
    }
    let n = (total / spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| path.pose_at(total * k as f64 / n as f64))
        .collect()
}

/// Which gap between the mid-room obstacles a route threads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateChoice {
    Left,
    Center,
    Right,
}

/// A loop route: out through a gate, around the far end, back along a side
/// lane, and a final turn onto the start pose.
#[derive(Clone, Debug)]
pub struct Route {
    pub waypoints: Vec<Pose>,
    pub legs: Vec<DubinsPath>,
    pub gate: GateChoice,
    pub safety_margin: f64,
}

impl Route {
    pub fn total_length(&self) -> f64 {
        self.legs.iter().map(|l| l.total_length()).sum()
    }

    pub fn end(&self) -> Pose {
        *self.waypoints.last().unwrap()
    }

    /// Concatenated leg samples with duplicate joint poses dropped.
    pub fn sample(&self, spacing: f64) -> Vec<Pose> {
        let mut out: Vec<Pose> = Vec::new();
        for leg in &self.legs {
            let poses = sample_path(leg, spacing);
            let skip = usize::from(!out.is_empty());
            out.extend(poses.into_iter().skip(skip));
        }
        out
    }
}

/// Lane centers (left, center, right in y) threading the mid-room gaps.
///
/// Derived from the y-gaps left by obstacles near mid-length; rooms without
/// three usable gaps fall back to evenly placed lanes.
pub fn gate_lanes(map: &WorldMap) -> [f64; 3] {
    let band_lo = map.room_length / 2.0 - 1.0;
    let band_hi = map.room_length / 2.0 + 1.0;
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for ob in &map.obstacles {
        let (lo_x, hi_x, lo_y, hi_y) = match ob.shape {
            crate::world::Shape::Rect { cx, cy, w, h, angle } => {
                let (s, c) = angle.sin_cos();
                let ex = (w / 2.0 * c).abs() + (h / 2.0 * s).abs();
                let ey = (w / 2.0 * s).abs() + (h / 2.0 * c).abs();
                (cx - ex, cx + ex, cy - ey, cy + ey)
            }
            crate::world::Shape::Disc { cx, cy, r } => (cx - r, cx + r, cy - r, cy + r),
        };
        if hi_x >= band_lo && lo_x <= band_hi {
            intervals.push((lo_y, hi_y));
        }
    }
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gaps: Vec<(f64, f64)> = Vec::new();
    let mut cursor = 0.0;
    for (lo, hi) in intervals {
        if lo > cursor {
            gaps.push((cursor, lo));
        }
        cursor = cursor.max(hi);
    }
    if cursor < map.room_width {
        gaps.push((cursor, map.room_width));
    }
    gaps.retain(|(lo, hi)| hi - lo >= 0.8);
    if gaps.len() >= 3 {
        gaps.sort_by(|a, b| (b.1 - b.0).total_cmp(&(a.1 - a.0)));
        let mut top: Vec<(f64, f64)> = gaps[..3].to_vec();
        top.sort_by(|a, b| a.0.total_cmp(&b.0));
        [
            (top[0].0 + top[0].1) / 2.0,
            (top[1].0 + top[1].1) / 2.0,
            (top[2].0 + top[2].1) / 2.0,
        ]
    } else {
        let w = map.room_width;
        [w * 0.15, w * 0.5, w * 0.85]
    }
}

/// Plans the loop route for one episode starting at `start`.
///
/// Each attempt draws an outbound gate and perturbs the intermediate
/// waypoints, accepting the first route whose every sampled point keeps
/// `SAFETY_MARGIN` clearance and failing after 50 attempts.
pub fn plan_training_route<R: Rng>(
    map: &WorldMap,
    start: &Pose,
    geom: &CarGeometry,
    rng: &mut R,
) -> Result<Route, PlanError> {
    let lanes = gate_lanes(map);
    // The loop's final turn sweeps down onto the start pose from above, so
    // the return ride is always along the upper lane: closing onto the
    // start from below would need two turn radii of room below it. The
    // outbound gate is drawn from the other lanes; the return lane's gate
    // is crossed westward on every loop.
    let return_y = lanes[2];
    let usable: Vec<(GateChoice, f64)> =
        [GateChoice::Left, GateChoice::Center, GateChoice::Right]
            .into_iter()
            .zip(lanes)
            .filter(|(_, y)| (*y - return_y).abs() > 1e-9)
            .collect();
    let r = geom.min_turn_radius;
    let x_gate = map.room_length / 2.0;
    let x_apex = map.room_length - 1.2;
    // Final-turn entry: a quarter arc before the start on the start pose's
    // own left-turn circle, wherever the start was sampled. Kept exact:
    // nudging a pose sideways off its arrival circle leaves only
    // near-full-circle words, which leave the room.
    let (sin_t, cos_t) = start.theta.sin_cos();
    let (cx, cy) = (start.x - r * sin_t, start.y + r * cos_t);
    let turn_in = Pose::new(cx - r * cos_t, cy - r * sin_t, start.theta - FRAC_PI_2);

    let perturb = |rng: &mut R, p: &Pose| -> Pose {
        let nxy = Normal::new(0.0, WAYPOINT_STD_XY).unwrap();
        let nth = Normal::new(0.0, WAYPOINT_STD_THETA).unwrap();
        Pose::new(
            p.x + nxy.sample(rng),
            p.y + nxy.sample(rng),
            p.theta + nth.sample(rng),
        )
    };

    for _ in 0..PLAN_ATTEMPTS {
        // Redrawing the gate each attempt keeps one cramped lane from
        // consuming the whole attempt budget.
        let (gate, gate_y) = usable[rng.gen_range(0..usable.len())];
        let nominal = [
            Pose::new(x_gate, gate_y, 0.0),
            // Far-end apex: the easternmost pose of the U-turn, between lanes.
            Pose::new(x_apex, (gate_y + return_y) / 2.0, FRAC_PI_2),
            // Return ride, ending just east of the start so the leg into the
            // final turn keeps a straight run that absorbs the perturbations.
            Pose::new(start.x + 0.8, return_y, PI),
        ];
        let mut waypoints = vec![*start];
        for p in &nominal {
            waypoints.push(perturb(rng, p));
        }
        waypoints.push(turn_in);
        waypoints.push(*start);
        let mut legs = Vec::with_capacity(waypoints.len() - 1);
        let mut ok = true;
        for pair in waypoints.windows(2) {
            match dubins_shortest_path(&pair[0], &pair[1], r) {
                Ok(leg) => legs.push(leg),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            ok = legs.iter().all(|leg| {
                sample_path(leg, SAMPLE_SPACING)
                    .iter()
                    .all(|p| clearance(map, p.x, p.y) >= SAFETY_MARGIN)
            });
        }
        if ok {
            return Ok(Route {
                waypoints,
                legs,
                gate,
                safety_margin: SAFETY_MARGIN,
            });
        }
    }
    Err(PlanError::NoRoute {
        attempts: PLAN_ATTEMPTS,
        margin: SAFETY_MARGIN,
    })
}
