//! Rooms, obstacles, car geometry, and the noisy kinematic bicycle step.
//!
//! The world is a rectangular room with the driving axis along `x`
//! (`0 <= x <= room_length`) and the lateral axis along `y`
//! (`0 <= y <= room_width`). Obstacles are plan-view shapes extruded to a
//! fixed height; walls are extruded to the room's wall height.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Simulation step used everywhere; logs advance at 30 frames per second.
pub const DEFAULT_DT: f64 = 1.0 / 30.0;

/// Extrusion height of every obstacle, in meters.
pub const OBSTACLE_HEIGHT: f64 = 0.5;

/// Wraps an angle into `[-PI, PI)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - TAU * ((a + PI) / TAU).floor();
    // Guard the half-open upper bound against rounding in the floor above.
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Planar pose; `theta` is always kept in `[-PI, PI)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Unit heading vector.
    pub fn direction(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }
}

/// Physical description of the car. Lengths in meters, angles in radians.
#[derive(Clone, Copy, Debug)]
pub struct CarGeometry {
    pub wheelbase: f64,
    /// Footprint rectangle, centered on the pose, aligned with the heading.
    pub footprint_length: f64,
    pub footprint_width: f64,
    pub min_turn_radius: f64,
    pub max_speed: f64,
    /// Camera position forward of the pose along the heading.
    pub camera_offset: f64,
    pub camera_height: f64,
}

impl Default for CarGeometry {
    fn default() -> Self {
        CarGeometry {
            wheelbase: 0.3,
            footprint_length: 0.45,
            footprint_width: 0.25,
            min_turn_radius: 1.2,
            max_speed: 2.0,
            camera_offset: 0.2,
            camera_height: 0.25,
        }
    }
}

impl CarGeometry {
    /// Steering angle that produces the minimum turn radius.
    pub fn max_steer(&self) -> f64 {
        (self.wheelbase / self.min_turn_radius).atan()
    }
}

/// Plan-view obstacle shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Axis lengths `w` (along the local x axis) and `h`, rotated by `angle`.
    Rect {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        angle: f64,
    },
    Disc { cx: f64, cy: f64, r: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub shape: Shape,
    pub height: f64,
    pub texture_id: u32,
}

/// Gaussian start-pose distribution.
#[derive(Clone, Copy, Debug)]
pub struct StartRegion {
    pub mean: Pose,
    pub std_x: f64,
    pub std_y: f64,
    pub std_theta: f64,
}

#[derive(Clone, Debug)]
pub struct WorldMap {
    /// Name episodes and datasets refer back to.
    pub id: String,
    /// Lateral extent (y axis).
    pub room_width: f64,
    /// Driving-direction extent (x axis).
    pub room_length: f64,
    pub wall_height: f64,
    pub obstacles: Vec<Obstacle>,
    pub start: Option<StartRegion>,
    /// Far-side finish line `x = goal_x` used by closed-loop trials.
    pub goal_x: Option<f64>,
    pub texture_seed: u64,
    pub texture_richness: f64,
}

/// Speed, step size, and actuation-noise levels for rollouts.
#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    pub dt: f64,
    pub speed: f64,
    /// Std of the Gaussian added to each applied steering angle, radians.
    pub steering_noise_std: f64,
    /// Std of the Gaussian position slip added per step along each axis, meters.
    pub slip_noise_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: DEFAULT_DT,
            speed: 0.8,
            steering_noise_std: 0.02,
            slip_noise_std: 0.002,
        }
    }
}

impl SimConfig {
    pub fn noise_free(mut self) -> Self {
        self.steering_noise_std = 0.0;
        self.slip_noise_std = 0.0;
        self
    }
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("map line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("map has no room directive")]
    MissingRoom,
    #[error("obstacle {index} extends outside the room")]
    ObstacleOutsideRoom { index: usize },
    #[error("non-positive dimension in {what}")]
    NonPositiveDimension { what: String },
    #[error("map has no start region")]
    NoStartRegion,
    #[error("start region mean is in collision or outside the room")]
    StartRegionBlocked,
    #[error("no collision-free start pose found in {attempts} attempts")]
    NoCollisionFreeStart { attempts: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl WorldMap {
    /// Parses the line-oriented map format.
    ///
    /// Directives: `name ID`, `room W L H`, `rect CX CY W H ANGLE_DEG TEX`,
    /// `disc CX CY R TEX`, `start X Y THETA_DEG SX SY STHETA_DEG`,
    /// `texture SEED RICHNESS`, `goal X`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<WorldMap, WorldError> {
        let mut id = String::from("map");
        let mut room: Option<(f64, f64, f64)> = None;
        let mut obstacles = Vec::new();
        let mut start = None;
        let mut goal_x = None;
        let mut texture_seed = 1u64;
        let mut texture_richness = 0.7;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut it = body.split_whitespace();
            let word = it.next().unwrap();
            let args: Vec<&str> = it.collect();
            let err = |msg: String| WorldError::Parse { line, msg };
            let floats = |n: usize| -> Result<Vec<f64>, WorldError> {
                if args.len() != n {
                    return Err(err(format!("{word} expects {n} arguments, got {}", args.len())));
                }
                args.iter()
                    .map(|a| {
                        a.parse::<f64>()
                            .map_err(|_| err(format!("bad number {a:?}")))
                    })
                    .collect()
            };
            match word {
                "room" => {
                    let v = floats(3)?;
                    room = Some((v[0], v[1], v[2]));
                }
                "rect" => {
                    let v = floats(6)?;
                    obstacles.push(Obstacle {
                        shape: Shape::Rect {
                            cx: v[0],
                            cy: v[1],
                            w: v[2],
                            h: v[3],
                            angle: v[4].to_radians(),
                        },
                        height: OBSTACLE_HEIGHT,
                        texture_id: v[5] as u32,
                    });
                }
                "disc" => {
                    let v = floats(4)?;
                    obstacles.push(Obstacle {
                        shape: Shape::Disc {
                            cx: v[0],
                            cy: v[1],
                            r: v[2],
                        },
                        height: OBSTACLE_HEIGHT,
                        texture_id: v[3] as u32,
                    });
                }
                "start" => {
                    let v = floats(6)?;
                    start = Some(StartRegion {
                        mean: Pose::new(v[0], v[1], v[2].to_radians()),
                        std_x: v[3],
                        std_y: v[4],
                        std_theta: v[5].to_radians(),
                    });
                }
                "texture" => {
                    if args.len() != 2 {
                        return Err(err(format!(
                            "texture expects 2 arguments, got {}",
                            args.len()
                        )));
                    }
                    texture_seed = args[0]
                        .parse::<u64>()
                        .map_err(|_| err(format!("bad seed {:?}", args[0])))?;
                    texture_richness = args[1]
                        .parse::<f64>()
                        .map_err(|_| err(format!("bad richness {:?}", args[1])))?;
                }
                "goal" => {
                    let v = floats(1)?;
                    goal_x = Some(v[0]);
                }
                "name" => {
                    if args.len() != 1 {
                        return Err(err(format!("name expects 1 argument, got {}", args.len())));
                    }
                    id = args[0].to_string();
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }

        let (room_width, room_length, wall_height) = room.ok_or(WorldError::MissingRoom)?;
        let map = WorldMap {
            id,
            room_width,
            room_length,
            wall_height,
            obstacles,
            start,
            goal_x,
            texture_seed,
            texture_richness,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &std::path::Path) -> Result<WorldMap, WorldError> {
        WorldMap::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        for (what, v) in [
            ("room width", self.room_width),
            ("room length", self.room_length),
            ("wall height", self.wall_height),
        ] {
            // NaN also lands here.
            if v <= 0.0 || v.is_nan() {
                return Err(WorldError::NonPositiveDimension { what: what.into() });
            }
        }
        for (index, ob) in self.obstacles.iter().enumerate() {
            let (lo_x, hi_x, lo_y, hi_y) = shape_aabb(&ob.shape);
            let dims_ok = match ob.shape {
                Shape::Rect { w, h, .. } => w > 0.0 && h > 0.0,
                Shape::Disc { r, .. } => r > 0.0,
            };
            if !dims_ok {
                return Err(WorldError::NonPositiveDimension {
                    what: format!("obstacle {index}"),
                });
            }
            if lo_x < 0.0 || lo_y < 0.0 || hi_x > self.room_length || hi_y > self.room_width {
                return Err(WorldError::ObstacleOutsideRoom { index });
            }
        }
        Ok(())
    }

    /// Serializes back into the map format; `parse` of the result round-trips.
    pub fn to_map_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "room {} {} {}",
            self.room_width, self.room_length, self.wall_height
        );
        let _ = writeln!(s, "texture {} {}", self.texture_seed, self.texture_richness);
        if let Some(st) = &self.start {
            let _ = writeln!(
                s,
                "start {} {} {} {} {} {}",
                st.mean.x,
                st.mean.y,
                st.mean.theta.to_degrees(),
                st.std_x,
                st.std_y,
                st.std_theta.to_degrees()
            );
        }
        if let Some(g) = self.goal_x {
            let _ = writeln!(s, "goal {g}");
        }
        for ob in &self.obstacles {
            match ob.shape {
                Shape::Rect { cx, cy, w, h, angle } => {
                    let _ = writeln!(
                        s,
                        "rect {cx} {cy} {w} {h} {} {}",
                        angle.to_degrees(),
                        ob.texture_id
                    );
                }
                Shape::Disc { cx, cy, r } => {
                    let _ = writeln!(s, "disc {cx} {cy} {r} {}", ob.texture_id);
                }
            }
        }
        s
    }

    /// Translates everything (room origin stays at zero; contents shift is
    /// not representable, so this shifts the frame: used by invariance tests).
    pub fn mirrored_across_midline(&self) -> WorldMap {
        let mid = self.room_width / 2.0;
        let refl = |y: f64| 2.0 * mid - y;
        let mut m = self.clone();
        for ob in &mut m.obstacles {
            ob.shape = match ob.shape {
                Shape::Rect { cx, cy, w, h, angle } => Shape::Rect {
                    cx,
                    cy: refl(cy),
                    w,
                    h,
                    angle: -angle,
                },
                Shape::Disc { cx, cy, r } => Shape::Disc { cx, cy: refl(cy), r },
            };
        }
        if let Some(st) = &mut m.start {
            st.mean = Pose::new(st.mean.x, refl(st.mean.y), -st.mean.theta);
        }
        m
    }
}

fn shape_aabb(shape: &Shape) -> (f64, f64, f64, f64) {
    match *shape {
        Shape::Rect { cx, cy, w, h, angle } => {
            let (s, c) = angle.sin_cos();
            let ex = (w / 2.0 * c).abs() + (h / 2.0 * s).abs();
            let ey = (w / 2.0 * s).abs() + (h / 2.0 * c).abs();
            (cx - ex, cx + ex, cy - ey, cy + ey)
        }
        Shape::Disc { cx, cy, r } => (cx - r, cx + r, cy - r, cy + r),
    }
}

/// Corners of the car footprint, counterclockwise.
pub fn footprint_corners(pose: &Pose, geom: &CarGeometry) -> [(f64, f64); 4] {
    let (s, c) = pose.theta.sin_cos();
    let hl = geom.footprint_length / 2.0;
    let hw = geom.footprint_width / 2.0;
    let mut out = [(0.0, 0.0); 4];
    for (i, (dx, dy)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .into_iter()
        .enumerate()
    {
        out[i] = (pose.x + dx * c - dy * s, pose.y + dx * s + dy * c);
    }
    out
}

/// True when the footprint overlaps any obstacle or leaves the room.
pub fn collision_check(map: &WorldMap, pose: &Pose, geom: &CarGeometry) -> bool {
    let corners = footprint_corners(pose, geom);
    for &(x, y) in &corners {
        if x < 0.0 || x > map.room_length || y < 0.0 || y > map.room_width {
            return true;
        }
    }
    for ob in &map.obstacles {
        match ob.shape {
            Shape::Rect { cx, cy, w, h, angle } => {
                if obb_overlap(
                    (pose.x, pose.y),
                    pose.theta,
                    (geom.footprint_length / 2.0, geom.footprint_width / 2.0),
                    (cx, cy),
                    angle,
                    (w / 2.0, h / 2.0),
                ) {
                    return true;
                }
            }
            Shape::Disc { cx, cy, r } => {
                if point_obb_distance((cx, cy), (pose.x, pose.y), pose.theta,
                    geom.footprint_length / 2.0, geom.footprint_width / 2.0) <= r {
                    return true;
                }
            }
        }
    }
    false
}

/// Separating-axis test between two oriented boxes given by center, angle,
/// and half extents.
fn obb_overlap(
    ca: (f64, f64),
    ta: f64,
    ha: (f64, f64),
    cb: (f64, f64),
    tb: f64,
    hb: (f64, f64),
) -> bool {
    let axes = |t: f64| {
        let (s, c) = t.sin_cos();
        [(c, s), (-s, c)]
    };
    let a_axes = axes(ta);
    let b_axes = axes(tb);
    let d = (cb.0 - ca.0, cb.1 - ca.1);
    for &(ux, uy) in a_axes.iter().chain(b_axes.iter()) {
        let ra = ha.0 * (ux * a_axes[0].0 + uy * a_axes[0].1).abs()
            + ha.1 * (ux * a_axes[1].0 + uy * a_axes[1].1).abs();
        let rb = hb.0 * (ux * b_axes[0].0 + uy * b_axes[0].1).abs()
            + hb.1 * (ux * b_axes[1].0 + uy * b_axes[1].1).abs();
        if (ux * d.0 + uy * d.1).abs() > ra + rb {
            return false;
        }
    }
    true
}

/// Distance from a point to an oriented box (zero inside).
fn point_obb_distance(p: (f64, f64), center: (f64, f64), theta: f64, hx: f64, hy: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let dx = p.0 - center.0;
    let dy = p.1 - center.1;
    let lx = dx * c + dy * s;
    let ly = -dx * s + dy * c;
    let ox = (lx.abs() - hx).max(0.0);
    let oy = (ly.abs() - hy).max(0.0);
    ox.hypot(oy)
}

/// Distance from a point to the nearest obstacle boundary or wall.
/// Negative inside an obstacle or outside the room.
pub fn clearance(map: &WorldMap, x: f64, y: f64) -> f64 {
    let mut best = x
        .min(map.room_length - x)
        .min(y)
        .min(map.room_width - y);
    for ob in &map.obstacles {
        let d = match ob.shape {
            Shape::Rect { cx, cy, w, h, angle } => {
                signed_obb_distance((x, y), (cx, cy), angle, w / 2.0, h / 2.0)
            }
            Shape::Disc { cx, cy, r } => (x - cx).hypot(y - cy) - r,
        };
        best = best.min(d);
    }
    best
}

fn signed_obb_distance(p: (f64, f64), center: (f64, f64), theta: f64, hx: f64, hy: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let dx = p.0 - center.0;
    let dy = p.1 - center.1;
    let lx = dx * c + dy * s;
    let ly = -dx * s + dy * c;
    let qx = lx.abs() - hx;
    let qy = ly.abs() - hy;
    if qx > 0.0 || qy > 0.0 {
        qx.max(0.0).hypot(qy.max(0.0))
    } else {
        qx.max(qy)
    }
}

/// One Euler step of the kinematic bicycle model with actuation noise.
///
/// The commanded steering is clamped to the geometric limit, then perturbed
/// by Gaussian noise; Gaussian slip is added to the position. Draw order is
/// fixed: steering, slip x, slip y. Zero-std noise draws nothing, so a
/// noise-free step never touches the generator.
pub fn step_kinematics<R: Rng>(
    pose: &Pose,
    steering: f64,
    cfg: &SimConfig,
    geom: &CarGeometry,
    rng: &mut R,
) -> Pose {
    let limit = geom.max_steer();
    let mut s = steering.clamp(-limit, limit);
    if cfg.steering_noise_std > 0.0 {
        s += Normal::new(0.0, cfg.steering_noise_std).unwrap().sample(rng);
    }
    let v = cfg.speed.min(geom.max_speed);
    let mut x = pose.x + v * pose.theta.cos() * cfg.dt;
    let mut y = pose.y + v * pose.theta.sin() * cfg.dt;
    if cfg.slip_noise_std > 0.0 {
        let slip = Normal::new(0.0, cfg.slip_noise_std).unwrap();
        x += slip.sample(rng);
        y += slip.sample(rng);
    }
    let theta = wrap_angle(pose.theta + v / geom.wheelbase * s.tan() * cfg.dt);
    Pose { x, y, theta }
}

/// Draws a collision-free pose from the start region.
pub fn sample_start_pose<R: Rng>(
    map: &WorldMap,
    geom: &CarGeometry,
    rng: &mut R,
) -> Result<Pose, WorldError> {
    let region = map.start.as_ref().ok_or(WorldError::NoStartRegion)?;
    let attempts = 1000;
    for _ in 0..attempts {
        let dx = Normal::new(0.0, region.std_x.max(0.0)).unwrap().sample(rng);
        let dy = Normal::new(0.0, region.std_y.max(0.0)).unwrap().sample(rng);
        let dt = Normal::new(0.0, region.std_theta.max(0.0)).unwrap().sample(rng);
        let pose = Pose::new(region.mean.x + dx, region.mean.y + dy, region.mean.theta + dt);
        if !collision_check(map, &pose, geom) {
            return Ok(pose);
        }
    }
    Err(WorldError::NoCollisionFreeStart { attempts })
}

/// The stock 8 m x 5 m training room: two boxes mid-room forming three
/// gates, start region near the x = 0 wall.
pub fn training_room() -> WorldMap {
    WorldMap {
        id: "training-room".into(),
        room_width: 5.0,
        room_length: 8.0,
        wall_height: 2.5,
        obstacles: vec![
            Obstacle {
                shape: Shape::Rect {
                    cx: 4.0,
                    cy: 1.7,
                    w: 0.6,
                    h: 0.6,
                    angle: 0.0,
                },
                height: OBSTACLE_HEIGHT,
                texture_id: 10,
            },
            Obstacle {
                shape: Shape::Rect {
                    cx: 4.0,
                    cy: 3.3,
                    w: 0.6,
                    h: 0.6,
                    angle: 0.0,
                },
                height: OBSTACLE_HEIGHT,
                texture_id: 11,
            },
        ],
        start: Some(StartRegion {
            // Far enough from the x = 0 wall that the loop's final turn
            // circle (radius 1.2 about a center one radius left of here)
            // clears it.
            mean: Pose::new(1.85, 1.9, 0.0),
            std_x: 0.15,
            std_y: 0.15,
            std_theta: 10f64.to_radians(),
        }),
        goal_x: Some(7.5),
        texture_seed: 101,
        texture_richness: 0.7,
    }
}

/// The stock held-out room: same footprint as the training room but a
/// staggered three-box layout and different surface textures, so policies
/// trained next door see both new geometry and new appearance.
pub fn test_room() -> WorldMap {
    WorldMap {
        id: "test-room".into(),
        room_width: 5.0,
        room_length: 8.0,
        wall_height: 2.5,
        obstacles: vec![
            Obstacle {
                shape: Shape::Rect {
                    cx: 3.0,
                    cy: 1.6,
                    w: 0.7,
                    h: 0.7,
                    angle: 0.0,
                },
                height: OBSTACLE_HEIGHT,
                texture_id: 20,
            },
            Obstacle {
                shape: Shape::Rect {
                    cx: 3.2,
                    cy: 3.6,
                    w: 0.6,
                    h: 0.6,
                    angle: 0.0,
                },
                height: OBSTACLE_HEIGHT,
                texture_id: 21,
            },
            Obstacle {
                shape: Shape::Rect {
                    cx: 5.4,
                    cy: 2.4,
                    w: 0.8,
                    h: 0.6,
                    angle: 0.0,
                },
                height: OBSTACLE_HEIGHT,
                texture_id: 22,
            },
        ],
        start: Some(StartRegion {
            mean: Pose::new(1.85, 2.2, 0.0),
            std_x: 0.15,
            std_y: 0.15,
            std_theta: 10f64.to_radians(),
        }),
        goal_x: Some(7.5),
        texture_seed: 4242,
        texture_richness: 0.9,
    }
}
