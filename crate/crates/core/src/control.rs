//! Route tracking: a PID controller on a combined heading plus cross-track
//! error signal, and closed-loop episode rollouts that record the expert
//! steering stream.

use crate::dubins::{Route, SAMPLE_SPACING};
use crate::world::{
    collision_check, step_kinematics, wrap_angle, CarGeometry, Pose, SimConfig, WorldMap,
};
use rand::Rng;

/// How close to the route's final pose counts as arrival, meters.
pub const COMPLETION_RADIUS: f64 = 0.2;
/// Heading reference is read this far ahead of the nearest sample, meters.
pub const LOOKAHEAD: f64 = 0.5;
/// Rollouts give up after this multiple of the nominal route duration.
const TIMEOUT_FACTOR: f64 = 3.0;
/// Reference samples considered ahead of current progress when projecting
/// the car onto the route (2 m at the stock sampling step).
const PROGRESS_WINDOW: usize = 40;

#[derive(Clone, Copy, Debug)]
pub struct ControllerGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Radians of heading correction per meter of cross-track error.
    pub k_cross: f64,
    /// Bound on the accumulated error integral.
    pub integral_clamp: f64,
    pub steering_limit: f64,
}

impl ControllerGains {
    /// Hand-tuned defaults; the steering limit comes from the car geometry.
    pub fn for_car(geom: &CarGeometry) -> Self {
        ControllerGains {
            kp: 1.2,
            ki: 0.05,
            kd: 0.3,
            k_cross: 1.5,
            integral_clamp: 0.5,
            steering_limit: geom.max_steer(),
        }
    }
}

/// Integral and derivative memory, one per episode.
#[derive(Clone, Copy, Debug, Default)]
pub struct ControllerState {
    integral: f64,
    prev_error: Option<f64>,
}

impl ControllerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// What ended an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminationCause {
    Completed,
    Collision,
    /// No route could be planned; the log carries no frames.
    PlanningFailure,
    /// The controller never reached the route end within the time budget.
    Timeout,
}

/// One recorded rollout. All three lists share a length and an index maps
/// across them; timestamps advance by exactly the rollout dt.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub poses: Vec<Pose>,
    pub steering: Vec<f64>,
    pub timestamps: Vec<f64>,
    pub terminated_by: TerminationCause,
}

impl EpisodeLog {
    pub fn empty(cause: TerminationCause) -> Self {
        EpisodeLog {
            poses: Vec::new(),
            steering: Vec::new(),
            timestamps: Vec::new(),
            terminated_by: cause,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Index of the reference segment nearest to `p`, the clamped projection
/// parameter on it, and the distance. A single-pose reference uses a
/// zero-length segment 0.
fn nearest_segment(p: (f64, f64), reference: &[Pose]) -> (usize, f64, f64) {
    assert!(!reference.is_empty(), "empty reference polyline");
    if reference.len() == 1 {
        let d = (p.0 - reference[0].x).hypot(p.1 - reference[0].y);
        return (0, 0.0, d);
    }
    let mut best = (0usize, 0.0f64, f64::INFINITY);
    for (i, pair) in reference.windows(2).enumerate() {
        let (ax, ay) = (pair[0].x, pair[0].y);
        let (bx, by) = (pair[1].x, pair[1].y);
        let (ex, ey) = (bx - ax, by - ay);
        let len_sq = ex * ex + ey * ey;
        let t = if len_sq < 1e-24 {
            0.0
        } else {
            (((p.0 - ax) * ex + (p.1 - ay) * ey) / len_sq).clamp(0.0, 1.0)
        };
        let (cx, cy) = (ax + t * ex, ay + t * ey);
        let d = (p.0 - cx).hypot(p.1 - cy);
        if d < best.2 {
            best = (i, t, d);
        }
    }
    best
}

/// Signed perpendicular distance from the pose position to the reference
/// polyline, positive when the pose is left of the local path direction.
pub fn cross_track_error(pose: &Pose, reference: &[Pose]) -> f64 {
    let p = (pose.x, pose.y);
    let (i, t, d) = nearest_segment(p, reference);
    let dir = if reference.len() == 1 {
        reference[0].direction()
    } else {
        let a = &reference[i];
        let b = &reference[i + 1];
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let n = ex.hypot(ey);
        if n < 1e-12 {
            a.direction()
        } else {
            (ex / n, ey / n)
        }
    };
    let (ax, ay) = if reference.len() == 1 {
        (reference[0].x, reference[0].y)
    } else {
        let a = &reference[i];
        let b = &reference[i + 1];
        (a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
    };
    let cross = dir.0 * (p.1 - ay) - dir.1 * (p.0 - ax);
    if cross >= 0.0 {
        d
    } else {
        -d
    }
}

/// Reference heading at a fixed lookahead past the nearest sample.
fn lookahead_heading(pose: &Pose, reference: &[Pose]) -> f64 {
    let (i, t, _) = nearest_segment((pose.x, pose.y), reference);
    // Walk forward along the polyline from the projection point.
    let mut remaining = LOOKAHEAD;
    let mut j = i;
    let mut frac = t;
    while j + 1 < reference.len() {
        let seg = reference[j].distance(&reference[j + 1]);
        let left = seg * (1.0 - frac);
        if left >= remaining {
            return reference[j + 1].theta;
        }
        remaining -= left;
        j += 1;
        frac = 0.0;
    }
    reference[reference.len() - 1].theta
}

/// One PID update. The error blends heading error with scaled cross-track
/// error; the output is clamped to the steering limit.
pub fn steering_command(
    pose: &Pose,
    reference: &[Pose],
    gains: &ControllerGains,
    state: &mut ControllerState,
    dt: f64,
) -> f64 {
    let cte = cross_track_error(pose, reference);
    let heading_error = wrap_angle(lookahead_heading(pose, reference) - pose.theta);
    // cte is positive left and positive steering turns left, so the
    // cross-track term must oppose the offset to pull back onto the path.
    let e = heading_error - gains.k_cross * cte;
    state.integral =
        (state.integral + e * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
    let derivative = match state.prev_error {
        Some(prev) if dt > 0.0 => (e - prev) / dt,
        _ => 0.0,
    };
    state.prev_error = Some(e);
    let raw = gains.kp * e + gains.ki * state.integral + gains.kd * derivative;
    raw.clamp(-gains.steering_limit, gains.steering_limit)
}

/// Rolls the car along a planned route under closed-loop control, recording
/// pose, commanded steering, and timestamp at every step until arrival,
/// collision, or timeout.
///
/// The car starts at `from`, which is usually the route's first waypoint but
/// may sit off the route, in which case the controller steers onto it.
pub fn drive_route<R: Rng>(
    map: &WorldMap,
    route: &Route,
    from: &Pose,
    cfg: &SimConfig,
    gains: &ControllerGains,
    geom: &CarGeometry,
    rng: &mut R,
) -> EpisodeLog {
    let reference = route.sample(SAMPLE_SPACING);
    let goal = route.end();
    let speed = cfg.speed.min(geom.max_speed).max(1e-6);
    let nominal_steps = route.total_length() / speed / cfg.dt;
    let max_steps = ((nominal_steps * TIMEOUT_FACTOR) as usize).max(60);
    // Loop routes end where they start, so arrival additionally requires
    // having progressed into the last half meter of the reference.
    let tail_start = reference
        .len()
        .saturating_sub(1 + (0.5 / SAMPLE_SPACING) as usize);

    let mut log = EpisodeLog::empty(TerminationCause::Timeout);
    let mut pose = *from;
    let mut state = ControllerState::new();
    let mut progress = 0usize;
    for k in 0..max_steps {
        // Project onto a window ahead of current progress, not the whole
        // reference: where a route crosses or closes on itself, the global
        // nearest segment can belong to another leg entirely.
        let window_end = (progress + PROGRESS_WINDOW).min(reference.len() - 1);
        let local = &reference[progress..=window_end];
        let (near, _, _) = nearest_segment((pose.x, pose.y), local);
        progress += near;
        if progress >= tail_start && pose.distance(&goal) < COMPLETION_RADIUS {
            log.terminated_by = TerminationCause::Completed;
            return log;
        }
        let steer = steering_command(&pose, local, gains, &mut state, cfg.dt);
        log.poses.push(pose);
        log.steering.push(steer);
        log.timestamps.push(k as f64 * cfg.dt);
        pose = step_kinematics(&pose, steer, cfg, geom, rng);
        if collision_check(map, &pose, geom) {
            log.terminated_by = TerminationCause::Collision;
            return log;
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dubins::{dubins_shortest_path, plan_training_route, GateChoice};
    use crate::rng::substream;
    use crate::world::training_room;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn straight_reference(n: usize, spacing: f64) -> Vec<Pose> {
        (0..n)
            .map(|i| Pose::new(i as f64 * spacing, 0.0, 0.0))
            .collect()
    }

    fn empty_room() -> WorldMap {
        WorldMap {
            id: "empty".into(),
            room_width: 6.0,
            room_length: 12.0,
            wall_height: 2.5,
            obstacles: Vec::new(),
            start: None,
            goal_x: None,
            texture_seed: 0,
            texture_richness: 0.5,
        }
    }

    fn route_from_leg(a: Pose, b: Pose, r: f64) -> Route {
        let leg = dubins_shortest_path(&a, &b, r).unwrap();
        Route {
            waypoints: vec![a, b],
            legs: vec![leg],
            gate: GateChoice::Center,
            safety_margin: 0.3,
        }
    }

    #[test]
    fn cross_track_error_is_zero_on_the_path() {
        let reference = straight_reference(11, 0.5);
        let pose = Pose::new(2.25, 0.0, 0.3);
        assert_relative_eq!(cross_track_error(&pose, &reference), 0.0);
    }

    #[test]
    fn cross_track_error_sign_is_positive_left() {
        let reference = straight_reference(11, 0.5);
        assert_relative_eq!(
            cross_track_error(&Pose::new(5.0, 0.3, 0.0), &reference),
            0.3
        );
        assert_relative_eq!(
            cross_track_error(&Pose::new(5.0, -0.3, 0.0), &reference),
            -0.3
        );
    }

    // Brute-force projection onto every segment at fine parameter steps.
    fn oracle_unsigned_distance(p: (f64, f64), reference: &[Pose]) -> f64 {
        let mut best = f64::INFINITY;
        for pair in reference.windows(2) {
            for k in 0..=1000 {
                let t = k as f64 / 1000.0;
                let x = pair[0].x + t * (pair[1].x - pair[0].x);
                let y = pair[0].y + t * (pair[1].y - pair[0].y);
                best = best.min((p.0 - x).hypot(p.1 - y));
            }
        }
        best
    }

    #[test]
    fn cross_track_magnitude_matches_projection_oracle() {
        let mut rng = substream(0xC7E, 0);
        for _ in 0..50 {
            let mut reference = Vec::new();
            let mut x = 0.0;
            let mut y = 0.0;
            for _ in 0..12 {
                reference.push(Pose::new(x, y, 0.0));
                x += rng.gen_range(0.05..0.6);
                y += rng.gen_range(-0.4..0.4);
            }
            let p = (rng.gen_range(-0.5..4.0), rng.gen_range(-1.5..1.5));
            let pose = Pose::new(p.0, p.1, 0.0);
            let got = cross_track_error(&pose, &reference).abs();
            let want = oracle_unsigned_distance(p, &reference);
            // The sampled oracle is itself 1e-4 coarse; refine near its best.
            assert!(
                (got - want).abs() < 1e-4,
                "cte {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn zero_error_with_empty_memory_steers_straight() {
        let reference = straight_reference(11, 0.5);
        let gains = ControllerGains::for_car(&CarGeometry::default());
        let mut state = ControllerState::new();
        let out = steering_command(
            &Pose::new(2.0, 0.0, 0.0),
            &reference,
            &gains,
            &mut state,
            1.0 / 30.0,
        );
        assert_relative_eq!(out, 0.0);
    }

    #[test]
    fn pure_proportional_tracks_heading_error() {
        let reference = straight_reference(11, 0.5);
        let gains = ControllerGains {
            kp: 1.0,
            ki: 0.0,
            kd: 0.0,
            k_cross: 0.0,
            integral_clamp: 0.5,
            steering_limit: 1.0,
        };
        let mut state = ControllerState::new();
        let out = steering_command(
            &Pose::new(2.0, 0.0, -0.2),
            &reference,
            &gains,
            &mut state,
            1.0 / 30.0,
        );
        assert_relative_eq!(out, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn huge_error_saturates_at_the_limit() {
        let reference = vec![Pose::new(0.0, 0.0, 0.0), Pose::new(1.0, 0.0, 0.0)];
        let gains = ControllerGains {
            kp: 1.0,
            ki: 0.0,
            kd: 0.0,
            k_cross: 1000.0,
            integral_clamp: 0.5,
            steering_limit: 0.25,
        };
        let mut state = ControllerState::new();
        let out = steering_command(
            &Pose::new(0.5, -1.0, 0.0),
            &reference,
            &gains,
            &mut state,
            1.0 / 30.0,
        );
        assert_relative_eq!(out, 0.25);
    }

    proptest! {
        #[test]
        fn steering_never_exceeds_the_limit(
            px in -2.0..6.0f64, py in -3.0..3.0f64, th in -3.2..3.2f64,
            kp in 0.0..5.0f64, ki in 0.0..1.0f64, kd in 0.0..2.0f64,
            kc in 0.0..10.0f64, reps in 1usize..20,
        ) {
            let reference = straight_reference(9, 0.5);
            let gains = ControllerGains {
                kp, ki, kd, k_cross: kc,
                integral_clamp: 0.5,
                steering_limit: 0.2449786631268641,
            };
            let mut state = ControllerState::new();
            let pose = Pose::new(px, py, th);
            for _ in 0..reps {
                let out = steering_command(&pose, &reference, &gains, &mut state, 1.0/30.0);
                prop_assert!(out.abs() <= gains.steering_limit + 1e-15);
            }
        }
    }

    #[test]
    fn mirrored_world_negates_error_and_command() {
        // Reflect across the x axis: y and theta flip sign.
        let mirror = |p: &Pose| Pose::new(p.x, -p.y, -p.theta);
        let a = Pose::new(0.0, 0.2, 0.1);
        let b = Pose::new(3.0, 1.4, 0.7);
        let leg = dubins_shortest_path(&a, &b, 1.2).unwrap();
        let reference = crate::dubins::sample_path(&leg, SAMPLE_SPACING);
        let mirrored: Vec<Pose> = reference.iter().map(&mirror).collect();
        let gains = ControllerGains {
            kp: 1.3,
            ki: 0.0,
            kd: 0.0,
            k_cross: 2.0,
            integral_clamp: 0.5,
            steering_limit: 0.4,
        };
        let pose = Pose::new(1.1, 0.9, 0.5);
        let cte = cross_track_error(&pose, &reference);
        let cte_m = cross_track_error(&mirror(&pose), &mirrored);
        assert_relative_eq!(cte, -cte_m, epsilon = 1e-12);
        let mut s1 = ControllerState::new();
        let mut s2 = ControllerState::new();
        let out = steering_command(&pose, &reference, &gains, &mut s1, 1.0 / 30.0);
        let out_m =
            steering_command(&mirror(&pose), &mirrored, &gains, &mut s2, 1.0 / 30.0);
        assert_relative_eq!(out, -out_m, epsilon = 1e-12);
    }

    #[test]
    fn straight_route_converges_and_completes() {
        let map = empty_room();
        let geom = CarGeometry::default();
        let route = route_from_leg(
            Pose::new(1.0, 3.0, 0.0),
            Pose::new(6.0, 3.0, 0.0),
            geom.min_turn_radius,
        );
        let cfg = SimConfig::default().noise_free();
        let gains = ControllerGains::for_car(&geom);
        let mut rng = substream(7, 0);
        let log = drive_route(&map, &route, &route.waypoints[0], &cfg, &gains, &geom, &mut rng);
        assert_eq!(log.terminated_by, TerminationCause::Completed);
        let reference = route.sample(SAMPLE_SPACING);
        let final_cte = cross_track_error(log.poses.last().unwrap(), &reference);
        assert!(final_cte.abs() < 0.01, "final cte {final_cte}");
    }

    #[test]
    fn log_lists_align_and_timestamps_step_by_dt() {
        let map = empty_room();
        let geom = CarGeometry::default();
        let route = route_from_leg(
            Pose::new(1.0, 2.0, 0.0),
            Pose::new(7.0, 4.0, 0.5),
            geom.min_turn_radius,
        );
        let cfg = SimConfig::default();
        let gains = ControllerGains::for_car(&geom);
        let mut rng = substream(8, 0);
        let log = drive_route(&map, &route, &route.waypoints[0], &cfg, &gains, &geom, &mut rng);
        assert_eq!(log.poses.len(), log.steering.len());
        assert_eq!(log.poses.len(), log.timestamps.len());
        assert!(log.len() > 10);
        for (k, pair) in log.timestamps.windows(2).enumerate() {
            assert!(pair[1] > pair[0], "timestamps not increasing at {k}");
            assert_relative_eq!(pair[1] - pair[0], cfg.dt, epsilon = 1e-12);
        }
    }

    #[test]
    fn seeded_rollouts_are_bit_identical() {
        let map = training_room();
        let geom = CarGeometry::default();
        let start = map.start.unwrap().mean;
        let mut plan_rng = substream(42, 0);
        let route = plan_training_route(&map, &start, &geom, &mut plan_rng).unwrap();
        let cfg = SimConfig::default();
        let gains = ControllerGains::for_car(&geom);
        let run = |seed: u64| {
            let mut rng = substream(seed, 1);
            drive_route(&map, &route, &route.waypoints[0], &cfg, &gains, &geom, &mut rng)
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a, b);
        assert_eq!(a.terminated_by, TerminationCause::Completed);
    }

    #[test]
    fn noise_free_tracking_rms_is_tight_on_planned_routes() {
        let map = training_room();
        let geom = CarGeometry::default();
        let start = map.start.unwrap().mean;
        let cfg = SimConfig::default().noise_free();
        let gains = ControllerGains::for_car(&geom);
        for seed in 0..5u64 {
            let mut plan_rng = substream(seed, 0);
            let route = plan_training_route(&map, &start, &geom, &mut plan_rng).unwrap();
            let mut rng = substream(seed, 1);
            let log = drive_route(&map, &route, &route.waypoints[0], &cfg, &gains, &geom, &mut rng);
            assert_eq!(log.terminated_by, TerminationCause::Completed, "seed {seed}");
            let reference = route.sample(SAMPLE_SPACING);
            let mse: f64 = log
                .poses
                .iter()
                .map(|p| cross_track_error(p, &reference).powi(2))
                .sum::<f64>()
                / log.len() as f64;
            let rms = mse.sqrt();
            assert!(
                rms < 0.05 * geom.min_turn_radius,
                "seed {seed}: rms cross-track {rms}"
            );
        }
    }

    #[test]
    fn unreachable_goal_times_out() {
        let map = empty_room();
        let geom = CarGeometry::default();
        // Goal directly behind the start: the route is fine, but a crippled
        // steering limit keeps the car from ever turning onto it.
        let route = route_from_leg(
            Pose::new(6.0, 3.0, 0.0),
            Pose::new(1.0, 3.0, 0.0),
            geom.min_turn_radius,
        );
        let gains = ControllerGains {
            steering_limit: 1e-5,
            ..ControllerGains::for_car(&geom)
        };
        let cfg = SimConfig::default().noise_free();
        let mut rng = substream(9, 0);
        let big_room = WorldMap {
            room_width: 500.0,
            room_length: 500.0,
            ..map
        };
        let log = drive_route(&big_room, &route, &route.waypoints[0], &cfg, &gains, &geom, &mut rng);
        assert_eq!(log.terminated_by, TerminationCause::Timeout);
    }

    #[test]
    fn head_on_wall_ends_in_collision() {
        let map = empty_room();
        let geom = CarGeometry::default();
        // Reference aims straight at the east wall and beyond.
        let route = route_from_leg(
            Pose::new(9.0, 3.0, 0.0),
            Pose::new(11.995, 3.0, 0.0),
            geom.min_turn_radius,
        );
        let cfg = SimConfig::default().noise_free();
        let gains = ControllerGains::for_car(&geom);
        let mut rng = substream(10, 0);
        let log = drive_route(&map, &route, &route.waypoints[0], &cfg, &gains, &geom, &mut rng);
        assert_eq!(log.terminated_by, TerminationCause::Collision);
    }
}
