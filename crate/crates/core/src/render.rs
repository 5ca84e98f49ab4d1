//! Pinhole raycaster over the extruded room geometry. Produces ground-truth
//! z-depth maps and procedurally textured stereo color pairs from the car's
//! camera pose.

use crate::imageio::Image;
use crate::rng::hash01;
use crate::world::{CarGeometry, Pose, Shape, WorldMap};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Closest renderable distance; nearer hits clamp here, meters.
pub const NEAR_CLIP: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    /// Stereo camera center separation, meters.
    pub baseline: f64,
    pub max_range: f64,
    /// Integer upsampling applied when rendering for stereo matching.
    pub render_scale: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            width: 168,
            height: 94,
            focal_px: 160.0,
            baseline: 0.075,
            max_range: 10.0,
            render_scale: 2,
        }
    }
}

impl CameraModel {
    /// The model actually rendered for stereo matching: all pixel quantities
    /// multiplied by `render_scale`.
    pub fn upscaled(&self) -> CameraModel {
        CameraModel {
            width: self.width * self.render_scale,
            height: self.height * self.render_scale,
            focal_px: self.focal_px * self.render_scale as f64,
            render_scale: 1,
            ..*self
        }
    }
}

/// Camera center in world coordinates plus a horizontal optical-axis heading.
#[derive(Clone, Copy, Debug)]
pub struct CameraPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading: f64,
}

impl CameraPose {
    /// Mounted ahead of the car's reference point at the rig height.
    pub fn from_car(pose: &Pose, geom: &CarGeometry) -> Self {
        let (dx, dy) = pose.direction();
        CameraPose {
            x: pose.x + geom.camera_offset * dx,
            y: pose.y + geom.camera_offset * dy,
            z: geom.camera_height,
            heading: pose.theta,
        }
    }

    /// Unit vector pointing to the camera's right, in the ground plane.
    fn right(&self) -> (f64, f64) {
        (self.heading.sin(), -self.heading.cos())
    }

    fn shifted(&self, lateral: f64) -> CameraPose {
        let (rx, ry) = self.right();
        CameraPose {
            x: self.x + lateral * rx,
            y: self.y + lateral * ry,
            ..*self
        }
    }
}

/// Per-pixel z-depth along the optical axis with a validity mask. Invalid
/// pixels saw nothing within the camera's range.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthImage {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    /// Bounded inverse-depth encoding: clamp(near/z, 0, 1); invalid reads 0.
    pub fn inverse_normalized(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.valid)
            .map(|(&z, &ok)| if ok { (NEAR_CLIP / z).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    }

    /// Inverse depth quantized for the 16-bit grayscale container format.
    pub fn to_u16(&self) -> Vec<u16> {
        self.inverse_normalized()
            .iter()
            .map(|&g| (g * 65535.0).round() as u16)
            .collect()
    }
}

/// A rendered left/right color pair, planar 3-channel, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct StereoFrame {
    pub left: Image,
    pub right: Image,
}

/// What a ray hit, carrying the surface's texture identity and a 2D
/// parametrization of the hit point on it, in meters.
#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    tex: u64,
    u: f64,
    v: f64,
}

const TEX_GROUND: u64 = 0x6_0000;
const TEX_WALL: u64 = 0x7_0000;
const TEX_OBSTACLE: u64 = 0x8_0000;

fn closer(best: &mut Option<Hit>, cand: Hit) {
    if best.is_none_or(|b| cand.t < b.t) && cand.t > 1e-9 {
        *best = Some(cand);
    }
}

/// Intersects one ray with the whole scene. The direction's forward
/// component is 1, so the parameter t is z-depth directly.
fn cast(map: &WorldMap, o: (f64, f64, f64), d: (f64, f64, f64)) -> Option<Hit> {
    let mut best: Option<Hit> = None;

    // Floor.
    if d.2 < 0.0 {
        let t = -o.2 / d.2;
        closer(
            &mut best,
            Hit {
                t,
                tex: TEX_GROUND,
                u: o.0 + t * d.0,
                v: o.1 + t * d.1,
            },
        );
    }

    // Room walls: plane, lateral bound, height bound.
    let walls = [
        (0, 0.0, -1.0),
        (0, map.room_length, 1.0),
        (1, 0.0, -1.0),
        (1, map.room_width, 1.0),
    ];
    for (wall_id, (axis, plane, sign)) in walls.into_iter().enumerate() {
        let (oa, da) = if axis == 0 { (o.0, d.0) } else { (o.1, d.1) };
        if da * sign <= 0.0 {
            continue;
        }
        let t = (plane - oa) / da;
        if t <= 0.0 {
            continue;
        }
        let lateral = if axis == 0 { o.1 + t * d.1 } else { o.0 + t * d.0 };
        let lat_max = if axis == 0 { map.room_width } else { map.room_length };
        let z = o.2 + t * d.2;
        if lateral >= 0.0 && lateral <= lat_max && z >= 0.0 && z <= map.wall_height {
            closer(
                &mut best,
                Hit {
                    t,
                    tex: TEX_WALL + wall_id as u64,
                    u: lateral,
                    v: z,
                },
            );
        }
    }

    for ob in &map.obstacles {
        match ob.shape {
            Shape::Rect { cx, cy, w, h, angle } => {
                let (s, c) = angle.sin_cos();
                // Ray in the box frame.
                let lx = (o.0 - cx) * c + (o.1 - cy) * s;
                let ly = -(o.0 - cx) * s + (o.1 - cy) * c;
                let ldx = d.0 * c + d.1 * s;
                let ldy = -d.0 * s + d.1 * c;
                if let Some((t, u)) = slab_entry(lx, ly, ldx, ldy, w / 2.0, h / 2.0) {
                    let z = o.2 + t * d.2;
                    if t > 0.0 && z >= 0.0 && z <= ob.height {
                        closer(
                            &mut best,
                            Hit {
                                t,
                                tex: TEX_OBSTACLE + u64::from(ob.texture_id),
                                u,
                                v: z,
                            },
                        );
                    }
                }
            }
            Shape::Disc { cx, cy, r } => {
                let fx = o.0 - cx;
                let fy = o.1 - cy;
                let a = d.0 * d.0 + d.1 * d.1;
                let b = 2.0 * (fx * d.0 + fy * d.1);
                let cq = fx * fx + fy * fy - r * r;
                let disc = b * b - 4.0 * a * cq;
                if a > 1e-18 && disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let z = o.2 + t * d.2;
                    if t > 0.0 && z >= 0.0 && z <= ob.height {
                        let hx = fx + t * d.0;
                        let hy = fy + t * d.1;
                        closer(
                            &mut best,
                            Hit {
                                t,
                                tex: TEX_OBSTACLE + u64::from(ob.texture_id),
                                u: hy.atan2(hx) * r,
                                v: z,
                            },
                        );
                    }
                }
            }
        }
    }
    best
}

/// 2D slab test in the box frame. Returns entry parameter and a texture
/// coordinate along the struck face, offset per face to decorrelate faces.
fn slab_entry(ox: f64, oy: f64, dx: f64, dy: f64, hx: f64, hy: f64) -> Option<(f64, f64)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    // (axis, which face carries the entry)
    let mut entry_axis = 0;
    for (axis, (oa, da, ha)) in [(0, (ox, dx, hx)), (1, (oy, dy, hy))] {
        if da.abs() < 1e-15 {
            if oa.abs() > ha {
                return None;
            }
            continue;
        }
        let mut t0 = (-ha - oa) / da;
        let mut t1 = (ha - oa) / da;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            entry_axis = axis;
        }
        t_exit = t_exit.min(t1);
    }
    if t_enter > t_exit || !t_enter.is_finite() {
        return None;
    }
    let u = if entry_axis == 0 {
        oy + t_enter * dy
    } else {
        ox + t_enter * dx + 37.41
    };
    Some((t_enter, u))
}

/// Value-noise basis: smooth interpolation of lattice hashes at one scale.
fn lattice_noise(seed: u64, su: f64, sv: f64, salt: i64) -> f64 {
    let iu = su.floor();
    let iv = sv.floor();
    let fu = su - iu;
    let fv = sv - iv;
    let (iu, iv) = (iu as i64, iv as i64);
    let fade = |t: f64| t * t * (3.0 - 2.0 * t);
    let (wu, wv) = (fade(fu), fade(fv));
    let h = |du: i64, dv: i64| hash01(seed, iu + du, iv + dv, salt);
    let top = h(0, 0) + (h(1, 0) - h(0, 0)) * wu;
    let bot = h(0, 1) + (h(1, 1) - h(0, 1)) * wu;
    top + (bot - top) * wv
}

/// Procedural surface shade for one channel: three octaves of value noise
/// blended toward mid-gray by texture richness, then distance-attenuated.
fn surface_shade(map: &WorldMap, hit: &Hit, channel: usize) -> f64 {
    let seed = map.texture_seed ^ hit.tex.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let salt = channel as i64;
    let n = 0.5 * lattice_noise(seed, hit.u * 4.0, hit.v * 4.0, salt)
        + 0.3 * lattice_noise(seed, hit.u * 16.0, hit.v * 16.0, salt + 3)
        + 0.2 * lattice_noise(seed, hit.u * 64.0, hit.v * 64.0, salt + 6);
    let textured = 0.5 + (n - 0.5) * map.texture_richness.clamp(0.0, 1.0);
    (textured / (1.0 + 0.08 * hit.t)).clamp(0.0, 1.0)
}

fn pixel_ray(cam: &CameraModel, pose: &CameraPose, px: usize, py: usize) -> (f64, f64, f64) {
    let xc = (px as f64 + 0.5 - cam.width as f64 / 2.0) / cam.focal_px;
    let yc = (py as f64 + 0.5 - cam.height as f64 / 2.0) / cam.focal_px;
    let (fx, fy) = (pose.heading.cos(), pose.heading.sin());
    let (rx, ry) = pose.right();
    // Forward component 1; image rows look downward.
    (fx + xc * rx, fy + xc * ry, -yc)
}

/// Ground-truth z-depth for every pixel.
pub fn render_depth(map: &WorldMap, pose: &CameraPose, cam: &CameraModel) -> DepthImage {
    let mut depth = vec![0.0; cam.width * cam.height];
    let mut valid = vec![false; cam.width * cam.height];
    let o = (pose.x, pose.y, pose.z);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let d = pixel_ray(cam, pose, px, py);
            if let Some(hit) = cast(map, o, d) {
                if hit.t <= cam.max_range {
                    let i = py * cam.width + px;
                    depth[i] = hit.t.max(NEAR_CLIP);
                    valid[i] = true;
                }
            }
        }
    }
    DepthImage {
        width: cam.width,
        height: cam.height,
        depth,
        valid,
    }
}

/// One textured color render from an explicit camera center.
pub fn render_color(map: &WorldMap, pose: &CameraPose, cam: &CameraModel) -> Image {
    let mut img = Image::zeros(cam.width, cam.height, 3);
    let o = (pose.x, pose.y, pose.z);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let d = pixel_ray(cam, pose, px, py);
            if let Some(hit) = cast(map, o, d) {
                if hit.t <= cam.max_range {
                    for c in 0..3 {
                        img.set(c, px, py, surface_shade(map, &hit, c));
                    }
                }
            }
        }
    }
    img
}

/// Left and right renders, centers half a baseline either side of the rig.
pub fn render_stereo(map: &WorldMap, pose: &CameraPose, cam: &CameraModel) -> StereoFrame {
    StereoFrame {
        left: render_color(map, &pose.shifted(-cam.baseline / 2.0), cam),
        right: render_color(map, &pose.shifted(cam.baseline / 2.0), cam),
    }
}

/// Floating-blob corruption of depth sequences: white discs read as near
/// returns, black discs as dropouts. Off unless `per_frame_prob > 0`.
#[derive(Clone, Copy, Debug)]
pub struct ArtifactConfig {
    /// Chance a new blob spawns on each frame.
    pub per_frame_prob: f64,
    /// Blob radius range, pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Frames a blob persists.
    pub lifetime: usize,
    /// Per-frame center drift std, pixels.
    pub drift_std: f64,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        ArtifactConfig {
            per_frame_prob: 0.0,
            min_radius: 4.0,
            max_radius: 14.0,
            lifetime: 12,
            drift_std: 2.0,
        }
    }
}

struct Blob {
    x: f64,
    y: f64,
    r: f64,
    /// true paints near-white, false punches invalid holes.
    white: bool,
    remaining: usize,
}

/// Applies drifting blob artifacts in place, deterministically from `rng`.
pub fn inject_depth_artifacts<R: Rng>(frames: &mut [DepthImage], cfg: &ArtifactConfig, rng: &mut R) {
    if cfg.per_frame_prob <= 0.0 {
        return;
    }
    let drift = Normal::new(0.0, cfg.drift_std.max(1e-12)).unwrap();
    let mut blobs: Vec<Blob> = Vec::new();
    for frame in frames.iter_mut() {
        if rng.gen_bool(cfg.per_frame_prob.clamp(0.0, 1.0)) {
            blobs.push(Blob {
                x: rng.gen_range(0.0..frame.width as f64),
                y: rng.gen_range(0.0..frame.height as f64),
                r: rng.gen_range(cfg.min_radius..=cfg.max_radius),
                white: rng.gen_bool(0.5),
                remaining: cfg.lifetime,
            });
        }
        for blob in &mut blobs {
            stamp(frame, blob);
            blob.x += drift.sample(rng);
            blob.y += drift.sample(rng);
            blob.remaining -= 1;
        }
        blobs.retain(|b| b.remaining > 0);
    }
}

fn stamp(frame: &mut DepthImage, blob: &Blob) {
    let x0 = ((blob.x - blob.r).floor().max(0.0)) as usize;
    let y0 = ((blob.y - blob.r).floor().max(0.0)) as usize;
    let x1 = ((blob.x + blob.r).ceil()).min(frame.width as f64 - 1.0) as usize;
    let y1 = ((blob.y + blob.r).ceil()).min(frame.height as f64 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - blob.x;
            let dy = y as f64 - blob.y;
            if dx * dx + dy * dy <= blob.r * blob.r {
                let i = y * frame.width + x;
                if blob.white {
                    frame.depth[i] = NEAR_CLIP;
                    frame.valid[i] = true;
                } else {
                    frame.depth[i] = 0.0;
                    frame.valid[i] = false;
                }
            }
        }
    }
}
