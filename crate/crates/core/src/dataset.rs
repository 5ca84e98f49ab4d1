//! Episode recording, stacked-frame sample assembly, and the on-disk
//! dataset container.
//!
//! An episode couples one closed-loop rollout with the sensor streams
//! rendered at every logged pose. Samples stack 10 consecutive frames as
//! input and take the next 10 commanded steering angles as targets, so a
//! trained policy predicts a short horizon of expert commands from recent
//! observations.

use crate::control::{drive_route, ControllerGains, EpisodeLog, TerminationCause};
use crate::dubins::{plan_training_route, PlanError};
use crate::imageio::Image;
use crate::render::{
    inject_depth_artifacts, render_depth, render_stereo, ArtifactConfig, CameraModel, CameraPose,
    StereoFrame,
};
use crate::rng::substream;
use crate::sgm::{stereo_depth_pipeline, SgmParams};
use crate::world::{sample_start_pose, CarGeometry, SimConfig, WorldError, WorldMap};
use rand::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_MAGIC: [u8; 4] = *b"ROAM";
pub const FORMAT_VERSION: u32 = 1;
/// Frames stacked per sample input and steering targets per sample.
pub const STACK: usize = 10;
/// Shortest episode that yields a sample: a full input stack plus a full
/// target horizon.
pub const MIN_FRAMES: usize = 2 * STACK - 1;

/// Which sensor stream a dataset carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensorMode {
    Depth,
    Stereo,
}

impl SensorMode {
    fn code(self) -> u8 {
        match self {
            SensorMode::Depth => 0,
            SensorMode::Stereo => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SensorMode::Depth),
            1 => Some(SensorMode::Stereo),
            _ => None,
        }
    }

    /// f32 planes per frame in the container: depth stores one normalized
    /// inverse-depth plane, stereo stores both RGB views.
    pub fn channels(self) -> usize {
        match self {
            SensorMode::Depth => 1,
            SensorMode::Stereo => 6,
        }
    }
}

/// One rollout with its rendered sensor streams, aligned 1:1 with the log.
/// Depth frames are single-channel normalized inverse depth (near/z clamped
/// to [0, 1], invalid pixels 0), which is also their container encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub log: EpisodeLog,
    pub depth_frames: Vec<Image>,
    pub stereo_frames: Vec<StereoFrame>,
    pub map_id: String,
    pub seed: u64,
}

impl Episode {
    pub fn frame_count(&self) -> usize {
        self.log.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Catalog of a written dataset: stream mode, frame geometry, and the
/// per-episode train/validation assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub mode: SensorMode,
    pub episode_count: usize,
    pub height: usize,
    pub width: usize,
    pub dt: f64,
    pub split: Vec<Split>,
    pub seed: u64,
    pub map_id: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, not a dataset file")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("file ends before the declared content")]
    Truncated,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("manifest sidecar unreadable: {0}")]
    BadSidecar(String),
    #[error("unknown sensor mode byte {0}")]
    BadMode(u8),
    #[error("unknown termination byte {0}")]
    BadTermination(u8),
}

fn cause_code(c: TerminationCause) -> u8 {
    match c {
        TerminationCause::Completed => 0,
        TerminationCause::Collision => 1,
        TerminationCause::PlanningFailure => 2,
        TerminationCause::Timeout => 3,
    }
}

fn cause_from_code(b: u8) -> Option<TerminationCause> {
    match b {
        0 => Some(TerminationCause::Completed),
        1 => Some(TerminationCause::Collision),
        2 => Some(TerminationCause::PlanningFailure),
        3 => Some(TerminationCause::Timeout),
        _ => None,
    }
}

/// Recording switches beyond the defaults: reconstruct depth through the
/// stereo matcher instead of reading it from the renderer, or overlay
/// drifting blob artifacts on the depth stream.
#[derive(Clone, Copy, Debug, Default)]
pub struct RecordOptions {
    pub sgm_depth: bool,
    pub artifacts: Option<ArtifactConfig>,
}

/// Fresh start poses and route perturbations drawn per planning retry.
const PLAN_RETRIES: usize = 5;

/// Samples a start pose and drives one seeded loop. The loop itself is
/// anchored at the start region's mean, where its closure geometry holds for
/// every draw; the car begins at the sampled pose and the controller pulls
/// it onto the route within the first meter. Each retry redraws both the
/// pose and the route perturbations from a fresh stream.
fn seeded_rollout(
    map: &WorldMap,
    cfg: &SimConfig,
    gains: &ControllerGains,
    geom: &CarGeometry,
    seed: u64,
) -> Result<EpisodeLog, PlanError> {
    let region = map.start.as_ref().ok_or(WorldError::NoStartRegion)?;
    let anchor = region.mean;
    let mut last_err: Option<PlanError> = None;
    for attempt in 0..PLAN_RETRIES {
        let mut plan_rng = substream(seed, 16 + attempt as u64);
        let start = match sample_start_pose(map, geom, &mut plan_rng) {
            Ok(p) => p,
            Err(e) => {
                last_err = Some(e.into());
                continue;
            }
        };
        match plan_training_route(map, &anchor, geom, &mut plan_rng) {
            Ok(route) => {
                let mut sim_rng = substream(seed, 1);
                return Ok(drive_route(map, &route, &start, cfg, gains, geom, &mut sim_rng));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one planning attempt runs"))
}

/// Drives one seeded episode and renders both sensor streams at every logged
/// pose. Collision-terminated episodes are kept, flagged by the log;
/// planning failure is propagated once retries are exhausted.
///
/// Deterministic in `seed`: planning, rollout noise, and artifact draws use
/// separate derived streams.
pub fn record_episode(
    map: &WorldMap,
    cfg: &SimConfig,
    gains: &ControllerGains,
    geom: &CarGeometry,
    cam: &CameraModel,
    seed: u64,
    opts: &RecordOptions,
) -> Result<Episode, PlanError> {
    let log = seeded_rollout(map, cfg, gains, geom, seed)?;

    let mut raw_depth = Vec::with_capacity(log.len());
    let mut stereo_frames = Vec::with_capacity(log.len());
    for pose in &log.poses {
        let rig = CameraPose::from_car(pose, geom);
        stereo_frames.push(render_stereo(map, &rig, cam));
        let depth = if opts.sgm_depth {
            stereo_depth_pipeline(map, &rig, cam, &SgmParams::default())
                .expect("stereo pipeline accepts its own defaults")
        } else {
            render_depth(map, &rig, cam)
        };
        raw_depth.push(depth);
    }
    if let Some(art) = &opts.artifacts {
        let mut art_rng = substream(seed, 2);
        inject_depth_artifacts(&mut raw_depth, art, &mut art_rng);
    }
    let depth_frames = raw_depth
        .iter()
        .map(|d| Image {
            width: d.width,
            height: d.height,
            channels: 1,
            data: d.inverse_normalized(),
        })
        .collect();

    Ok(Episode {
        log,
        depth_frames,
        stereo_frames,
        map_id: map.id.clone(),
        seed,
    })
}

/// Fraction of seeded episodes that complete their route, without rendering.
pub fn completion_statistic(
    map: &WorldMap,
    cfg: &SimConfig,
    gains: &ControllerGains,
    geom: &CarGeometry,
    episodes: usize,
    seed: u64,
) -> f64 {
    let mut completed = 0usize;
    for k in 0..episodes {
        let ep_seed = seed.wrapping_add(k as u64);
        if let Ok(log) = seeded_rollout(map, cfg, gains, geom, ep_seed) {
            if log.terminated_by == TerminationCause::Completed {
                completed += 1;
            }
        }
    }
    completed as f64 / episodes as f64
}

/// One training example: a channels-first stack of the 10 frames ending at
/// time t, and the 10 commanded steering angles from t on, normalized to
/// [-1, 1] by the steering limit.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    /// Tensor extents, outermost first.
    pub shape: Vec<usize>,
    pub target: [f64; STACK],
}

/// Sliding-window samples over an episode, stride 1. Episodes shorter than
/// 19 frames yield nothing; windows touching a collision terminus are
/// dropped, so a crash never becomes a training target.
pub fn build_samples(episode: &Episode, mode: SensorMode, steering_limit: f64) -> Vec<Sample> {
    let n = episode.frame_count();
    // The collision frame itself is unusable: the expert never commands it.
    let usable = match episode.log.terminated_by {
        TerminationCause::Collision => n.saturating_sub(1),
        _ => n,
    };
    if usable < MIN_FRAMES {
        return Vec::new();
    }
    let (h, w) = match mode {
        SensorMode::Depth => {
            let f = &episode.depth_frames[0];
            (f.height, f.width)
        }
        SensorMode::Stereo => {
            let f = &episode.stereo_frames[0].left;
            (f.height, f.width)
        }
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(usable - MIN_FRAMES + 1);
    for t in STACK - 1..=usable - STACK {
        let (input, shape) = match mode {
            SensorMode::Depth => {
                let mut buf = vec![0.0; STACK * plane];
                for k in 0..STACK {
                    let f = &episode.depth_frames[t + 1 - STACK + k];
                    buf[k * plane..(k + 1) * plane].copy_from_slice(&f.data);
                }
                (buf, vec![STACK, h, w])
            }
            SensorMode::Stereo => {
                // Layout color x eye x time x rows x cols, matching the
                // recorded tensor shape; the policy flattens it.
                let mut buf = vec![0.0; 3 * 2 * STACK * plane];
                for c in 0..3 {
                    for eye in 0..2 {
                        for k in 0..STACK {
                            let f = &episode.stereo_frames[t + 1 - STACK + k];
                            let img = if eye == 0 { &f.left } else { &f.right };
                            let src = &img.data[c * plane..(c + 1) * plane];
                            let dst = ((c * 2 + eye) * STACK + k) * plane;
                            buf[dst..dst + plane].copy_from_slice(src);
                        }
                    }
                }
                (buf, vec![3, 2, STACK, h, w])
            }
        };
        let mut target = [0.0; STACK];
        for (slot, &s) in target.iter_mut().zip(&episode.log.steering[t..t + STACK]) {
            *slot = (s / steering_limit).clamp(-1.0, 1.0);
        }
        out.push(Sample { input, shape, target });
    }
    out
}

/// Per-episode train/validation assignment: a seeded shuffle marks 10%
/// (at least one, when there are at least two episodes) for validation.
/// Splitting whole episodes keeps overlapping windows out of validation.
pub fn assign_splits(episode_count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..episode_count).collect();
    let mut rng = substream(seed, 0x5711);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let val = if episode_count >= 2 {
        (episode_count / 10).max(1)
    } else {
        0
    };
    let mut split = vec![Split::Train; episode_count];
    for &idx in order.iter().take(val) {
        split[idx] = Split::Validation;
    }
    split
}

/// Same room, different surface textures: generalization probe for a policy
/// trained on the original. Validation on this map exposes texture
/// over-fitting that same-room validation cannot.
pub fn retextured(map: &WorldMap, texture_seed: u64) -> WorldMap {
    let mut out = map.clone();
    out.texture_seed = texture_seed;
    out.id = format!("{}-tex{texture_seed}", map.id);
    out
}

fn put_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&(v as f32).to_le_bytes())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], DatasetError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::Truncated
        } else {
            DatasetError::Io(e)
        }
    })?;
    Ok(buf)
}

fn take_u16(r: &mut impl Read) -> Result<u16, DatasetError> {
    Ok(u16::from_le_bytes(take::<2>(r)?))
}

fn take_u32(r: &mut impl Read) -> Result<u32, DatasetError> {
    Ok(u32::from_le_bytes(take::<4>(r)?))
}

fn take_u64(r: &mut impl Read) -> Result<u64, DatasetError> {
    Ok(u64::from_le_bytes(take::<8>(r)?))
}

fn take_f32(r: &mut impl Read) -> Result<f64, DatasetError> {
    Ok(f64::from(f32::from_le_bytes(take::<4>(r)?)))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    path.with_file_name(name)
}

fn check_frame_dims(episode: &Episode, m: &DatasetManifest) -> Result<(), DatasetError> {
    let bad = |what: String| Err(DatasetError::DimensionMismatch(what));
    match m.mode {
        SensorMode::Depth => {
            if episode.depth_frames.len() != episode.frame_count() {
                return bad(format!(
                    "episode {} has {} depth frames for {} log entries",
                    episode.seed,
                    episode.depth_frames.len(),
                    episode.frame_count()
                ));
            }
            for f in &episode.depth_frames {
                if f.width != m.width || f.height != m.height || f.channels != 1 {
                    return bad(format!(
                        "depth frame {}x{}x{} in a {}x{} dataset",
                        f.channels, f.height, f.width, m.height, m.width
                    ));
                }
            }
        }
        SensorMode::Stereo => {
            if episode.stereo_frames.len() != episode.frame_count() {
                return bad(format!(
                    "episode {} has {} stereo frames for {} log entries",
                    episode.seed,
                    episode.stereo_frames.len(),
                    episode.frame_count()
                ));
            }
            for f in &episode.stereo_frames {
                for img in [&f.left, &f.right] {
                    if img.width != m.width || img.height != m.height || img.channels != 3 {
                        return bad(format!(
                            "stereo frame {}x{}x{} in a {}x{} dataset",
                            img.channels, img.height, img.width, m.height, m.width
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Writes the binary container and its human-readable manifest sidecar.
/// Frame, steering, and pose payloads are f32 little-endian.
pub fn write_dataset(
    episodes: &[Episode],
    manifest: &DatasetManifest,
    path: &Path,
) -> Result<(), DatasetError> {
    if manifest.episode_count != episodes.len() || manifest.split.len() != episodes.len() {
        return Err(DatasetError::DimensionMismatch(format!(
            "manifest covers {} episodes, got {}",
            manifest.episode_count,
            episodes.len()
        )));
    }
    for ep in episodes {
        check_frame_dims(ep, manifest)?;
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FORMAT_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    w.write_all(&[manifest.mode.code()])?;
    put_u16(&mut w, manifest.height as u16)?;
    put_u16(&mut w, manifest.width as u16)?;
    put_f32(&mut w, manifest.dt)?;
    put_u32(&mut w, episodes.len() as u32)?;
    for ep in episodes {
        put_u32(&mut w, ep.frame_count() as u32)?;
        w.write_all(&[cause_code(ep.log.terminated_by)])?;
        put_u64(&mut w, ep.seed)?;
        match manifest.mode {
            SensorMode::Depth => {
                for f in &ep.depth_frames {
                    for &v in &f.data {
                        put_f32(&mut w, v)?;
                    }
                }
            }
            SensorMode::Stereo => {
                for f in &ep.stereo_frames {
                    for img in [&f.left, &f.right] {
                        for &v in &img.data {
                            put_f32(&mut w, v)?;
                        }
                    }
                }
            }
        }
        for &s in &ep.log.steering {
            put_f32(&mut w, s)?;
        }
        for p in &ep.log.poses {
            put_f32(&mut w, p.x)?;
            put_f32(&mut w, p.y)?;
            put_f32(&mut w, p.theta)?;
        }
    }
    w.flush()?;

    let split: String = manifest
        .split
        .iter()
        .map(|s| if *s == Split::Train { 'T' } else { 'V' })
        .collect();
    let text = format!(
        "format_version = {}\nmode = {}\nepisodes = {}\nheight = {}\nwidth = {}\ndt = {}\nseed = {}\nmap = {}\nsplit = {}\n",
        FORMAT_VERSION,
        match manifest.mode {
            SensorMode::Depth => "depth",
            SensorMode::Stereo => "stereo",
        },
        manifest.episode_count,
        manifest.height,
        manifest.width,
        manifest.dt,
        manifest.seed,
        manifest.map_id,
        split,
    );
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Reads a container written by `write_dataset`. Episode identity (map,
/// split, collection seed) comes from the sidecar; timestamps are rebuilt
/// from the header dt.
pub fn read_dataset(path: &Path) -> Result<(Vec<Episode>, DatasetManifest), DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = take::<4>(&mut r)?;
    if magic != FORMAT_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let version = take_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    let mode_byte = take::<1>(&mut r)?[0];
    let mode = SensorMode::from_code(mode_byte).ok_or(DatasetError::BadMode(mode_byte))?;
    let height = take_u16(&mut r)? as usize;
    let width = take_u16(&mut r)? as usize;
    let dt = take_f32(&mut r)?;
    let count = take_u32(&mut r)? as usize;

    let sidecar = std::fs::read_to_string(sidecar_path(path))
        .map_err(|e| DatasetError::BadSidecar(e.to_string()))?;
    let mut map_id = String::new();
    let mut split_text = String::new();
    let mut seed = 0u64;
    for line in sidecar.lines() {
        if let Some((key, value)) = line.split_once('=') {
            match key.trim() {
                "map" => map_id = value.trim().to_string(),
                "split" => split_text = value.trim().to_string(),
                "seed" => {
                    seed = value
                        .trim()
                        .parse()
                        .map_err(|_| DatasetError::BadSidecar("bad seed".into()))?;
                }
                _ => {}
            }
        }
    }
    let split: Vec<Split> = split_text
        .chars()
        .map(|c| match c {
            'T' => Ok(Split::Train),
            'V' => Ok(Split::Validation),
            other => Err(DatasetError::BadSidecar(format!("split char {other:?}"))),
        })
        .collect::<Result<_, _>>()?;
    if split.len() != count {
        return Err(DatasetError::BadSidecar(format!(
            "split covers {} episodes, file has {count}",
            split.len()
        )));
    }

    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let frames = take_u32(&mut r)? as usize;
        let cause_byte = take::<1>(&mut r)?[0];
        let cause = cause_from_code(cause_byte).ok_or(DatasetError::BadTermination(cause_byte))?;
        let ep_seed = take_u64(&mut r)?;
        let mut depth_frames = Vec::new();
        let mut stereo_frames = Vec::new();
        match mode {
            SensorMode::Depth => {
                for _ in 0..frames {
                    let mut img = Image::zeros(width, height, 1);
                    for v in &mut img.data {
                        *v = take_f32(&mut r)?;
                    }
                    depth_frames.push(img);
                }
            }
            SensorMode::Stereo => {
                for _ in 0..frames {
                    let mut pair = [Image::zeros(width, height, 3), Image::zeros(width, height, 3)];
                    for img in &mut pair {
                        for v in &mut img.data {
                            *v = take_f32(&mut r)?;
                        }
                    }
                    let [left, right] = pair;
                    stereo_frames.push(StereoFrame { left, right });
                }
            }
        }
        let mut steering = Vec::with_capacity(frames);
        for _ in 0..frames {
            steering.push(take_f32(&mut r)?);
        }
        let mut poses = Vec::with_capacity(frames);
        for _ in 0..frames {
            let x = take_f32(&mut r)?;
            let y = take_f32(&mut r)?;
            let theta = take_f32(&mut r)?;
            poses.push(crate::world::Pose::new(x, y, theta));
        }
        let timestamps = (0..frames).map(|k| k as f64 * dt).collect();
        episodes.push(Episode {
            log: EpisodeLog {
                poses,
                steering,
                timestamps,
                terminated_by: cause,
            },
            depth_frames,
            stereo_frames,
            map_id: map_id.clone(),
            seed: ep_seed,
        });
    }

    let manifest = DatasetManifest {
        mode,
        episode_count: count,
        height,
        width,
        dt,
        split,
        seed,
        map_id,
    };
    Ok((episodes, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::hash01;
    use crate::world::{training_room, Pose};
    use std::path::PathBuf;

    fn f32_clean(v: f64) -> f64 {
        f64::from(v as f32)
    }

    /// Test dt chosen exactly representable in f32 so container round trips
    /// compare with plain equality.
    const DT: f64 = 0.03125;

    fn synth_episode(n: usize, cause: TerminationCause, w: usize, h: usize, seed: u64) -> Episode {
        let mut poses = Vec::new();
        let mut steering = Vec::new();
        let mut timestamps = Vec::new();
        for k in 0..n {
            let t = k as i64;
            poses.push(Pose::new(
                f32_clean(hash01(seed, t, 0, 0) * 8.0),
                f32_clean(hash01(seed, t, 1, 0) * 5.0),
                f32_clean((hash01(seed, t, 2, 0) - 0.5) * 6.0),
            ));
            steering.push(f32_clean((hash01(seed, t, 3, 0) - 0.5) * 0.4));
            timestamps.push(k as f64 * DT);
        }
        let mut depth_frames = Vec::new();
        let mut stereo_frames = Vec::new();
        for k in 0..n {
            let mut d = Image::zeros(w, h, 1);
            for (i, v) in d.data.iter_mut().enumerate() {
                *v = f32_clean(hash01(seed ^ 0xD, k as i64, i as i64, 0));
            }
            depth_frames.push(d);
            let mut left = Image::zeros(w, h, 3);
            let mut right = Image::zeros(w, h, 3);
            for (i, v) in left.data.iter_mut().enumerate() {
                *v = f32_clean(hash01(seed ^ 0xA, k as i64, i as i64, 0));
            }
            for (i, v) in right.data.iter_mut().enumerate() {
                *v = f32_clean(hash01(seed ^ 0xB, k as i64, i as i64, 0));
            }
            stereo_frames.push(StereoFrame { left, right });
        }
        Episode {
            log: EpisodeLog {
                poses,
                steering,
                timestamps,
                terminated_by: cause,
            },
            depth_frames,
            stereo_frames,
            map_id: "synth".into(),
            seed,
        }
    }

    fn manifest_for(eps: &[Episode], mode: SensorMode, w: usize, h: usize) -> DatasetManifest {
        DatasetManifest {
            mode,
            episode_count: eps.len(),
            height: h,
            width: w,
            dt: DT,
            split: assign_splits(eps.len(), 5),
            seed: 5,
            map_id: "synth".into(),
        }
    }

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("roam-dataset-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn window_count_follows_usable_frames() {
        let limit = 0.25;
        let cases = [
            (30, TerminationCause::Completed, 12),
            (30, TerminationCause::Collision, 11),
            (30, TerminationCause::Timeout, 12),
            (19, TerminationCause::Completed, 1),
            (19, TerminationCause::Collision, 0),
            (18, TerminationCause::Completed, 0),
            (5, TerminationCause::Completed, 0),
        ];
        for (n, cause, expect) in cases {
            let ep = synth_episode(n, cause, 8, 6, 3);
            let got = build_samples(&ep, SensorMode::Depth, limit).len();
            assert_eq!(got, expect, "{n} frames, {cause:?}");
        }
    }

    #[test]
    fn depth_samples_stack_ten_frames_channelwise() {
        let ep = synth_episode(21, TerminationCause::Completed, 168, 94, 9);
        let samples = build_samples(&ep, SensorMode::Depth, 0.25);
        assert_eq!(samples.len(), 3);
        let s = &samples[0];
        assert_eq!(s.shape, vec![10, 94, 168]);
        assert_eq!(s.input.len(), 10 * 94 * 168);
        // Sample 0 covers frames 0..=9; channel k holds frame k verbatim.
        let plane = 94 * 168;
        for k in [0usize, 4, 9] {
            assert_eq!(
                s.input[k * plane..(k + 1) * plane],
                ep.depth_frames[k].data[..],
                "stacked channel {k}"
            );
        }
        // Sample 2 starts two frames later.
        assert_eq!(
            samples[2].input[..plane],
            ep.depth_frames[2].data[..]
        );
    }

    #[test]
    fn stereo_samples_use_color_eye_time_layout() {
        let ep = synth_episode(19, TerminationCause::Completed, 168, 94, 11);
        let samples = build_samples(&ep, SensorMode::Stereo, 0.25);
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.shape, vec![3, 2, 10, 94, 168]);
        assert_eq!(s.input.len(), 3 * 2 * 10 * 94 * 168);
        let plane = 94 * 168;
        for (c, eye, k) in [(0usize, 0usize, 0usize), (1, 1, 3), (2, 0, 9)] {
            let f = &ep.stereo_frames[k];
            let img = if eye == 0 { &f.left } else { &f.right };
            let base = ((c * 2 + eye) * 10 + k) * plane;
            assert_eq!(
                s.input[base..base + plane],
                img.data[c * plane..(c + 1) * plane],
                "c{c} eye{eye} k{k}"
            );
        }
    }

    #[test]
    fn targets_are_normalized_commanded_steering() {
        let limit = 0.25;
        let mut ep = synth_episode(20, TerminationCause::Completed, 8, 6, 13);
        for (k, s) in ep.log.steering.iter_mut().enumerate() {
            *s = match k % 3 {
                0 => limit,
                1 => -limit,
                _ => limit / 2.0,
            };
        }
        let samples = build_samples(&ep, SensorMode::Depth, limit);
        assert_eq!(samples.len(), 2);
        // Sample at t = 9 targets steering[9..19].
        for (j, &v) in samples[0].target.iter().enumerate() {
            let expect = match (9 + j) % 3 {
                0 => 1.0,
                1 => -1.0,
                _ => 0.5,
            };
            assert_eq!(v, expect, "target {j}");
        }
    }

    #[test]
    fn split_marks_ten_percent_of_episodes() {
        for (n, expect_val) in [(20usize, 2usize), (10, 1), (4, 1), (1, 0)] {
            let split = assign_splits(n, 77);
            assert_eq!(split.len(), n);
            let val = split.iter().filter(|s| **s == Split::Validation).count();
            assert_eq!(val, expect_val, "{n} episodes");
        }
        assert_eq!(assign_splits(50, 3), assign_splits(50, 3));
        assert_ne!(assign_splits(50, 3), assign_splits(50, 4));
    }

    #[test]
    fn retextured_keeps_geometry() {
        let room = training_room();
        let re = retextured(&room, 4242);
        assert_eq!(re.obstacles, room.obstacles);
        assert_eq!(re.room_width, room.room_width);
        assert_eq!(re.texture_seed, 4242);
        assert_ne!(re.id, room.id);
    }

    #[test]
    fn depth_dataset_round_trips() {
        let eps: Vec<Episode> = (0..3)
            .map(|k| synth_episode(20 + k, TerminationCause::Completed, 8, 6, 100 + k as u64))
            .collect();
        let mut manifest = manifest_for(&eps, SensorMode::Depth, 8, 6);
        manifest.split = vec![Split::Train, Split::Validation, Split::Train];
        let path = tmp("depth.roam");
        write_dataset(&eps, &manifest, &path).unwrap();
        let (back, m2) = read_dataset(&path).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(back.len(), eps.len());
        for (a, b) in eps.iter().zip(&back) {
            assert_eq!(a.log, b.log);
            assert_eq!(a.depth_frames, b.depth_frames);
            assert!(b.stereo_frames.is_empty(), "depth file carries no stereo");
            assert_eq!(a.map_id, b.map_id);
            assert_eq!(a.seed, b.seed);
        }
        // A second write of what was read is byte-identical.
        let path2 = tmp("depth2.roam");
        write_dataset(&back, &m2, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn stereo_dataset_round_trips() {
        let eps: Vec<Episode> =
            vec![synth_episode(19, TerminationCause::Collision, 8, 6, 200)];
        let manifest = manifest_for(&eps, SensorMode::Stereo, 8, 6);
        let path = tmp("stereo.roam");
        write_dataset(&eps, &manifest, &path).unwrap();
        let (back, m2) = read_dataset(&path).unwrap();
        assert_eq!(m2.mode, SensorMode::Stereo);
        assert_eq!(back[0].stereo_frames, eps[0].stereo_frames);
        assert!(back[0].depth_frames.is_empty());
        assert_eq!(back[0].log, eps[0].log);
    }

    #[test]
    fn empty_dataset_is_a_valid_file() {
        let manifest = DatasetManifest {
            mode: SensorMode::Depth,
            episode_count: 0,
            height: 94,
            width: 168,
            dt: DT,
            split: Vec::new(),
            seed: 0,
            map_id: "none".into(),
        };
        let path = tmp("empty.roam");
        write_dataset(&[], &manifest, &path).unwrap();
        let (eps, m) = read_dataset(&path).unwrap();
        assert!(eps.is_empty());
        assert_eq!(m.episode_count, 0);
    }

    #[test]
    fn corruption_is_distinctly_reported() {
        let eps = vec![synth_episode(19, TerminationCause::Completed, 8, 6, 300)];
        let manifest = manifest_for(&eps, SensorMode::Depth, 8, 6);
        let path = tmp("corrupt.roam");
        write_dataset(&eps, &manifest, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let magic_path = tmp("magic.roam");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&magic_path, &bad).unwrap();
        std::fs::copy(sidecar_path(&path), sidecar_path(&magic_path)).unwrap();
        assert!(matches!(
            read_dataset(&magic_path),
            Err(DatasetError::BadMagic(_))
        ));

        let ver_path = tmp("version.roam");
        let mut bad = bytes.clone();
        bad[4] = 99;
        std::fs::write(&ver_path, &bad).unwrap();
        std::fs::copy(sidecar_path(&path), sidecar_path(&ver_path)).unwrap();
        assert!(matches!(
            read_dataset(&ver_path),
            Err(DatasetError::BadVersion(99))
        ));

        let trunc_path = tmp("trunc.roam");
        std::fs::write(&trunc_path, &bytes[..bytes.len() - 7]).unwrap();
        std::fs::copy(sidecar_path(&path), sidecar_path(&trunc_path)).unwrap();
        assert!(matches!(
            read_dataset(&trunc_path),
            Err(DatasetError::Truncated)
        ));

        let orphan_path = tmp("orphan.roam");
        std::fs::write(&orphan_path, &bytes).unwrap();
        let _ = std::fs::remove_file(sidecar_path(&orphan_path));
        assert!(matches!(
            read_dataset(&orphan_path),
            Err(DatasetError::BadSidecar(_))
        ));
    }

    #[test]
    fn mismatched_frame_dims_are_rejected_on_write() {
        let mut eps = vec![
            synth_episode(19, TerminationCause::Completed, 8, 6, 400),
            synth_episode(19, TerminationCause::Completed, 8, 6, 401),
        ];
        eps[1].depth_frames[3] = Image::zeros(9, 6, 1);
        let manifest = manifest_for(&eps, SensorMode::Depth, 8, 6);
        let path = tmp("dims.roam");
        assert!(matches!(
            write_dataset(&eps, &manifest, &path),
            Err(DatasetError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn recording_is_seed_deterministic() {
        let map = training_room();
        let cfg = SimConfig::default();
        let geom = CarGeometry::default();
        let gains = ControllerGains::for_car(&geom);
        let cam = CameraModel {
            width: 24,
            height: 14,
            focal_px: 22.0,
            ..CameraModel::default()
        };
        let opts = RecordOptions::default();
        let a = record_episode(&map, &cfg, &gains, &geom, &cam, 31, &opts).unwrap();
        let b = record_episode(&map, &cfg, &gains, &geom, &cam, 31, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.terminated_by, TerminationCause::Completed);
        assert_eq!(a.depth_frames.len(), a.log.len());
        assert_eq!(a.stereo_frames.len(), a.log.len());
        assert!(a.log.len() > 100, "a full loop takes hundreds of frames");
        for pair in a.log.timestamps.windows(2) {
            assert!((pair[1] - pair[0] - cfg.dt).abs() < 1e-12);
        }
        // Depth frames hold the bounded inverse encoding.
        assert!(a
            .depth_frames
            .iter()
            .all(|f| f.data.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn cramped_room_propagates_planning_failure() {
        let mut map = training_room();
        map.room_width = 2.4;
        map.obstacles.clear();
        if let Some(region) = map.start.as_mut() {
            region.mean = Pose::new(1.2, 1.2, 0.0);
        }
        let geom = CarGeometry::default();
        let r = record_episode(
            &map,
            &SimConfig::default(),
            &ControllerGains::for_car(&geom),
            &geom,
            &CameraModel::default(),
            5,
            &RecordOptions::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn most_seeded_episodes_complete() {
        let map = training_room();
        let geom = CarGeometry::default();
        let rate = completion_statistic(
            &map,
            &SimConfig::default(),
            &ControllerGains::for_car(&geom),
            &geom,
            1000,
            90_000,
        );
        assert!(rate >= 0.95, "completion rate {rate}");
    }

    #[test]
    fn probe_throughput() {
        use std::time::Instant;
        let map = training_room();
        let geom = CarGeometry::default();
        let cfg = SimConfig::default();
        let gains = ControllerGains::for_car(&geom);
        let cam = CameraModel::default();
        let t0 = Instant::now();
        let ep = record_episode(&map, &cfg, &gains, &geom, &cam, 7, &RecordOptions::default())
            .unwrap();
        let t_record = t0.elapsed();
        eprintln!(
            "episode frames {} record {:?} ({:.1} ms/frame)",
            ep.frame_count(),
            t_record,
            t_record.as_secs_f64() * 1000.0 / ep.frame_count() as f64
        );
        let samples = build_samples(&ep, SensorMode::Depth, ControllerGains::for_car(&geom).steering_limit);
        eprintln!("samples {}", samples.len());
        let arch = crate::policy::PolicyArchitecture::for_mode(SensorMode::Depth);
        let params = crate::policy::PolicyParams::seeded(&arch, 1).unwrap();
        let t1 = Instant::now();
        let batch = &samples[..8.min(samples.len())];
        let _ = crate::policy::loss_and_gradients(&params, batch).unwrap();
        let t_train = t1.elapsed();
        eprintln!(
            "fwd+bwd {:?} over {} samples ({:.1} ms/sample)",
            t_train,
            batch.len(),
            t_train.as_secs_f64() * 1000.0 / batch.len() as f64
        );
        let t2 = Instant::now();
        let _ = crate::policy::dataset_mse(&params, batch).unwrap();
        eprintln!(
            "fwd only {:.1} ms/sample",
            t2.elapsed().as_secs_f64() * 1000.0 / batch.len() as f64
        );
        panic!("probe only");
    }
}


