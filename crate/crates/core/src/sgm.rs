//! Semi-global stereo matching: block SAD costs on quantized luma,
//! scanline aggregation with the two-tier smoothness penalty, winner-take-all
//! disparity selection, and depth reconstruction.

use crate::imageio::Image;
use crate::render::{CameraModel, DepthImage, StereoFrame, NEAR_CLIP};
use thiserror::Error;

/// Matching parameters. Costs are sums of absolute differences over
/// `block_size` windows on 8-bit luma, so `p1`/`p2` share that scale.
#[derive(Clone, Copy, Debug)]
pub struct SgmParams {
    pub block_size: usize,
    pub num_disparities: usize,
    /// Penalty for a one-level disparity change between neighbors.
    pub p1: u32,
    /// Penalty for larger jumps; must exceed `p1`.
    pub p2: u32,
    /// Scanline directions: 1, 2, 4, or 8.
    pub num_paths: usize,
    /// Winner must beat every non-adjacent rival strictly by this factor or
    /// the pixel is invalidated.
    pub uniqueness_ratio: f64,
    /// Optional left/right consistency cross-check.
    pub lr_check: bool,
    /// Optional parabolic sub-pixel refinement.
    pub subpixel: bool,
}

impl Default for SgmParams {
    fn default() -> Self {
        SgmParams {
            block_size: 5,
            num_disparities: 16,
            p1: 200,
            p2: 800,
            num_paths: 8,
            uniqueness_ratio: 1.05,
            lr_check: false,
            subpixel: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SgmError {
    #[error("left and right image dimensions differ")]
    DimensionMismatch,
    #[error("image {0}x{1} too small for block size {2} and {3} disparities")]
    TooSmall(usize, usize, usize, usize),
    #[error("invalid parameters: {0}")]
    BadParams(&'static str),
}

impl SgmParams {
    pub fn validate(&self) -> Result<(), SgmError> {
        if self.block_size.is_multiple_of(2) || self.block_size == 0 {
            return Err(SgmError::BadParams("block_size must be odd"));
        }
        if self.num_disparities < 1 {
            return Err(SgmError::BadParams("need at least one disparity"));
        }
        if self.p1 == 0 || self.p2 <= self.p1 {
            return Err(SgmError::BadParams("need p2 > p1 > 0"));
        }
        if !matches!(self.num_paths, 1 | 2 | 4 | 8) {
            return Err(SgmError::BadParams("num_paths must be 1, 2, 4, or 8"));
        }
        // Path accumulators live in u16 and are bounded by max block cost + p2.
        let max_block = 255 * (self.block_size * self.block_size) as u64;
        if u64::from(self.p2) + max_block > u64::from(u16::MAX) {
            return Err(SgmError::BadParams("p2 too large for 8-bit block costs"));
        }
        if self.uniqueness_ratio < 1.0 {
            return Err(SgmError::BadParams("uniqueness_ratio must be >= 1"));
        }
        Ok(())
    }
}

/// Per-pixel disparity with a validity mask. The left `num_disparities - 1`
/// columns are always invalid: their search range leaves the image.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityImage {
    pub width: usize,
    pub height: usize,
    pub disp: Vec<f64>,
    pub valid: Vec<bool>,
}

fn to_u8(img: &Image) -> Vec<u8> {
    img.luma()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Pixel absolute-difference plane for one disparity; positions whose match
/// would leave the right image get the maximum cost.
fn ad_plane(left: &[u8], right: &[u8], w: usize, h: usize, d: usize) -> Vec<u8> {
    let mut ad = vec![255u8; w * h];
    for y in 0..h {
        let row = y * w;
        for x in d..w {
            ad[row + x] = left[row + x].abs_diff(right[row + x - d]);
        }
    }
    ad
}

/// Clipped box-filter sum of an 8-bit plane, window `b` x `b`.
fn box_sum(ad: &[u8], w: usize, h: usize, b: usize) -> Vec<u16> {
    let r = b / 2;
    let mut rows = vec![0u16; w * h];
    for y in 0..h {
        let base = y * w;
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let mut s = 0u16;
            for xx in x0..=x1 {
                s += u16::from(ad[base + xx]);
            }
            rows[base + x] = s;
        }
    }
    let mut out = vec![0u16; w * h];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let mut s = 0u16;
            for yy in y0..=y1 {
                s += rows[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Matching cost volume, indexed `[(y * w + x) * num_disp + d]`.
fn cost_volume(left: &[u8], right: &[u8], w: usize, h: usize, p: &SgmParams) -> Vec<u16> {
    let nd = p.num_disparities;
    let mut vol = vec![0u16; w * h * nd];
    for d in 0..nd {
        let ad = ad_plane(left, right, w, h, d);
        let blk = box_sum(&ad, w, h, p.block_size);
        for i in 0..w * h {
            vol[i * nd + d] = blk[i];
        }
    }
    vol
}

const DIRECTIONS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
];

/// Aggregates the cost volume along one scanline direction into `sum`.
///
/// The recurrence adds the cheapest of staying, stepping one level (plus
/// p1), or jumping (plus p2 over the predecessor's minimum), then subtracts
/// that minimum: accumulators stay below max_cost + p2.
fn aggregate_dir(vol: &[u16], w: usize, h: usize, nd: usize, p: &SgmParams, dir: (i64, i64), sum: &mut [u32]) {
    let (dx, dy) = dir;
    let mut path = vec![0u16; w * h * nd];
    // Visit pixels so the predecessor along (dx, dy) is already done.
    let ys: Vec<usize> = if dy >= 0 { (0..h).collect() } else { (0..h).rev().collect() };
    let xs: Vec<usize> = if dx >= 0 { (0..w).collect() } else { (0..w).rev().collect() };
    for &y in &ys {
        for &x in &xs {
            let i = y * w + x;
            let px = x as i64 - dx;
            let py = y as i64 - dy;
            let base = i * nd;
            if px < 0 || px >= w as i64 || py < 0 || py >= h as i64 {
                path[base..base + nd].copy_from_slice(&vol[base..base + nd]);
            } else {
                let prev = (py as usize * w + px as usize) * nd;
                let prev_min = path[prev..prev + nd].iter().copied().min().unwrap();
                let jump = u32::from(prev_min) + p.p2;
                for d in 0..nd {
                    let stay = u32::from(path[prev + d]);
                    let down = if d > 0 {
                        u32::from(path[prev + d - 1]) + p.p1
                    } else {
                        u32::MAX
                    };
                    let up = if d + 1 < nd {
                        u32::from(path[prev + d + 1]) + p.p1
                    } else {
                        u32::MAX
                    };
                    let trans = stay.min(down).min(up).min(jump) - u32::from(prev_min);
                    path[base + d] = vol[base + d] + trans as u16;
                }
            }
            for d in 0..nd {
                sum[base + d] += u32::from(path[base + d]);
            }
        }
    }
}

/// Winner-take-all with the uniqueness test and optional sub-pixel fit.
fn select(sum: &[u32], w: usize, h: usize, p: &SgmParams) -> DisparityImage {
    let nd = p.num_disparities;
    let mut disp = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for i in 0..w * h {
        let x = i % w;
        let costs = &sum[i * nd..(i + 1) * nd];
        let mut best = 0usize;
        for d in 1..nd {
            if costs[d] < costs[best] {
                best = d;
            }
        }
        // Strict inequality so an exact tie (flat, ambiguous texture) fails.
        let confident = costs.iter().enumerate().all(|(d, &c)| {
            d.abs_diff(best) <= 1 || f64::from(c) > f64::from(costs[best]) * p.uniqueness_ratio
        });
        if x + 1 < nd || !confident {
            continue;
        }
        let mut value = best as f64;
        if p.subpixel && best > 0 && best + 1 < nd {
            let (lo, mid, hi) = (
                f64::from(costs[best - 1]),
                f64::from(costs[best]),
                f64::from(costs[best + 1]),
            );
            let denom = lo - 2.0 * mid + hi;
            if denom > 0.0 {
                value += ((lo - hi) / (2.0 * denom)).clamp(-0.5, 0.5);
            }
        }
        disp[i] = value;
        valid[i] = true;
    }
    DisparityImage {
        width: w,
        height: h,
        disp,
        valid,
    }
}

fn disparity_core(left: &[u8], right: &[u8], w: usize, h: usize, p: &SgmParams) -> DisparityImage {
    let nd = p.num_disparities;
    let vol = cost_volume(left, right, w, h, p);
    let mut sum = vec![0u32; w * h * nd];
    for dir in DIRECTIONS.iter().take(p.num_paths) {
        aggregate_dir(&vol, w, h, nd, p, *dir, &mut sum);
    }
    select(&sum, w, h, p)
}

/// Disparity of the left image against the right.
pub fn compute_disparity(frame: &StereoFrame, p: &SgmParams) -> Result<DisparityImage, SgmError> {
    p.validate()?;
    let (w, h) = (frame.left.width, frame.left.height);
    if frame.right.width != w || frame.right.height != h {
        return Err(SgmError::DimensionMismatch);
    }
    if w <= p.num_disparities || w < p.block_size || h < p.block_size {
        return Err(SgmError::TooSmall(w, h, p.block_size, p.num_disparities));
    }
    let left = to_u8(&frame.left);
    let right = to_u8(&frame.right);
    let mut out = disparity_core(&left, &right, w, h, p);
    if p.lr_check {
        // Match the right image against the left: mirror both, swap roles.
        let flip = |img: &[u8]| -> Vec<u8> {
            let mut f = vec![0u8; w * h];
            for y in 0..h {
                for x in 0..w {
                    f[y * w + x] = img[y * w + (w - 1 - x)];
                }
            }
            f
        };
        let right_disp = disparity_core(&flip(&right), &flip(&left), w, h, p);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !out.valid[i] {
                    continue;
                }
                let d = out.disp[i].round() as usize;
                if x < d {
                    out.valid[i] = false;
                    continue;
                }
                let xr_flipped = w - 1 - (x - d);
                let j = y * w + xr_flipped;
                let ok = right_disp.valid[j] && (right_disp.disp[j] - out.disp[i]).abs() <= 1.0;
                if !ok {
                    out.valid[i] = false;
                }
            }
        }
    }
    Ok(out)
}

/// Depth from disparity: z = focal * baseline / d, clamped to the camera's
/// range; zero or invalid disparity gives an invalid pixel.
pub fn disparity_to_depth(disp: &DisparityImage, cam: &CameraModel) -> DepthImage {
    let n = disp.width * disp.height;
    let mut depth = vec![0.0; n];
    let mut valid = vec![false; n];
    let fb = cam.focal_px * cam.baseline;
    for i in 0..n {
        if disp.valid[i] && disp.disp[i] > 0.0 {
            depth[i] = (fb / disp.disp[i]).clamp(NEAR_CLIP, cam.max_range);
            valid[i] = true;
        }
    }
    DepthImage {
        width: disp.width,
        height: disp.height,
        depth,
        valid,
    }
}

/// Block-averages a depth map by an integer factor, ignoring invalid
/// entries; a block with no valid entry stays invalid.
pub fn downscale_depth(src: &DepthImage, k: usize) -> DepthImage {
    assert!(k >= 1 && src.width.is_multiple_of(k) && src.height.is_multiple_of(k));
    let (w, h) = (src.width / k, src.height / k);
    let mut depth = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0usize;
            for yy in y * k..(y + 1) * k {
                for xx in x * k..(x + 1) * k {
                    let i = yy * src.width + xx;
                    if src.valid[i] {
                        s += src.depth[i];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                depth[y * w + x] = s / n as f64;
                valid[y * w + x] = true;
            }
        }
    }
    DepthImage {
        width: w,
        height: h,
        depth,
        valid,
    }
}

/// Full sensing front end: render the stereo pair at the camera's upscaled
/// resolution, match with the disparity range widened by the same factor to
/// keep metric depth coverage, reconstruct, and downscale back.
pub fn stereo_depth_pipeline(
    map: &crate::world::WorldMap,
    rig: &crate::render::CameraPose,
    cam: &CameraModel,
    params: &SgmParams,
) -> Result<DepthImage, SgmError> {
    let up = cam.upscaled();
    let frame = crate::render::render_stereo(map, rig, &up);
    let scaled = SgmParams {
        num_disparities: params.num_disparities * cam.render_scale,
        ..*params
    };
    let disp = compute_disparity(&frame, &scaled)?;
    let depth = disparity_to_depth(&disp, &up);
    Ok(downscale_depth(&depth, cam.render_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_depth, CameraPose};
    use crate::rng::hash01;
    use crate::world::training_room;

    fn noise_image(w: usize, h: usize, seed: u64, max_level: u32) -> Image {
        let mut img = Image::zeros(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let u = hash01(seed, x as i64, y as i64, 0);
                let lv = ((u * f64::from(max_level + 1)) as u32).min(max_level);
                img.set(0, x, y, f64::from(lv) / 255.0);
            }
        }
        img
    }

    /// right[x] = left[(x + s) mod w], so every pixel matches at disparity s.
    fn wrap_shift(img: &Image, s: usize) -> Image {
        let mut out = Image::zeros(img.width, img.height, 1);
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(0, x, y, img.get(0, (x + s) % img.width, y));
            }
        }
        out
    }

    fn mirror_x(img: &Image) -> Image {
        let mut out = Image::zeros(img.width, img.height, 1);
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(0, x, y, img.get(0, img.width - 1 - x, y));
            }
        }
        out
    }

    fn small_params() -> SgmParams {
        SgmParams {
            num_disparities: 8,
            ..SgmParams::default()
        }
    }

    #[test]
    fn default_params_validate() {
        assert!(SgmParams::default().validate().is_ok());
    }

    #[test]
    fn bad_params_are_rejected() {
        let base = SgmParams::default();
        let cases = [
            SgmParams { block_size: 4, ..base },
            SgmParams { num_disparities: 0, ..base },
            SgmParams { p1: 0, ..base },
            SgmParams { p2: 200, p1: 200, ..base },
            SgmParams { num_paths: 3, ..base },
            SgmParams { uniqueness_ratio: 0.9, ..base },
            SgmParams { p2: 65_000, ..base },
        ];
        for p in cases {
            assert!(p.validate().is_err(), "{p:?} should be rejected");
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let frame = StereoFrame {
            left: noise_image(40, 20, 1, 255),
            right: noise_image(42, 20, 1, 1),
        };
        assert!(matches!(
            compute_disparity(&frame, &small_params()),
            Err(SgmError::DimensionMismatch)
        ));
    }

    #[test]
    fn undersized_image_is_an_error() {
        let frame = StereoFrame {
            left: noise_image(8, 8, 1, 255),
            right: noise_image(8, 8, 1, 255),
        };
        assert!(matches!(
            compute_disparity(&frame, &small_params()),
            Err(SgmError::TooSmall(..))
        ));
    }

    #[test]
    fn identical_pair_reads_zero_everywhere() {
        let img = noise_image(40, 20, 7, 255);
        let frame = StereoFrame {
            left: img.clone(),
            right: img,
        };
        let p = small_params();
        let d = compute_disparity(&frame, &p).unwrap();
        for y in 0..20 {
            for x in 0..40 {
                let i = y * 40 + x;
                if x < p.num_disparities - 1 {
                    assert!(!d.valid[i], "left border must be invalid at x={x}");
                } else {
                    assert!(d.valid[i], "({x},{y}) should be valid");
                    assert_eq!(d.disp[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn flat_pair_never_claims_nonzero_disparity() {
        let mut img = Image::zeros(40, 20, 1);
        img.data.fill(0.4);
        let frame = StereoFrame {
            left: img.clone(),
            right: img,
        };
        let d = compute_disparity(&frame, &small_params()).unwrap();
        for i in 0..d.disp.len() {
            assert!(!d.valid[i] || d.disp[i] == 0.0);
        }
    }

    #[test]
    fn wrapped_shift_reads_exact_disparity() {
        let left = noise_image(64, 32, 11, 255);
        let frame = StereoFrame {
            right: wrap_shift(&left, 3),
            left,
        };
        let p = small_params();
        let d = compute_disparity(&frame, &p).unwrap();
        for y in 0..32 {
            for x in p.num_disparities - 1..64 {
                let i = y * 64 + x;
                assert!(d.valid[i], "({x},{y}) should be valid");
                assert_eq!(d.disp[i], 3.0, "({x},{y})");
            }
        }
    }

    #[test]
    fn lr_check_keeps_consistent_interior() {
        let left = noise_image(64, 32, 11, 255);
        let frame = StereoFrame {
            right: wrap_shift(&left, 3),
            left,
        };
        let p = SgmParams {
            lr_check: true,
            ..small_params()
        };
        let d = compute_disparity(&frame, &p).unwrap();
        // The rightmost columns lose their cross-check partner to the other
        // image's own invalid border.
        for y in 0..32 {
            for x in p.num_disparities - 1..64 - (p.num_disparities - 3) {
                let i = y * 64 + x;
                assert!(d.valid[i], "({x},{y}) should survive the cross check");
                assert_eq!(d.disp[i], 3.0);
            }
        }
    }

    #[test]
    fn subpixel_stays_near_integer_truth() {
        let left = noise_image(64, 32, 13, 255);
        let frame = StereoFrame {
            right: wrap_shift(&left, 3),
            left,
        };
        let p = SgmParams {
            subpixel: true,
            ..small_params()
        };
        let d = compute_disparity(&frame, &p).unwrap();
        for y in 0..32 {
            for x in p.num_disparities - 1..64 {
                let i = y * 64 + x;
                assert!(d.valid[i]);
                assert!((d.disp[i] - 3.0).abs() <= 0.5, "({x},{y}) {}", d.disp[i]);
            }
        }
    }

    #[test]
    fn additive_luma_shift_leaves_disparity_unchanged() {
        let left = noise_image(64, 32, 17, 200);
        let right = wrap_shift(&left, 2);
        let lift = |img: &Image| {
            let mut out = img.clone();
            for v in &mut out.data {
                *v += 16.0 / 255.0;
            }
            out
        };
        let p = small_params();
        let a = compute_disparity(
            &StereoFrame {
                left: left.clone(),
                right: right.clone(),
            },
            &p,
        )
        .unwrap();
        let b = compute_disparity(
            &StereoFrame {
                left: lift(&left),
                right: lift(&right),
            },
            &p,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mirrored_role_swap_mirrors_the_disparity_map() {
        let left = noise_image(64, 32, 19, 255);
        let right = wrap_shift(&left, 3);
        let p = small_params();
        let d = compute_disparity(
            &StereoFrame {
                left: left.clone(),
                right: right.clone(),
            },
            &p,
        )
        .unwrap();
        let m = compute_disparity(
            &StereoFrame {
                left: mirror_x(&right),
                right: mirror_x(&left),
            },
            &p,
        )
        .unwrap();
        let mut both = 0;
        for y in 0..32 {
            for x in 0..64 {
                let i = y * 64 + x;
                let j = y * 64 + (64 - 1 - x);
                if m.valid[i] && d.valid[j] {
                    assert_eq!(m.disp[i], d.disp[j], "({x},{y})");
                    both += 1;
                }
            }
        }
        assert!(both > 64 * 32 / 2, "only {both} pixels valid in both maps");
    }

    /// Minimum cost over every disparity assignment of columns 0..=x that
    /// ends at d, by direct enumeration of all assignments.
    fn scanline_oracle(vol: &[u16], w: usize, nd: usize, row: usize, p: &SgmParams) -> Vec<Vec<u64>> {
        let mut best = vec![vec![u64::MAX; nd]; w];
        let total = (nd as u64).pow(w as u32);
        for code in 0..total {
            let mut rest = code;
            let mut prev = 0usize;
            let mut acc = 0u64;
            for (x, slot) in best.iter_mut().enumerate() {
                let d = (rest % nd as u64) as usize;
                rest /= nd as u64;
                acc += u64::from(vol[(row * w + x) * nd + d]);
                if x > 0 {
                    acc += match d.abs_diff(prev) {
                        0 => 0,
                        1 => u64::from(p.p1),
                        _ => u64::from(p.p2),
                    };
                }
                if acc < slot[d] {
                    slot[d] = acc;
                }
                prev = d;
            }
        }
        best
    }

    fn random_volume(w: usize, h: usize, nd: usize, seed: u64) -> Vec<u16> {
        (0..w * h * nd)
            .map(|i| (hash01(seed, i as i64, 0, 1) * 6000.0) as u16)
            .collect()
    }

    #[test]
    fn single_path_matches_exhaustive_scanline_search() {
        let (w, h, nd) = (8, 8, 4);
        let p = SgmParams {
            num_disparities: nd,
            p1: 20,
            p2: 90,
            num_paths: 1,
            ..SgmParams::default()
        };
        for seed in [3, 5, 8] {
            let vol = random_volume(w, h, nd, seed);
            let mut sum = vec![0u32; w * h * nd];
            aggregate_dir(&vol, w, h, nd, &p, (1, 0), &mut sum);
            for row in 0..h {
                let oracle = scanline_oracle(&vol, w, nd, row, &p);
                for x in 0..w {
                    let agg = &sum[(row * w + x) * nd..(row * w + x + 1) * nd];
                    let agg_min = *agg.iter().min().unwrap();
                    let ora_min = *oracle[x].iter().min().unwrap();
                    for d in 0..nd {
                        // Min subtraction shifts each pixel's costs by a
                        // constant, so compare them min-normalized.
                        assert_eq!(
                            u64::from(agg[d] - agg_min),
                            oracle[x][d] - ora_min,
                            "seed {seed} row {row} x {x} d {d}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn path_costs_stay_below_max_cost_plus_p2() {
        let (w, h, nd) = (12, 9, 6);
        let p = SgmParams {
            num_disparities: nd,
            ..SgmParams::default()
        };
        for seed in [21, 22, 23] {
            let vol = random_volume(w, h, nd, seed);
            let cap = u32::from(*vol.iter().max().unwrap()) + p.p2;
            for dir in DIRECTIONS {
                let mut sum = vec![0u32; w * h * nd];
                aggregate_dir(&vol, w, h, nd, &p, dir, &mut sum);
                assert!(sum.iter().all(|&v| v <= cap), "dir {dir:?}");
            }
        }
    }

    #[test]
    fn depth_from_disparity_matches_the_projective_formula() {
        let cam = CameraModel {
            focal_px: 400.0,
            baseline: 0.12,
            ..CameraModel::default()
        };
        let disp = DisparityImage {
            width: 3,
            height: 1,
            disp: vec![16.0, 0.0, 0.004],
            valid: vec![true, true, true],
        };
        let z = disparity_to_depth(&disp, &cam);
        assert_eq!(z.depth[0], 3.0);
        assert!(!z.valid[1], "zero disparity has no depth");
        assert_eq!(z.depth[2], cam.max_range, "far returns clamp to range");
    }

    #[test]
    fn invalid_disparity_stays_invalid_in_depth() {
        let disp = DisparityImage {
            width: 2,
            height: 1,
            disp: vec![4.0, 4.0],
            valid: vec![false, true],
        };
        let z = disparity_to_depth(&disp, &CameraModel::default());
        assert!(!z.valid[0]);
        assert!(z.valid[1]);
    }

    #[test]
    fn downscale_averages_only_valid_depths() {
        let src = DepthImage {
            width: 4,
            height: 2,
            depth: vec![2.0, 4.0, 9.0, 9.0, 6.0, 100.0, 9.0, 9.0],
            valid: vec![true, true, true, false, true, false, false, false],
        };
        let out = downscale_depth(&src, 2);
        assert_eq!(out.width, 2);
        assert_eq!(out.height, 1);
        assert_eq!(out.depth[0], 4.0, "mean of the three valid entries");
        assert!(out.valid[0]);
        assert_eq!(out.depth[1], 9.0, "single valid entry passes through");
        assert!(out.valid[1]);
    }

    #[test]
    fn rendered_roundtrip_stays_within_disparity_quantization() {
        let map = training_room();
        let cam = CameraModel::default();
        let rig = CameraPose {
            x: 1.5,
            y: 2.5,
            z: 0.25,
            heading: 0.0,
        };
        let rec = stereo_depth_pipeline(&map, &rig, &cam, &SgmParams::default()).unwrap();
        let gt = render_depth(&map, &rig, &cam);
        let fb = cam.upscaled().focal_px * cam.baseline;
        let (mut valid, mut within) = (0usize, 0usize);
        for i in 0..rec.depth.len() {
            if !rec.valid[i] || !gt.valid[i] {
                continue;
            }
            valid += 1;
            let bound = gt.depth[i] * gt.depth[i] / fb;
            if (rec.depth[i] - gt.depth[i]).abs() <= bound {
                within += 1;
            }
        }
        assert!(
            valid >= rec.depth.len() / 2,
            "only {valid} of {} pixels reconstructed",
            rec.depth.len()
        );
        assert!(
            within * 10 >= valid * 9,
            "{within} of {valid} within the quantization bound"
        );
    }
}
