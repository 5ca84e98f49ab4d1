//! Convolutional steering regressor trained to imitate the route planner.
//!
//! A small channels-first network maps a stack of the 10 most recent frames
//! to the next 10 steering commands: a strided input convolution, a chain of
//! squeeze/expand blocks that trade spatial extent for channel depth, and a
//! 1x1 projection head whose feature planes are globally averaged into the
//! output vector. Everything is computed from scratch in f64: convolutions
//! lower onto a single matrix product per layer, gradients flow by hand
//! through the same buffers, and Adadelta scales each update by the running
//! ratio of update to gradient magnitudes. Training is fully deterministic
//! for a fixed seed: initialization, epoch shuffles, and the gradient
//! reduction order are all pinned.

use crate::dataset::{Sample, SensorMode, STACK};
use crate::render::{DepthImage, StereoFrame};
use crate::rng::substream;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Steering commands predicted per forward pass.
pub const OUTPUTS: usize = 10;

const CHECKPOINT_MAGIC: &[u8; 8] = b"ROAMNET1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("bad architecture: {0}")]
    BadArchitecture(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("non-finite activation out of layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite gradient for layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty frame history")]
    EmptyHistory,
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 8]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint ends mid-record")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Dense row-major array with explicit extents, outermost first.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One stage of the network. Convolutions and squeeze/expand blocks apply a
/// rectifier; the head is linear and ends in a global spatial average.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// 1x1 squeeze followed by parallel 1x1 and 3x3 expands whose outputs
    /// concatenate along channels.
    Fire {
        squeeze: usize,
        expand1: usize,
        expand3: usize,
    },
    MaxPool { k: usize },
    /// 1x1 projection to `outputs` planes, then global average per plane.
    Head { outputs: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyArchitecture {
    pub mode: SensorMode,
    pub layers: Vec<LayerSpec>,
}

impl PolicyArchitecture {
    /// Default stack: one strided convolution, three squeeze/expand blocks
    /// with pooling between the first two gaps, and the 10-plane head.
    pub fn for_mode(mode: SensorMode) -> Self {
        PolicyArchitecture {
            mode,
            layers: vec![
                LayerSpec::Conv {
                    out_ch: 16,
                    kernel: 7,
                    stride: 2,
                    pad: 3,
                },
                LayerSpec::Fire {
                    squeeze: 8,
                    expand1: 16,
                    expand3: 16,
                },
                LayerSpec::MaxPool { k: 2 },
                LayerSpec::Fire {
                    squeeze: 12,
                    expand1: 24,
                    expand3: 24,
                },
                LayerSpec::MaxPool { k: 2 },
                LayerSpec::Fire {
                    squeeze: 16,
                    expand1: 32,
                    expand3: 32,
                },
                LayerSpec::Head { outputs: OUTPUTS },
            ],
        }
    }

    /// Channels entering the network: the frame stack, times the six
    /// color/eye planes per frame in stereo mode.
    pub fn input_channels(&self) -> usize {
        match self.mode {
            SensorMode::Depth => STACK,
            SensorMode::Stereo => 6 * STACK,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::BadArchitecture(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            match *layer {
                LayerSpec::Conv {
                    out_ch,
                    kernel,
                    stride,
                    pad: _,
                } => {
                    if out_ch == 0 || kernel == 0 || stride == 0 {
                        return bad(format!("layer {i}: zero conv extent"));
                    }
                }
                LayerSpec::Fire {
                    squeeze,
                    expand1,
                    expand3,
                } => {
                    if squeeze == 0 || expand1 == 0 || expand3 == 0 {
                        return bad(format!("layer {i}: zero fire width"));
                    }
                }
                LayerSpec::MaxPool { k } => {
                    if k == 0 {
                        return bad(format!("layer {i}: zero pool size"));
                    }
                }
                LayerSpec::Head { outputs } => {
                    if outputs != OUTPUTS {
                        return bad(format!("layer {i}: head must emit {OUTPUTS} values"));
                    }
                    if !last {
                        return bad(format!("layer {i}: head before the end"));
                    }
                }
            }
            if last && !matches!(layer, LayerSpec::Head { .. }) {
                return bad("network does not end in a head".into());
            }
        }
        Ok(())
    }

    /// Canonical text form, one layer per line; the checkpoint header stores
    /// exactly this.
    pub fn descriptor(&self) -> String {
        let mut s = String::new();
        s.push_str(match self.mode {
            SensorMode::Depth => "mode depth\n",
            SensorMode::Stereo => "mode stereo\n",
        });
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    out_ch,
                    kernel,
                    stride,
                    pad,
                } => s.push_str(&format!("conv {out_ch} {kernel} {stride} {pad}\n")),
                LayerSpec::Fire {
                    squeeze,
                    expand1,
                    expand3,
                } => s.push_str(&format!("fire {squeeze} {expand1} {expand3}\n")),
                LayerSpec::MaxPool { k } => s.push_str(&format!("pool {k}\n")),
                LayerSpec::Head { outputs } => s.push_str(&format!("head {outputs}\n")),
            }
        }
        s
    }

    pub fn from_descriptor(text: &str) -> Result<Self, PolicyError> {
        let bad = |m: String| PolicyError::BadArchitecture(m);
        let mut mode = None;
        let mut layers = Vec::new();
        for line in text.lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let nums = |want: usize| -> Result<Vec<usize>, PolicyError> {
                if fields.len() != want + 1 {
                    return Err(bad(format!("'{line}': expected {want} fields")));
                }
                fields[1..]
                    .iter()
                    .map(|f| f.parse::<usize>().map_err(|_| bad(format!("'{line}'"))))
                    .collect()
            };
            match fields[0] {
                "mode" => {
                    mode = Some(match fields.get(1) {
                        Some(&"depth") => SensorMode::Depth,
                        Some(&"stereo") => SensorMode::Stereo,
                        _ => return Err(bad(format!("'{line}'"))),
                    });
                }
                "conv" => {
                    let v = nums(4)?;
                    layers.push(LayerSpec::Conv {
                        out_ch: v[0],
                        kernel: v[1],
                        stride: v[2],
                        pad: v[3],
                    });
                }
                "fire" => {
                    let v = nums(3)?;
                    layers.push(LayerSpec::Fire {
                        squeeze: v[0],
                        expand1: v[1],
                        expand3: v[2],
                    });
                }
                "pool" => layers.push(LayerSpec::MaxPool { k: nums(1)?[0] }),
                "head" => layers.push(LayerSpec::Head { outputs: nums(1)?[0] }),
                other => return Err(bad(format!("unknown layer '{other}'"))),
            }
        }
        let arch = PolicyArchitecture {
            mode: mode.ok_or_else(|| bad("missing mode line".into()))?,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Shapes of every parameter tensor in canonical order: weights then
    /// bias per convolution; squeeze, 1x1 expand, 3x3 expand per fire block.
    pub fn parameter_shapes(&self) -> Result<Vec<Vec<usize>>, PolicyError> {
        self.validate()?;
        let mut shapes = Vec::new();
        let mut ch = self.input_channels();
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    out_ch,
                    kernel,
                    ..
                } => {
                    shapes.push(vec![out_ch, ch, kernel, kernel]);
                    shapes.push(vec![out_ch]);
                    ch = out_ch;
                }
                LayerSpec::Fire {
                    squeeze,
                    expand1,
                    expand3,
                } => {
                    shapes.push(vec![squeeze, ch, 1, 1]);
                    shapes.push(vec![squeeze]);
                    shapes.push(vec![expand1, squeeze, 1, 1]);
                    shapes.push(vec![expand1]);
                    shapes.push(vec![expand3, squeeze, 3, 3]);
                    shapes.push(vec![expand3]);
                    ch = expand1 + expand3;
                }
                LayerSpec::MaxPool { .. } => {}
                LayerSpec::Head { outputs } => {
                    shapes.push(vec![outputs, ch, 1, 1]);
                    shapes.push(vec![outputs]);
                    ch = outputs;
                }
            }
        }
        Ok(shapes)
    }

    pub fn parameter_count(&self) -> Result<usize, PolicyError> {
        Ok(self
            .parameter_shapes()?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    fn tensors_in(layer: &LayerSpec) -> usize {
        match layer {
            LayerSpec::Conv { .. } | LayerSpec::Head { .. } => 2,
            LayerSpec::Fire { .. } => 6,
            LayerSpec::MaxPool { .. } => 0,
        }
    }

    /// First tensor index of each layer in the canonical parameter list.
    fn tensor_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            offsets.push(at);
            at += Self::tensors_in(layer);
        }
        offsets
    }
}

/// All parameters of one network, in the architecture's canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub arch: PolicyArchitecture,
    pub tensors: Vec<Tensor>,
}

impl PolicyParams {
    pub fn zeros(arch: &PolicyArchitecture) -> Result<Self, PolicyError> {
        let tensors = arch
            .parameter_shapes()?
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Ok(PolicyParams {
            arch: arch.clone(),
            tensors,
        })
    }

    /// Fan-in scaled normal weights; biases start at a small positive level
    /// so every rectifier begins in its active region. Weight tensors draw
    /// sequentially from one derived stream, so the result is a pure
    /// function of the seed.
    pub fn seeded(arch: &PolicyArchitecture, seed: u64) -> Result<Self, PolicyError> {
        let mut params = Self::zeros(arch)?;
        let mut rng = substream(seed, 0);
        for t in &mut params.tensors {
            if t.shape.len() != 4 {
                t.data.fill(0.01);
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in &mut t.data {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(params)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

// Dense kernels. All matrices are row-major f64 slices with explicit
// strides so transposed views cost nothing.

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Channels-first activation plane stack, (c * h + y) * w + x.
#[derive(Clone, Debug)]
struct FeatureMap {
    ch: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    fn zeros(ch: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            ch,
            h,
            w,
            data: vec![0.0; ch * h * w],
        }
    }
}

fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unrolls kernel-sized patches into a (ch * k * k) x (oh * ow) matrix;
/// out-of-bounds taps read zero.
fn im2col(
    input: &FeatureMap,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let p_total = oh * ow;
    let mut cols = vec![0.0; input.ch * kernel * kernel * p_total];
    for ic in 0..input.ch {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ic * kernel + ky) * kernel + kx) * p_total;
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= input.h as isize {
                        continue;
                    }
                    let src = (ic * input.h + y as usize) * input.w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if x >= 0 && x < input.w as isize {
                            cols[dst + ox] = input.data[src + x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters patch-matrix gradients back onto the input plane stack.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    d_input: &mut [f64],
) {
    let p_total = oh * ow;
    for ic in 0..ch {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ic * kernel + ky) * kernel + kx) * p_total;
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = (ic * h + y as usize) * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if x >= 0 && x < w as isize {
                            d_input[dst + x as usize] += dcols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution as one matrix product. A plain 1x1 needs no patch matrix:
/// the input is already in patch layout, and `cols` comes back None.
fn conv_forward(
    input: &FeatureMap,
    w: &Tensor,
    b: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
    relu: bool,
) -> Result<(FeatureMap, Option<Vec<f64>>), PolicyError> {
    let out_ch = w.shape[0];
    let (oh, ow) = match (
        conv_out_dim(input.h, kernel, stride, pad),
        conv_out_dim(input.w, kernel, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(PolicyError::DimensionMismatch(format!(
                "{}x{} input too small for a {kernel}x{kernel} kernel",
                input.h, input.w
            )))
        }
    };
    let p_total = oh * ow;
    let ik2 = input.ch * kernel * kernel;
    let plain = kernel == 1 && stride == 1 && pad == 0;
    let cols_storage = if plain {
        None
    } else {
        Some(im2col(input, kernel, stride, pad, oh, ow))
    };
    let cols: &[f64] = cols_storage.as_deref().unwrap_or(&input.data);
    let mut out = FeatureMap::zeros(out_ch, oh, ow);
    for (o, plane) in out.data.chunks_exact_mut(p_total).enumerate() {
        plane.fill(b.data[o]);
    }
    gemm(
        out_ch, ik2, p_total, 1.0, &w.data, ik2, 1, cols, p_total, 1, 1.0, &mut out.data,
        p_total, 1,
    );
    if relu {
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok((out, cols_storage))
}

/// Reverse of `conv_forward`: masks through the rectifier, accumulates
/// weight and bias gradients, and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &FeatureMap,
    cols: Option<&[f64]>,
    out_data: &[f64],
    out_ch: usize,
    oh: usize,
    ow: usize,
    d_out: &mut [f64],
    w: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
    relu: bool,
    dw: &mut [f64],
    db: &mut [f64],
) -> FeatureMap {
    let p_total = oh * ow;
    let ik2 = input.ch * kernel * kernel;
    if relu {
        for (dv, &v) in d_out.iter_mut().zip(out_data) {
            if v <= 0.0 {
                *dv = 0.0;
            }
        }
    }
    for (o, plane) in d_out.chunks_exact(p_total).enumerate() {
        db[o] += plane.iter().sum::<f64>();
    }
    let cols_slice = cols.unwrap_or(&input.data);
    gemm(
        out_ch, p_total, ik2, 1.0, d_out, p_total, 1, cols_slice, 1, p_total, 1.0, dw, ik2, 1,
    );
    let mut dcols = vec![0.0; ik2 * p_total];
    gemm(
        ik2, out_ch, p_total, 1.0, &w.data, 1, ik2, d_out, p_total, 1, 0.0, &mut dcols,
        p_total, 1,
    );
    let mut d_input = FeatureMap::zeros(input.ch, input.h, input.w);
    if cols.is_none() {
        d_input.data = dcols;
    } else {
        col2im_add(
            &dcols,
            input.ch,
            input.h,
            input.w,
            kernel,
            stride,
            pad,
            oh,
            ow,
            &mut d_input.data,
        );
    }
    d_input
}

fn pool_forward(input: &FeatureMap, k: usize) -> Result<(FeatureMap, Vec<usize>), PolicyError> {
    let oh = input.h / k;
    let ow = input.w / k;
    if oh == 0 || ow == 0 {
        return Err(PolicyError::DimensionMismatch(format!(
            "{}x{} input too small for {k}x{k} pooling",
            input.h, input.w
        )));
    }
    let mut out = FeatureMap::zeros(input.ch, oh, ow);
    let mut argmax = vec![0usize; input.ch * oh * ow];
    for c in 0..input.ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..k {
                    let row = (c * input.h + oy * k + dy) * input.w + ox * k;
                    for dx in 0..k {
                        let v = input.data[row + dx];
                        if v > best {
                            best = v;
                            best_i = row + dx;
                        }
                    }
                }
                let dst = (c * oh + oy) * ow + ox;
                out.data[dst] = best;
                argmax[dst] = best_i;
            }
        }
    }
    Ok((out, argmax))
}

// Per-layer context retained by the forward pass for the backward pass.
// Fire blocks keep the squeeze output (input to both expands) and the 3x3
// patch matrix; the expand activations live as channel slabs of `out`.
enum LayerCache {
    Conv {
        input: FeatureMap,
        cols: Option<Vec<f64>>,
        out: FeatureMap,
    },
    Fire {
        input: FeatureMap,
        sq_out: FeatureMap,
        e3_cols: Vec<f64>,
        out: FeatureMap,
    },
    Pool {
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        argmax: Vec<usize>,
    },
    Head {
        input: FeatureMap,
        pre: FeatureMap,
    },
}

/// Validates an input against the architecture's layout and reinterprets it
/// as a channels-first feature map. Stereo inputs keep their
/// color/eye/time nesting; flattened, that is 60 ordered channels.
fn feature_map_from_input(
    arch: &PolicyArchitecture,
    input: &[f64],
    shape: &[usize],
) -> Result<FeatureMap, PolicyError> {
    let (h, w) = match (arch.mode, shape) {
        (SensorMode::Depth, [c, h, w]) if *c == STACK => (*h, *w),
        (SensorMode::Stereo, [3, 2, t, h, w]) if *t == STACK => (*h, *w),
        _ => {
            return Err(PolicyError::DimensionMismatch(format!(
                "shape {shape:?} does not fit {:?} input",
                arch.mode
            )))
        }
    };
    if h == 0 || w == 0 {
        return Err(PolicyError::DimensionMismatch("empty image".into()));
    }
    let ch = arch.input_channels();
    if input.len() != ch * h * w {
        return Err(PolicyError::DimensionMismatch(format!(
            "{} values for shape {shape:?}",
            input.len()
        )));
    }
    if !input.iter().all(|v| v.is_finite()) {
        return Err(PolicyError::NonFiniteInput);
    }
    Ok(FeatureMap {
        ch,
        h,
        w,
        data: input.to_vec(),
    })
}

fn forward_cached(
    params: &PolicyParams,
    input: FeatureMap,
) -> Result<(Vec<f64>, Vec<LayerCache>), PolicyError> {
    let arch = &params.arch;
    let offsets = arch.tensor_offsets();
    let mut caches = Vec::with_capacity(arch.layers.len());
    let mut fm = input;
    let mut output = Vec::new();
    for (li, layer) in arch.layers.iter().enumerate() {
        let ti = offsets[li];
        match *layer {
            LayerSpec::Conv {
                kernel,
                stride,
                pad,
                ..
            } => {
                let (out, cols) = conv_forward(
                    &fm,
                    &params.tensors[ti],
                    &params.tensors[ti + 1],
                    kernel,
                    stride,
                    pad,
                    true,
                )?;
                let input_fm = std::mem::replace(&mut fm, out.clone());
                caches.push(LayerCache::Conv {
                    input: input_fm,
                    cols,
                    out,
                });
            }
            LayerSpec::Fire { .. } => {
                let (sq_out, _) = conv_forward(
                    &fm,
                    &params.tensors[ti],
                    &params.tensors[ti + 1],
                    1,
                    1,
                    0,
                    true,
                )?;
                let (e1_out, _) = conv_forward(
                    &sq_out,
                    &params.tensors[ti + 2],
                    &params.tensors[ti + 3],
                    1,
                    1,
                    0,
                    true,
                )?;
                let (e3_out, e3_cols) = conv_forward(
                    &sq_out,
                    &params.tensors[ti + 4],
                    &params.tensors[ti + 5],
                    3,
                    1,
                    1,
                    true,
                )?;
                let mut out = FeatureMap {
                    ch: e1_out.ch + e3_out.ch,
                    h: e1_out.h,
                    w: e1_out.w,
                    data: e1_out.data,
                };
                out.data.extend_from_slice(&e3_out.data);
                let input_fm = std::mem::replace(&mut fm, out.clone());
                caches.push(LayerCache::Fire {
                    input: input_fm,
                    sq_out,
                    e3_cols: e3_cols.expect("3x3 conv builds a patch matrix"),
                    out,
                });
            }
            LayerSpec::MaxPool { k } => {
                let (out, argmax) = pool_forward(&fm, k)?;
                caches.push(LayerCache::Pool {
                    in_ch: fm.ch,
                    in_h: fm.h,
                    in_w: fm.w,
                    argmax,
                });
                fm = out;
            }
            LayerSpec::Head { outputs } => {
                let (pre, _) = conv_forward(
                    &fm,
                    &params.tensors[ti],
                    &params.tensors[ti + 1],
                    1,
                    1,
                    0,
                    false,
                )?;
                let plane = (pre.h * pre.w) as f64;
                output = pre
                    .data
                    .chunks_exact(pre.h * pre.w)
                    .map(|p| p.iter().sum::<f64>() / plane)
                    .collect();
                debug_assert_eq!(output.len(), outputs);
                let input_fm = std::mem::replace(&mut fm, FeatureMap::zeros(0, 0, 0));
                caches.push(LayerCache::Head {
                    input: input_fm,
                    pre,
                });
            }
        }
        let produced: &[f64] = match caches.last().unwrap() {
            LayerCache::Head { .. } => &output,
            _ => &fm.data,
        };
        if !produced.iter().all(|v| v.is_finite()) {
            return Err(PolicyError::NonFinite { layer: li });
        }
    }
    Ok((output, caches))
}

/// Mutable weight and bias gradient buffers for the convolution whose
/// weight tensor sits at index `i` (its bias follows it).
fn grad_pair(grads: &mut [Tensor], i: usize) -> (&mut [f64], &mut [f64]) {
    let (head, tail) = grads.split_at_mut(i + 1);
    (&mut head[i].data, &mut tail[0].data)
}

/// Walks the cached layers in reverse, adding each parameter's gradient
/// into `grads` (canonical tensor order, same shapes as the parameters).
fn backward(
    params: &PolicyParams,
    caches: &[LayerCache],
    d_output: &[f64],
    grads: &mut [Tensor],
) {
    let arch = &params.arch;
    let offsets = arch.tensor_offsets();
    let mut d_fm: Option<FeatureMap> = None;
    for (li, layer) in arch.layers.iter().enumerate().rev() {
        let ti = offsets[li];
        match (*layer, &caches[li]) {
            (LayerSpec::Head { .. }, LayerCache::Head { input, pre }) => {
                let plane = pre.h * pre.w;
                let mut d_pre = vec![0.0; pre.data.len()];
                for (o, chunk) in d_pre.chunks_exact_mut(plane).enumerate() {
                    chunk.fill(d_output[o] / plane as f64);
                }
                let (dw, db) = grad_pair(grads, ti);
                let d_in = conv_backward(
                    input,
                    None,
                    &pre.data,
                    pre.ch,
                    pre.h,
                    pre.w,
                    &mut d_pre,
                    &params.tensors[ti],
                    1,
                    1,
                    0,
                    false,
                    dw,
                    db,
                );
                d_fm = Some(d_in);
            }
            (LayerSpec::MaxPool { .. }, LayerCache::Pool { in_ch, in_h, in_w, argmax }) => {
                let d_out = d_fm.take().expect("gradient flows from the head");
                let mut d_in = FeatureMap::zeros(*in_ch, *in_h, *in_w);
                for (dst, &src) in d_out.data.iter().zip(argmax) {
                    d_in.data[src] += dst;
                }
                d_fm = Some(d_in);
            }
            (
                LayerSpec::Conv {
                    kernel,
                    stride,
                    pad,
                    ..
                },
                LayerCache::Conv { input, cols, out },
            ) => {
                let mut d_out = d_fm.take().expect("gradient flows from the head");
                let (dw, db) = grad_pair(grads, ti);
                let d_in = conv_backward(
                    input,
                    cols.as_deref(),
                    &out.data,
                    out.ch,
                    out.h,
                    out.w,
                    &mut d_out.data,
                    &params.tensors[ti],
                    kernel,
                    stride,
                    pad,
                    true,
                    dw,
                    db,
                );
                d_fm = Some(d_in);
            }
            (
                LayerSpec::Fire { expand1, .. },
                LayerCache::Fire {
                    input,
                    sq_out,
                    e3_cols,
                    out,
                },
            ) => {
                let d_out = d_fm.take().expect("gradient flows from the head");
                let plane = out.h * out.w;
                let split = expand1 * plane;
                let (mut d_e1, mut d_e3) = {
                    let (a, b) = d_out.data.split_at(split);
                    (a.to_vec(), b.to_vec())
                };
                let (dw1, db1) = grad_pair(grads, ti + 2);
                let d_sq_a = conv_backward(
                    sq_out,
                    None,
                    &out.data[..split],
                    expand1,
                    out.h,
                    out.w,
                    &mut d_e1,
                    &params.tensors[ti + 2],
                    1,
                    1,
                    0,
                    true,
                    dw1,
                    db1,
                );
                let (dw3, db3) = grad_pair(grads, ti + 4);
                let mut d_sq = conv_backward(
                    sq_out,
                    Some(e3_cols),
                    &out.data[split..],
                    out.ch - expand1,
                    out.h,
                    out.w,
                    &mut d_e3,
                    &params.tensors[ti + 4],
                    3,
                    1,
                    1,
                    true,
                    dw3,
                    db3,
                );
                for (a, b) in d_sq.data.iter_mut().zip(&d_sq_a.data) {
                    *a += b;
                }
                let (dw, db) = grad_pair(grads, ti);
                let d_in = conv_backward(
                    input,
                    None,
                    &sq_out.data,
                    sq_out.ch,
                    sq_out.h,
                    sq_out.w,
                    &mut d_sq.data,
                    &params.tensors[ti],
                    1,
                    1,
                    0,
                    true,
                    dw,
                    db,
                );
                d_fm = Some(d_in);
            }
            _ => unreachable!("cache layout follows the layer list"),
        }
    }
}

/// Runs the network on one stacked input. Deterministic; rejects inputs
/// whose shape or finiteness breaks the declared mode.
pub fn forward(
    params: &PolicyParams,
    input: &[f64],
    shape: &[usize],
) -> Result<Vec<f64>, PolicyError> {
    params.arch.validate()?;
    let fm = feature_map_from_input(&params.arch, input, shape)?;
    let (out, _) = forward_cached(params, fm)?;
    Ok(out)
}

struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn new() -> Self {
        Kahan { sum: 0.0, carry: 0.0 }
    }

    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

fn sample_refs(batch: &[Sample]) -> Vec<&Sample> {
    batch.iter().collect()
}

/// Mean squared error over a batch and its 10 outputs, with the gradient of
/// every parameter tensor. Samples are reduced in slice order; the loss sum
/// is compensated, so any ordering agrees to well under 1e-9.
pub fn loss_and_gradients(
    params: &PolicyParams,
    batch: &[Sample],
) -> Result<(f64, Vec<Tensor>), PolicyError> {
    loss_and_gradients_refs(params, &sample_refs(batch))
}

fn loss_and_gradients_refs(
    params: &PolicyParams,
    batch: &[&Sample],
) -> Result<(f64, Vec<Tensor>), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    params.arch.validate()?;
    let mut grads: Vec<Tensor> = params
        .tensors
        .iter()
        .map(|t| Tensor::zeros(&t.shape))
        .collect();
    let scale = 1.0 / (batch.len() * OUTPUTS) as f64;
    let mut loss = Kahan::new();
    for sample in batch {
        let fm = feature_map_from_input(&params.arch, &sample.input, &sample.shape)?;
        let (pred, caches) = forward_cached(params, fm)?;
        let mut sq = 0.0;
        let mut d_out = vec![0.0; OUTPUTS];
        for o in 0..OUTPUTS {
            let e = pred[o] - sample.target[o];
            sq += e * e;
            d_out[o] = 2.0 * e * scale;
        }
        loss.add(sq / OUTPUTS as f64);
        backward(params, &caches, &d_out, &mut grads);
    }
    let offsets = params.arch.tensor_offsets();
    for (li, layer) in params.arch.layers.iter().enumerate() {
        let ti = offsets[li];
        for t in &grads[ti..ti + PolicyArchitecture::tensors_in(layer)] {
            if !t.all_finite() {
                return Err(PolicyError::NonFiniteGradient { layer: li });
            }
        }
    }
    Ok((loss.value() / batch.len() as f64, grads))
}

/// Forward-only mean squared error of a sample set.
pub fn dataset_mse(params: &PolicyParams, samples: &[Sample]) -> Result<f64, PolicyError> {
    if samples.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut loss = Kahan::new();
    for sample in samples {
        let fm = feature_map_from_input(&params.arch, &sample.input, &sample.shape)?;
        let (pred, _) = forward_cached(params, fm)?;
        let sq: f64 = pred
            .iter()
            .zip(&sample.target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        loss.add(sq / OUTPUTS as f64);
    }
    Ok(loss.value() / samples.len() as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Decay of both running averages.
    pub rho: f64,
    /// Conditioning floor inside both square roots.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            batch_size: 32,
            rho: 0.95,
            epsilon: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::BadConfig(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie strictly inside (0, 1)");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive and finite");
        }
        Ok(())
    }
}

/// Adadelta accumulators: running averages of squared gradients and squared
/// updates, one entry per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub sq_grad: Vec<Tensor>,
    pub sq_update: Vec<Tensor>,
}

impl OptimizerState {
    pub fn for_params(params: &PolicyParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(&t.shape))
            .collect();
        OptimizerState {
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }
}

/// One Adadelta update. Per parameter: the squared-gradient average decays
/// toward g^2, the step is -g scaled by the ratio of the two root-mean
/// accumulators, and the squared-update average decays toward the step.
pub fn adadelta_step(
    params: &mut PolicyParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), PolicyError> {
    cfg.validate()?;
    if grads.len() != params.tensors.len() {
        return Err(PolicyError::DimensionMismatch(format!(
            "{} gradient tensors for {} parameters",
            grads.len(),
            params.tensors.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape != params.tensors[i].shape {
            return Err(PolicyError::DimensionMismatch(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape, params.tensors[i].shape
            )));
        }
    }
    let rho = cfg.rho;
    let eps = cfg.epsilon;
    for (i, g) in grads.iter().enumerate() {
        let p = &mut params.tensors[i].data;
        let eg = &mut state.sq_grad[i].data;
        let eu = &mut state.sq_update[i].data;
        for j in 0..p.len() {
            let gv = g.data[j];
            eg[j] = rho * eg[j] + (1.0 - rho) * gv * gv;
            let delta = -((eu[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * gv;
            eu[j] = rho * eu[j] + (1.0 - rho) * delta * delta;
            p[j] += delta;
        }
    }
    Ok(())
}

/// One row of the loss curve. Validation columns are None when the matching
/// set was not provided.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub val2_mse: Option<f64>,
}

/// Everything a training run produces: the parameters checkpointed after
/// every epoch and the per-epoch loss curve.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PolicyParams>,
    pub curve: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn final_params(&self) -> &PolicyParams {
        self.checkpoints.last().expect("training ran at least one epoch")
    }
}

/// Trains freshly initialized parameters by minibatch Adadelta on the mean
/// squared steering error.
///
/// Each epoch reshuffles the training set with its own derived stream,
/// walks it in batches, then scores the validation sets forward-only and
/// checkpoints the parameters. Identical inputs and seed reproduce every
/// checkpoint bit for bit.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    val2_set: Option<&[Sample]>,
    arch: &PolicyArchitecture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, PolicyError> {
    arch.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut params = PolicyParams::seeded(arch, cfg.seed)?;
    let mut state = OptimizerState::for_params(&params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = substream(cfg.seed, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = Kahan::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = loss_and_gradients_refs(&params, &batch)?;
            adadelta_step(&mut params, &grads, &mut state, cfg)?;
            // Weighted so the epoch figure is the exact mean over samples.
            epoch_loss.add(loss * batch.len() as f64);
        }
        let val_mse = if val_set.is_empty() {
            None
        } else {
            Some(dataset_mse(&params, val_set)?)
        };
        let val2_mse = match val2_set {
            Some(set) if !set.is_empty() => Some(dataset_mse(&params, set)?),
            _ => None,
        };
        curve.push(EpochRecord {
            epoch,
            train_mse: epoch_loss.value() / train_set.len() as f64,
            val_mse,
            val2_mse,
        });
        checkpoints.push(params.clone());
    }
    Ok(TrainOutcome { checkpoints, curve })
}

/// Loss curve as CSV; absent validation columns stay blank.
pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,train_mse,val_mse,val2_mse\n");
    for r in curve {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            r.train_mse,
            cell(r.val_mse),
            cell(r.val2_mse)
        ));
    }
    s
}

/// Rolling buffer of the most recent frames, stacked the same way training
/// samples are. Until 10 frames have been seen, the earliest frame repeats
/// to fill the stack.
#[derive(Clone, Debug)]
pub struct FrameHistory {
    mode: SensorMode,
    h: usize,
    w: usize,
    frames: VecDeque<Vec<f64>>,
}

impl FrameHistory {
    pub fn new(mode: SensorMode, h: usize, w: usize) -> Self {
        FrameHistory {
            mode,
            h,
            w,
            frames: VecDeque::with_capacity(STACK),
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frames.len()
    }

    fn push_planes(&mut self, planes: Vec<f64>) {
        if self.frames.len() == STACK {
            self.frames.pop_front();
        }
        self.frames.push_back(planes);
    }

    /// Appends a depth frame as its bounded inverse-depth plane.
    pub fn push_depth(&mut self, depth: &DepthImage) -> Result<(), PolicyError> {
        if self.mode != SensorMode::Depth {
            return Err(PolicyError::DimensionMismatch(
                "depth frame pushed into a stereo history".into(),
            ));
        }
        if depth.width != self.w || depth.height != self.h {
            return Err(PolicyError::DimensionMismatch(format!(
                "{}x{} frame in a {}x{} history",
                depth.width, depth.height, self.w, self.h
            )));
        }
        self.push_planes(depth.inverse_normalized());
        Ok(())
    }

    /// Appends a stereo pair as six planes ordered color-major, left eye
    /// before right within each color.
    pub fn push_stereo(&mut self, frame: &StereoFrame) -> Result<(), PolicyError> {
        if self.mode != SensorMode::Stereo {
            return Err(PolicyError::DimensionMismatch(
                "stereo frame pushed into a depth history".into(),
            ));
        }
        let plane = self.h * self.w;
        for img in [&frame.left, &frame.right] {
            if img.width != self.w || img.height != self.h || img.channels != 3 {
                return Err(PolicyError::DimensionMismatch(format!(
                    "{}x{}x{} eye in a {}x{} history",
                    img.channels, img.height, img.width, self.h, self.w
                )));
            }
        }
        let mut planes = vec![0.0; 6 * plane];
        for c in 0..3 {
            for (eye, img) in [&frame.left, &frame.right].into_iter().enumerate() {
                let dst = (c * 2 + eye) * plane;
                let src = c * plane;
                planes[dst..dst + plane].copy_from_slice(&img.data[src..src + plane]);
            }
        }
        self.push_planes(planes);
        Ok(())
    }

    /// The stacked network input and its shape. Matches the training sample
    /// layout exactly: depth stacks frames as channels; stereo nests
    /// color, then eye, then time.
    pub fn stacked_input(&self) -> Result<(Vec<f64>, Vec<usize>), PolicyError> {
        if self.frames.is_empty() {
            return Err(PolicyError::EmptyHistory);
        }
        let plane = self.h * self.w;
        // Repeat the earliest frame for the not-yet-seen prefix.
        let frame_at = |k: usize| -> &Vec<f64> {
            let missing = STACK - self.frames.len();
            if k < missing {
                &self.frames[0]
            } else {
                &self.frames[k - missing]
            }
        };
        match self.mode {
            SensorMode::Depth => {
                let mut data = Vec::with_capacity(STACK * plane);
                for k in 0..STACK {
                    data.extend_from_slice(frame_at(k));
                }
                Ok((data, vec![STACK, self.h, self.w]))
            }
            SensorMode::Stereo => {
                let mut data = vec![0.0; 6 * STACK * plane];
                for k in 0..STACK {
                    let planes = frame_at(k);
                    for p in 0..6 {
                        let dst = (p * STACK + k) * plane;
                        let src = p * plane;
                        data[dst..dst + plane].copy_from_slice(&planes[src..src + plane]);
                    }
                }
                Ok((data, vec![3, 2, STACK, self.h, self.w]))
            }
        }
    }
}

/// The steering command to apply now: the first of the 10 predictions,
/// denormalized by the steering limit and clamped back into it.
pub fn predict_steering(
    params: &PolicyParams,
    history: &FrameHistory,
    steering_limit: f64,
) -> Result<f64, PolicyError> {
    let (input, shape) = history.stacked_input()?;
    let out = forward(params, &input, &shape)?;
    Ok((out[0] * steering_limit).clamp(-steering_limit, steering_limit))
}

// Checkpoint container: magic, format version, the architecture descriptor
// text, then every parameter tensor as rank, extents, and f32 data, all
// little-endian.

pub fn checkpoint_bytes(params: &PolicyParams) -> Result<Vec<u8>, PolicyError> {
    let shapes = params.arch.parameter_shapes()?;
    if shapes.len() != params.tensors.len()
        || shapes
            .iter()
            .zip(&params.tensors)
            .any(|(s, t)| s != &t.shape)
    {
        return Err(PolicyError::DimensionMismatch(
            "parameters do not match their architecture".into(),
        ));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let desc = params.arch.descriptor();
    buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    buf.extend_from_slice(desc.as_bytes());
    for t in &params.tensors {
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    Ok(fs::write(path, checkpoint_bytes(params)?)?)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.at.checked_add(n).ok_or(PolicyError::Truncated)?;
        if end > self.bytes.len() {
            return Err(PolicyError::Truncated);
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<PolicyParams, PolicyError> {
    let mut cur = ByteCursor { bytes, at: 0 };
    let mut take = |n: usize| cur.take(n);
    let magic = take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(PolicyError::BadMagic(magic.try_into().unwrap()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(PolicyError::BadVersion(version));
    }
    let desc_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let desc = std::str::from_utf8(take(desc_len)?)
        .map_err(|_| PolicyError::BadCheckpoint("descriptor is not UTF-8".into()))?;
    let arch = PolicyArchitecture::from_descriptor(desc)?;
    let shapes = arch.parameter_shapes()?;
    let mut tensors = Vec::with_capacity(shapes.len());
    for (i, want) in shapes.iter().enumerate() {
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        if &shape != want {
            return Err(PolicyError::BadCheckpoint(format!(
                "tensor {i} has shape {shape:?}, architecture implies {want:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = take(4 * n)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(PolicyError::BadCheckpoint(format!(
                "tensor {i} holds a non-finite value"
            )));
        }
        tensors.push(Tensor { shape, data });
    }
    if cur.at != bytes.len() {
        return Err(PolicyError::BadCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.at
        )));
    }
    Ok(PolicyParams { arch, tensors })
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    checkpoint_from_bytes(&fs::read(path)?)
}
