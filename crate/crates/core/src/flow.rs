//! Optical flow fields, occlusion masks and backward warping.
//!
//! Flow convention used by [`warp`]: for a pixel `p` of the current frame,
//! `p + flow(p)` is where the same scene point sits in the frame being
//! warped. `warp(prev, flow)` therefore aligns the previous frame with the
//! current one.

use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

/// Little-endian `f32` 202021.25, which spells "PIEH".
pub const FLO_MAGIC: [u8; 4] = *b"PIEH";

/// Sundaram-Brox forward/backward consistency constants.
const CONSISTENCY_REL: f64 = 0.01;
const CONSISTENCY_ABS: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("bad .flo magic {0:02x?}, expected \"PIEH\"")]
    BadMagic([u8; 4]),
    #[error("invalid .flo dimensions {width}x{height}")]
    InvalidDimensions { width: i64, height: i64 },
    #[error("truncated .flo payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing bytes after .flo payload: {0}")]
    TrailingBytes(usize),
    #[error("flow value ({u}, {v}) at ({y}, {x}) is not finite")]
    OutOfRange { y: usize, x: usize, u: f32, v: f32 },
    #[error("{what}: dimension mismatch, {expected:?} vs {actual:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("{what}: {h}x{w} not divisible by {factor}")]
    NotDivisible {
        what: &'static str,
        h: usize,
        w: usize,
        factor: usize,
    },
    #[error("velocity ({u}, {v}) too large for {length} frames of {h}x{w}")]
    VelocityTooLarge {
        u: i32,
        v: i32,
        length: usize,
        h: usize,
        w: usize,
    },
}

/// Per-pixel displacement `(u, v)` in pixels, `u` horizontal.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Interleaved `(u, v)` pairs, row-major.
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, FlowError> {
        if height == 0 || width == 0 {
            return Err(FlowError::InvalidDimensions {
                width: width as i64,
                height: height as i64,
            });
        }
        if data.len() != 2 * height * width {
            return Err(FlowError::Truncated {
                expected: 8 * height * width,
                actual: 4 * data.len(),
            });
        }
        for (i, uv) in data.chunks_exact(2).enumerate() {
            let (u, v) = (uv[0], uv[1]);
            if !u.is_finite() || !v.is_finite() {
                return Err(FlowError::OutOfRange {
                    y: i / width,
                    x: i % width,
                    u,
                    v,
                });
            }
        }
        Ok(FlowField { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        let data = std::iter::repeat_n([u, v], height * width).flatten().collect();
        Self::new(height, width, data).expect("constant flow within bounds")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Result<Self, FlowError> {
        let mut data = Vec::with_capacity(2 * height * width);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                data.push(u);
                data.push(v);
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// True when every displacement is smaller than the frame: `|u| < w`,
    /// `|v| < h`.
    pub fn within_frame(&self) -> bool {
        self.data
            .chunks_exact(2)
            .all(|uv| uv[0].abs() < self.width as f32 && uv[1].abs() < self.height as f32)
    }

    /// Bilinear sample of both components at a (clamped) real position.
    fn sample(&self, y: f64, x: f64) -> (f64, f64) {
        let taps = bilinear_taps(y, x, self.height, self.width);
        let mut u = 0.0;
        let mut v = 0.0;
        for (idx, wgt) in taps.idx.iter().zip(taps.wgt) {
            u += wgt * self.data[2 * idx] as f64;
            v += wgt * self.data[2 * idx + 1] as f64;
        }
        (u, v)
    }
}

/// Binary traceability map: `true` = traceable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask length");
        OcclusionMask { height, width, data }
    }

    pub fn all_traceable(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn is_traceable(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn traceable_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 255 for traceable, 0 otherwise.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    /// Any nonzero byte counts as traceable.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self::new(height, width, bytes.iter().map(|&b| b != 0).collect())
    }
}

pub fn read_flo(bytes: &[u8]) -> Result<FlowField, FlowError> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && bytes[..4] != FLO_MAGIC {
            return Err(FlowError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(FlowError::Truncated {
            expected: 12,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FLO_MAGIC {
        return Err(FlowError::BadMagic(magic));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap()) as i64;
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap()) as i64;
    if width <= 0 || height <= 0 {
        return Err(FlowError::InvalidDimensions { width, height });
    }
    let (width, height) = (width as usize, height as usize);
    let payload = &bytes[12..];
    let expected = 8 * width * height;
    if payload.len() < expected {
        return Err(FlowError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FlowError::TrailingBytes(payload.len() - expected));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FlowField::new(height, width, data)
}

pub fn write_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * flow.data.len());
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Taps {
    idx: [usize; 4],
    wgt: [f64; 4],
}

/// Bilinear taps at `(y, x)` after clamping the coordinate into the frame.
#[inline]
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Taps {
    let sy = y.clamp(0.0, (h - 1) as f64);
    let sx = x.clamp(0.0, (w - 1) as f64);
    let y0 = (sy.floor() as usize).min(h - 1);
    let x0 = (sx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    Taps {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wgt: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
    }
}

/// Sampling taps for every pixel of a flow field, shared by the forward and
/// backward warp.
pub(crate) struct WarpPlan {
    taps: Vec<Taps>,
}

impl WarpPlan {
    pub(crate) fn new(flow: &FlowField) -> Self {
        let (h, w) = flow.dims();
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.get(y, x);
                taps.push(bilinear_taps(y as f64 + v as f64, x as f64 + u as f64, h, w));
            }
        }
        WarpPlan { taps }
    }

    pub(crate) fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let mut out = Tensor::<T>::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = x.plane(n, c);
                for (d, t) in out.plane_mut(n, c).iter_mut().zip(&self.taps) {
                    let mut acc = T::zero();
                    for (&i, &wt) in t.idx.iter().zip(&t.wgt) {
                        acc = acc + T::from_f64(wt) * src[i];
                    }
                    *d = acc;
                }
            }
        }
        out
    }

    pub(crate) fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        let s = grad_out.shape();
        let mut dx = Tensor::<T>::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let g = grad_out.plane(n, c).to_vec();
                let dst = dx.plane_mut(n, c);
                for (gv, t) in g.iter().zip(&self.taps) {
                    for (&i, &wt) in t.idx.iter().zip(&t.wgt) {
                        dst[i] = dst[i] + T::from_f64(wt) * *gv;
                    }
                }
            }
        }
        dx
    }
}

pub(crate) fn check_flow_dims(what: &'static str, flow: (usize, usize), s: Shape) -> Result<(), TensorError> {
    if flow != (s.h, s.w) {
        return Err(TensorError::ShapeMismatch {
            op: what,
            expected: format!("spatial {}x{}", flow.0, flow.1),
            actual: s.to_string(),
        });
    }
    Ok(())
}

/// Backward warp with bilinear sampling: `out(p) = x(p + flow(p))`, sampling
/// coordinates clamped to the frame. The same flow applies to every sample
/// and channel.
pub fn warp<T: Scalar>(x: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>, TensorError> {
    check_flow_dims("warp", flow.dims(), x.shape())?;
    Ok(WarpPlan::new(flow).forward(x))
}

/// Forward/backward consistency check. `forward` is the flow being
/// validated, `backward` the flow in the opposite direction, both defined
/// on their own frame's pixel grid.
pub fn occlusion_mask(forward: &FlowField, backward: &FlowField) -> Result<OcclusionMask, FlowError> {
    if forward.dims() != backward.dims() {
        return Err(FlowError::DimensionMismatch {
            what: "occlusion_mask",
            expected: forward.dims(),
            actual: backward.dims(),
        });
    }
    let (h, w) = forward.dims();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = forward.get(y, x);
            let (fu, fv) = (fu as f64, fv as f64);
            let ty = y as f64 + fv;
            let tx = x as f64 + fu;
            let inside = ty >= 0.0 && ty <= (h - 1) as f64 && tx >= 0.0 && tx <= (w - 1) as f64;
            if !inside {
                data.push(false);
                continue;
            }
            let (bu, bv) = backward.sample(ty, tx);
            let sum = (fu + bu).powi(2) + (fv + bv).powi(2);
            let mags = fu * fu + fv * fv + bu * bu + bv * bv;
            data.push(sum <= CONSISTENCY_REL * mags + CONSISTENCY_ABS);
        }
    }
    Ok(OcclusionMask::new(h, w, data))
}

/// Average-pools each `factor x factor` block and rescales displacements to
/// the coarse grid.
pub fn downsample_flow(flow: &FlowField, factor: usize) -> Result<FlowField, FlowError> {
    let (h, w) = flow.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(FlowError::NotDivisible {
            what: "downsample_flow",
            h,
            w,
            factor,
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    FlowField::from_fn(oh, ow, |by, bx| {
        let mut su = 0.0f64;
        let mut sv = 0.0f64;
        for y in by * factor..(by + 1) * factor {
            for x in bx * factor..(bx + 1) * factor {
                let (u, v) = flow.get(y, x);
                su += u as f64;
                sv += v as f64;
            }
        }
        (
            (su / area / factor as f64) as f32,
            (sv / area / factor as f64) as f32,
        )
    })
}

/// A coarse cell is traceable only if every pixel in its block is.
pub fn downsample_mask(mask: &OcclusionMask, factor: usize) -> Result<OcclusionMask, FlowError> {
    let (h, w) = mask.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(FlowError::NotDivisible {
            what: "downsample_mask",
            h,
            w,
            factor,
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut data = Vec::with_capacity(oh * ow);
    for by in 0..oh {
        for bx in 0..ow {
            let all = (by * factor..(by + 1) * factor)
                .all(|y| (bx * factor..(bx + 1) * factor).all(|x| mask.is_traceable(y, x)));
            data.push(all);
        }
    }
    Ok(OcclusionMask::new(oh, ow, data))
}

/// A synthetic clip with exact ground-truth motion.
///
/// `flows[k]` and `masks[k]` describe the pair `(frames[k], frames[k + 1])`
/// on the grid of `frames[k + 1]`: `warp(frames[k], flows[k])` equals
/// `frames[k + 1]` wherever `masks[k]` is traceable.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<Tensor<f32>>,
    pub flows: Vec<FlowField>,
    pub masks: Vec<OcclusionMask>,
}

/// Smooth random RGB pattern: a sum of low-frequency sinusoids around 0.5.
struct SmoothTexture {
    waves: Vec<[f64; 3]>,
    phases: Vec<[f64; 3]>,
    amps: Vec<f64>,
}

impl SmoothTexture {
    const WAVES: usize = 6;

    fn new(rng: &mut SplitMix64) -> Self {
        let mut waves = Vec::new();
        let mut phases = Vec::new();
        let mut amps = Vec::new();
        for _ in 0..Self::WAVES {
            let freq = 0.08 + 0.5 * rng.next_f64();
            let angle = std::f64::consts::TAU * rng.next_f64();
            waves.push([freq * angle.cos(), freq * angle.sin(), 0.0]);
            phases.push([
                std::f64::consts::TAU * rng.next_f64(),
                std::f64::consts::TAU * rng.next_f64(),
                std::f64::consts::TAU * rng.next_f64(),
            ]);
            amps.push(0.5 / Self::WAVES as f64 * (0.5 + 0.5 * rng.next_f64()));
        }
        SmoothTexture { waves, phases, amps }
    }

    fn eval(&self, c: usize, y: i64, x: i64) -> f32 {
        let mut v = 0.5;
        for ((k, ph), a) in self.waves.iter().zip(&self.phases).zip(&self.amps) {
            v += a * (k[0] * x as f64 + k[1] * y as f64 + ph[c]).sin();
        }
        v.clamp(0.0, 1.0) as f32
    }
}

/// Generates `length` frames of a textured rectangle drifting over a static
/// textured background. Each frame, the rectangle's content at pixel `p`
/// comes from `p + velocity` in the previous frame, so the window itself
/// moves by `-velocity`.
pub fn synth_sequence(
    seed: u64,
    length: usize,
    height: usize,
    width: usize,
    velocity: (i32, i32),
) -> Result<SyntheticSequence, FlowError> {
    let (u, v) = velocity;
    let (au, av) = (u.unsigned_abs() as usize, v.unsigned_abs() as usize);
    if height == 0 || width == 0 || length == 0 || au * length >= width || av * length >= height {
        return Err(FlowError::VelocityTooLarge {
            u,
            v,
            length,
            h: height,
            w: width,
        });
    }
    let mut rng = SplitMix64::new(seed);
    let background = SmoothTexture::new(&mut rng);
    let texture = SmoothTexture::new(&mut rng);

    // Window size and starting corner chosen so the window stays in frame.
    let span_x = width - au * (length - 1);
    let span_y = height - av * (length - 1);
    let (win_w, win_h) = ((span_x / 2).max(1), (span_y / 2).max(1));
    let start_x = (span_x - win_w) / 2 + if u > 0 { au * (length - 1) } else { 0 };
    let start_y = (span_y - win_h) / 2 + if v > 0 { av * (length - 1) } else { 0 };
    let window = |t: usize| -> (i64, i64) {
        (
            start_y as i64 - t as i64 * v as i64,
            start_x as i64 - t as i64 * u as i64,
        )
    };
    let inside = |t: usize, y: usize, x: usize| -> bool {
        let (y0, x0) = window(t);
        let (y, x) = (y as i64, x as i64);
        y >= y0 && y < y0 + win_h as i64 && x >= x0 && x < x0 + win_w as i64
    };

    let shape = Shape::new(1, 3, height, width);
    let frames: Vec<Tensor<f32>> = (0..length)
        .map(|t| {
            Tensor::from_fn(shape, |_, c, y, x| {
                if inside(t, y, x) {
                    texture.eval(c, y as i64 + t as i64 * v as i64, x as i64 + t as i64 * u as i64)
                } else {
                    background.eval(c, y as i64, x as i64)
                }
            })
        })
        .collect();

    let mut flows = Vec::with_capacity(length.saturating_sub(1));
    let mut masks = Vec::with_capacity(length.saturating_sub(1));
    for t in 1..length {
        flows.push(FlowField::from_fn(height, width, |y, x| {
            if inside(t, y, x) {
                (u as f32, v as f32)
            } else {
                (0.0, 0.0)
            }
        })?);
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(inside(t, y, x) || !inside(t - 1, y, x));
            }
        }
        masks.push(OcclusionMask::new(height, width, data));
    }
    Ok(SyntheticSequence { frames, flows, masks })
}
