//! The width/depth-scalable encoder-decoder image transformation network.
//!
//! Layer sequence for widths `(w1, w2, w3)` and `R` residual blocks:
//!
//! ```text
//! conv 3->w1 s1 · IN · ReLU
//! conv w1->w2 s2 · IN · ReLU
//! conv w2->w3 s2 · IN · ReLU
//! R x residual(w3)
//! upsample x2 · conv w3->w2 · IN · ReLU
//! upsample x2 · conv w2->w1 · IN · ReLU
//! conv w1->3                       (no normalization, no activation)
//! ```
//!
//! `alpha` scales the widths (32/48/64), `beta` the residual count (4).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::kstm::{Container, KstmError, NamedTensor};
use crate::ops::{self, Padding, INSTANCE_NORM_EPS};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

const BASE_WIDTHS: [usize; 3] = [32, 48, 64];
const BASE_BLOCKS: f64 = 4.0;
const LEGACY_BASE_BLOCKS: f64 = 5.0;

/// Parameter count of the full-size reference network (widths 48/96/192,
/// four residual blocks, 9x9 first and last kernels).
pub const RECONET_PARAMS: u64 = 3_098_307;

#[derive(Debug, Error, PartialEq)]
pub enum ArchError {
    #[error("alpha {0} outside (0, 1]")]
    Alpha(f32),
    #[error("beta {0} outside (0, 1]")]
    Beta(f32),
    #[error("alpha {0} gives a zero-width layer")]
    ZeroWidth(f32),
    #[error("beta {0} gives zero residual blocks")]
    ZeroBlocks(f32),
    #[error("unknown variant \"{0}\" (expected paper or legacy_v1)")]
    Variant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// All kernels 3x3, `round(4 beta)` residual blocks.
    Paper,
    /// 9x9 first and last kernels, `round(5 beta)` residual blocks.
    LegacyV1,
}

impl Variant {
    pub fn to_byte(self) -> u8 {
        match self {
            Variant::Paper => 0,
            Variant::LegacyV1 => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Variant::Paper),
            1 => Some(Variant::LegacyV1),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Paper => "paper",
            Variant::LegacyV1 => "legacy_v1",
        })
    }
}

impl FromStr for Variant {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Variant::Paper),
            "legacy_v1" | "legacy" => Ok(Variant::LegacyV1),
            other => Err(ArchError::Variant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    alpha: f32,
    beta: f32,
    variant: Variant,
}

impl ArchConfig {
    pub fn new(alpha: f32, beta: f32, variant: Variant) -> Result<Self, ArchError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ArchError::Alpha(alpha));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(ArchError::Beta(beta));
        }
        let cfg = ArchConfig { alpha, beta, variant };
        if cfg.widths().contains(&0) {
            return Err(ArchError::ZeroWidth(alpha));
        }
        if cfg.residual_blocks() == 0 {
            return Err(ArchError::ZeroBlocks(beta));
        }
        Ok(cfg)
    }

    /// The fifteen configurations of the size study, in table order:
    /// beta 1 (legacy layout), then 0.75 and 0.5, each with alpha
    /// 1, 0.75, 0.5, 0.25, 0.125.
    pub fn size_study() -> Vec<ArchConfig> {
        let mut out = Vec::with_capacity(15);
        for beta in [1.0, 0.75, 0.5] {
            let variant = if beta == 1.0 { Variant::LegacyV1 } else { Variant::Paper };
            for alpha in [1.0, 0.75, 0.5, 0.25, 0.125] {
                out.push(ArchConfig::new(alpha, beta, variant).expect("study config"));
            }
        }
        out
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn beta(&self) -> f32 {
        self.beta
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Encoder widths `(w1, w2, w3)`.
    pub fn widths(&self) -> [usize; 3] {
        BASE_WIDTHS.map(|b| (self.alpha as f64 * b as f64).round() as usize)
    }

    pub fn residual_blocks(&self) -> usize {
        let base = match self.variant {
            Variant::Paper => BASE_BLOCKS,
            Variant::LegacyV1 => LEGACY_BASE_BLOCKS,
        };
        (base * self.beta as f64).round() as usize
    }

    /// Kernel size of the first and last convolution.
    pub fn end_kernel(&self) -> usize {
        match self.variant {
            Variant::Paper => 3,
            Variant::LegacyV1 => 9,
        }
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "alpha={} beta={} {}", self.alpha, self.beta, self.variant)
    }
}

fn conv_params(cin: usize, cout: usize, k: usize) -> u64 {
    (cin * cout * k * k + cout) as u64
}

fn count_params(widths: [usize; 3], blocks: usize, end_kernel: usize) -> u64 {
    let [w1, w2, w3] = widths;
    let norm = |c: usize| 2 * c as u64;
    let mut p = conv_params(3, w1, end_kernel) + norm(w1);
    p += conv_params(w1, w2, 3) + norm(w2);
    p += conv_params(w2, w3, 3) + norm(w3);
    p += blocks as u64 * 2 * (conv_params(w3, w3, 3) + norm(w3));
    p += conv_params(w3, w2, 3) + norm(w2);
    p += conv_params(w2, w1, 3) + norm(w1);
    p + conv_params(w1, 3, end_kernel)
}

/// Learnable scalars of a configuration: conv weights and biases plus
/// instance-norm scale and shift.
pub fn param_count(config: &ArchConfig) -> u64 {
    count_params(config.widths(), config.residual_blocks(), config.end_kernel())
}

pub fn reconet_reference_count() -> u64 {
    count_params([48, 96, 192], 4, 9)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeEstimate {
    pub bytes: u64,
    /// Binary megabytes (`bytes / 2^20`).
    pub megabytes: f64,
}

/// Raw `f32` weight storage of a configuration.
pub fn size_estimate(config: &ArchConfig) -> SizeEstimate {
    size_of_params(param_count(config))
}

pub fn size_of_params(params: u64) -> SizeEstimate {
    let bytes = 4 * params;
    SizeEstimate {
        bytes,
        megabytes: bytes as f64 / (1u64 << 20) as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
}

impl ConvLayer {
    fn init(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / ((cin + cout) * k * k) as f64).sqrt();
        let shape = Shape::new(cout, cin, k, k);
        let data = (0..shape.numel()).map(|_| rng.symmetric(bound) as f32).collect();
        ConvLayer {
            weight: Tensor::new(shape, data).expect("conv weight shape"),
            bias: Tensor::zeros(Shape::vector(cout)),
            stride,
        }
    }

    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        ops::conv2d_forward(x, &self.weight, Some(&self.bias), self.stride, Padding::Reflect)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
}

impl NormLayer {
    fn init(c: usize) -> Self {
        NormLayer {
            gamma: Tensor::full(Shape::vector(c), 1.0),
            beta: Tensor::zeros(Shape::vector(c)),
        }
    }
}

/// Convolution followed by instance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNorm {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

impl ConvNorm {
    fn init(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut SplitMix64) -> Self {
        ConvNorm {
            conv: ConvLayer::init(cin, cout, k, stride, rng),
            norm: NormLayer::init(cout),
        }
    }

    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let y = self.conv.forward(x)?;
        ops::instance_norm(&y, &self.norm.gamma, &self.norm.beta, INSTANCE_NORM_EPS)
    }
}

/// `x + IN(conv(ReLU(IN(conv(x)))))`, no activation after the sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub first: ConvNorm,
    pub second: ConvNorm,
}

impl ResidualBlock {
    pub fn branch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let h = ops::relu(&self.first.forward(x)?);
        self.second.forward(&h)
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        x.zip_map(&self.branch(x)?, |a, b| a + b)
    }
}

/// Network output together with the encoder feature map.
#[derive(Debug, Clone)]
pub struct StyleOutput {
    /// Unbounded stylized image; clamp only for export.
    pub image: Tensor<f32>,
    /// Encoder output, `(n, w3, h/4, w/4)`.
    pub features: Tensor<f32>,
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutput {
    pub image: Var,
    pub features: Var,
}

/// Parameters registered on a tape, in [`StyleNetModel::parameters`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleNetModel {
    config: ArchConfig,
    pub encoder: [ConvNorm; 3],
    pub residual: Vec<ResidualBlock>,
    pub decoder: [ConvNorm; 2],
    pub output: ConvLayer,
}

impl StyleNetModel {
    /// Builds a model with Glorot-uniform weights drawn from splitmix64
    /// seeded with `seed`, consumed layer by layer. Biases and shifts start
    /// at 0, scales at 1.
    pub fn build(config: ArchConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let [w1, w2, w3] = config.widths();
        let ke = config.end_kernel();
        let encoder = [
            ConvNorm::init(3, w1, ke, 1, &mut rng),
            ConvNorm::init(w1, w2, 3, 2, &mut rng),
            ConvNorm::init(w2, w3, 3, 2, &mut rng),
        ];
        let residual = (0..config.residual_blocks())
            .map(|_| ResidualBlock {
                first: ConvNorm::init(w3, w3, 3, 1, &mut rng),
                second: ConvNorm::init(w3, w3, 3, 1, &mut rng),
            })
            .collect();
        let decoder = [
            ConvNorm::init(w3, w2, 3, 1, &mut rng),
            ConvNorm::init(w2, w1, 3, 1, &mut rng),
        ];
        let output = ConvLayer::init(w1, 3, ke, 1, &mut rng);
        StyleNetModel {
            config,
            encoder,
            residual,
            decoder,
            output,
        }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    fn conv_norms(&self) -> impl Iterator<Item = (String, &ConvNorm)> {
        let enc = self.encoder.iter().enumerate().map(|(i, b)| (format!("encoder.{i}"), b));
        let res = self.residual.iter().enumerate().flat_map(|(i, r)| {
            [
                (format!("residual.{i}.first"), &r.first),
                (format!("residual.{i}.second"), &r.second),
            ]
        });
        let dec = self.decoder.iter().enumerate().map(|(i, b)| (format!("decoder.{i}"), b));
        enc.chain(res).chain(dec)
    }

    /// Every learnable tensor with its name, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, b) in self.conv_norms() {
            out.push((format!("{prefix}.conv.weight"), &b.conv.weight));
            out.push((format!("{prefix}.conv.bias"), &b.conv.bias));
            out.push((format!("{prefix}.norm.gamma"), &b.norm.gamma));
            out.push((format!("{prefix}.norm.beta"), &b.norm.beta));
        }
        out.push(("output.conv.weight".into(), &self.output.weight));
        out.push(("output.conv.bias".into(), &self.output.bias));
        out
    }

    /// Mutable views in [`Self::parameters`] order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        let blocks = self
            .encoder
            .iter_mut()
            .chain(self.residual.iter_mut().flat_map(|r| [&mut r.first, &mut r.second]))
            .chain(self.decoder.iter_mut());
        for b in blocks {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    /// Number of scalars actually allocated.
    pub fn allocated_params(&self) -> u64 {
        self.parameters().iter().map(|(_, t)| t.len() as u64).sum()
    }

    fn check_input(x: Shape) -> Result<(), TensorError> {
        if x.c != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "stylenet",
                expected: "3 input channels".into(),
                actual: x.to_string(),
            });
        }
        ops::require_divisible("stylenet", x, 4)
    }

    /// Inference pass. `frame` is `(n, 3, h, w)` with `h`, `w` divisible by 4.
    pub fn forward(&self, frame: &Tensor<f32>) -> Result<StyleOutput, TensorError> {
        Self::check_input(frame.shape())?;
        let mut x = frame.clone();
        for b in &self.encoder {
            x = ops::relu(&b.forward(&x)?);
        }
        for r in &self.residual {
            x = r.forward(&x)?;
        }
        let features = x.clone();
        for b in &self.decoder {
            x = ops::relu(&b.forward(&ops::upsample_nearest(&x))?);
        }
        let image = self.output.forward(&x)?;
        Ok(StyleOutput { image, features })
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.parameters().into_iter().map(|(_, t)| tape.leaf(t.cast())).collect(),
        }
    }

    /// Differentiable forward pass using parameters from [`Self::bind`].
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        frame: Var,
    ) -> Result<TapeOutput, TensorError> {
        Self::check_input(tape.value(frame).shape())?;
        let mut p = params.vars.iter().copied();
        let mut next = || p.next().expect("bound parameter list too short");
        let eps = INSTANCE_NORM_EPS;

        let mut conv_norm = |tape: &mut Tape<T>, x: Var, stride: usize| -> Result<Var, TensorError> {
            let (w, b, g, be) = (next(), next(), next(), next());
            let y = tape.conv2d(x, w, b, stride, Padding::Reflect)?;
            tape.instance_norm(y, g, be, eps)
        };

        let mut x = frame;
        for blk in &self.encoder {
            let y = conv_norm(tape, x, blk.conv.stride)?;
            x = tape.relu(y);
        }
        for _ in &self.residual {
            let h = conv_norm(tape, x, 1)?;
            let h = tape.relu(h);
            let h = conv_norm(tape, h, 1)?;
            x = tape.add(x, h)?;
        }
        let features = x;
        for _ in &self.decoder {
            let up = tape.upsample_nearest(x);
            let y = conv_norm(tape, up, 1)?;
            x = tape.relu(y);
        }
        let (w, b) = (next(), next());
        let image = tape.conv2d(x, w, b, 1, Padding::Reflect)?;
        Ok(TapeOutput { image, features })
    }

    pub fn to_container(&self) -> Container {
        Container {
            alpha: self.config.alpha,
            beta: self.config.beta,
            variant: self.config.variant.to_byte(),
            tensors: self
                .parameters()
                .into_iter()
                .map(|(name, t)| NamedTensor::new(name, param_dims(t), t.data().to_vec()))
                .collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, KstmError> {
        let variant = Variant::from_byte(c.variant)
            .ok_or_else(|| KstmError::Header(format!("unknown variant byte {}", c.variant)))?;
        let config = ArchConfig::new(c.alpha, c.beta, variant).map_err(|e| KstmError::Header(e.to_string()))?;
        let mut model = StyleNetModel::build(config, 0);
        let names: Vec<(String, Vec<u32>)> = model
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, param_dims(t)))
            .collect();
        if c.tensors.len() != names.len() {
            if let Some(extra) = c.tensors.iter().find(|t| !names.iter().any(|(n, _)| *n == t.name)) {
                return Err(KstmError::UnexpectedTensor(extra.name.clone()));
            }
        }
        for ((name, dims), dst) in names.iter().zip(model.parameters_mut()) {
            let src = c.expect(name, dims)?;
            dst.data_mut().copy_from_slice(&src.data);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KstmError> {
        self.to_container().write_file(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KstmError> {
        Self::from_container(&Container::read_file(path)?)
    }
}

/// Serialized dims: rank 4 for conv weights, rank 1 for per-channel vectors.
pub(crate) fn param_dims(t: &Tensor<f32>) -> Vec<u32> {
    let s = t.shape();
    if s.n == 1 && s.h == 1 && s.w == 1 {
        vec![s.c as u32]
    } else {
        vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32]
    }
}
