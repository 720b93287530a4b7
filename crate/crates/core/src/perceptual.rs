//! Frozen feature extractor supplying the perceptual tap activations.
//!
//! Topology is VGG-like: four stages of 3x3 conv + ReLU, 2x2 max-pooling
//! between stages, one tap at the last ReLU of each stage. Two instances
//! exist: a small deterministic one for tests and desk-scale training, and
//! the VGG16 layout loaded from converted ImageNet weights.

use std::fmt;
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::kstm::{Container, KstmError, NamedTensor};
use crate::ops::{self, Padding};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Header variant byte marking an extractor file.
pub const EXTRACTOR_VARIANT: u8 = 2;

const TINY_WIDTHS: [usize; 4] = [8, 16, 32, 64];
const TINY_DEPTHS: [usize; 4] = [2, 2, 2, 2];
const VGG16_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const VGG16_DEPTHS: [usize; 4] = [2, 2, 3, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapLabel {
    Relu1_2,
    Relu2_2,
    Relu3_3,
    Relu4_3,
}

impl TapLabel {
    pub const ALL: [TapLabel; 4] = [TapLabel::Relu1_2, TapLabel::Relu2_2, TapLabel::Relu3_3, TapLabel::Relu4_3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TapLabel::Relu1_2 => "relu1_2",
            TapLabel::Relu2_2 => "relu2_2",
            TapLabel::Relu3_3 => "relu3_3",
            TapLabel::Relu4_3 => "relu4_3",
        }
    }
}

impl fmt::Display for TapLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One activation per tap, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTaps<T: Scalar = f32> {
    pub taps: [Tensor<T>; 4],
}

impl<T: Scalar> FeatureTaps<T> {
    pub fn get(&self, label: TapLabel) -> &Tensor<T> {
        &self.taps[label.index()]
    }
}

/// Tap activations recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapVars {
    pub taps: [Var; 4],
}

impl TapVars {
    pub fn get(&self, label: TapLabel) -> Var {
        self.taps[label.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<Vec<Conv>>,
    mean: [f32; 3],
    std: [f32; 3],
}

impl FeatureExtractor {
    fn random(widths: [usize; 4], depths: [usize; 4], seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for (&w, &d) in widths.iter().zip(&depths) {
            let mut convs = Vec::with_capacity(d);
            for _ in 0..d {
                let bound = (6.0 / ((cin + w) * 9) as f64).sqrt();
                let shape = Shape::new(w, cin, 3, 3);
                let data = (0..shape.numel()).map(|_| rng.symmetric(bound) as f32).collect();
                convs.push(Conv {
                    weight: Tensor::new(shape, data).expect("weight shape"),
                    bias: Tensor::zeros(Shape::vector(w)),
                });
                cin = w;
            }
            stages.push(convs);
        }
        FeatureExtractor {
            stages,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Small extractor with widths 8/16/32/64, two convolutions per stage
    /// and splitmix64 Glorot-uniform weights.
    pub fn tiny(seed: u64) -> Self {
        Self::random(TINY_WIDTHS, TINY_DEPTHS, seed)
    }

    /// VGG16 topology through conv4_3 with random weights. Only useful for
    /// exercising the file format and shapes.
    pub fn vgg16_random(seed: u64) -> Self {
        Self::random(VGG16_WIDTHS, VGG16_DEPTHS, seed)
    }

    /// Channel width at each tap.
    pub fn tap_widths(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for (o, s) in out.iter_mut().zip(&self.stages) {
            *o = s.last().map(|c| c.weight.shape().n).unwrap_or(0);
        }
        out
    }

    pub fn conv_depths(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }

    fn preprocess_coefficients(&self) -> ([f32; 3], [f32; 3]) {
        let scale = self.std.map(|s| 1.0 / s);
        let shift = [0, 1, 2].map(|c| -self.mean[c] / self.std[c]);
        (scale, shift)
    }

    fn check_input(s: Shape) -> Result<(), TensorError> {
        if s.c != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "extract",
                expected: "3 channels".into(),
                actual: s.to_string(),
            });
        }
        ops::require_divisible("extract", s, 8)
    }

    /// Tap activations of an image in `[0, 1]`; spatial dims divisible by 8.
    pub fn extract(&self, image: &Tensor<f32>) -> Result<FeatureTaps<f32>, TensorError> {
        Self::check_input(image.shape())?;
        let (scale, shift) = self.preprocess_coefficients();
        let mut x = ops::channel_affine(image, &scale, &shift)?;
        let mut taps = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = ops::max_pool2(&x)?.0;
            }
            for conv in stage {
                x = ops::relu(&ops::conv2d_forward(&x, &conv.weight, Some(&conv.bias), 1, Padding::Zero)?);
            }
            taps.push(x.clone());
        }
        Ok(FeatureTaps {
            taps: taps.try_into().expect("four stages"),
        })
    }

    /// Differentiable extraction. Weights enter the tape as constants, so
    /// gradients reach `image` but never the extractor.
    pub fn extract_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<TapVars, TensorError> {
        Self::check_input(tape.value(image).shape())?;
        let (scale, shift) = self.preprocess_coefficients();
        let cast = |v: [f32; 3]| v.iter().map(|&s| T::from_f64(s as f64)).collect::<Vec<_>>();
        let mut x = tape.channel_affine(image, cast(scale), cast(shift))?;
        let mut taps = [image; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = tape.max_pool2(x)?;
            }
            for conv in stage {
                let w = tape.constant(conv.weight.cast());
                let b = tape.constant(conv.bias.cast());
                let y = tape.conv2d(x, w, b, 1, Padding::Zero)?;
                x = tape.relu(y);
            }
            taps[i] = x;
        }
        Ok(TapVars { taps })
    }

    /// Raw bytes of every weight, for checking that training leaves the
    /// extractor untouched.
    pub fn weight_bytes(&self) -> Vec<u8> {
        self.stages
            .iter()
            .flatten()
            .flat_map(|c| c.weight.data().iter().chain(c.bias.data()))
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, conv) in stage.iter().enumerate() {
                let ws = conv.weight.shape();
                let name = format!("conv{}_{}", s + 1, i + 1);
                tensors.push(NamedTensor::new(
                    format!("{name}.weight"),
                    vec![ws.n as u32, ws.c as u32, ws.h as u32, ws.w as u32],
                    conv.weight.data().to_vec(),
                ));
                tensors.push(NamedTensor::new(
                    format!("{name}.bias"),
                    vec![ws.n as u32],
                    conv.bias.data().to_vec(),
                ));
            }
        }
        Container {
            alpha: 1.0,
            beta: 1.0,
            variant: EXTRACTOR_VARIANT,
            tensors,
        }
    }

    fn from_container_with(c: &Container, widths: [usize; 4], depths: [usize; 4]) -> Result<Self, KstmError> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for (s, (&w, &d)) in widths.iter().zip(&depths).enumerate() {
            let mut convs = Vec::with_capacity(d);
            for i in 0..d {
                let name = format!("conv{}_{}", s + 1, i + 1);
                let wt = c.expect(&format!("{name}.weight"), &[w as u32, cin as u32, 3, 3])?;
                let bs = c.expect(&format!("{name}.bias"), &[w as u32])?;
                convs.push(Conv {
                    weight: Tensor::new(Shape::new(w, cin, 3, 3), wt.data.clone()).expect("checked dims"),
                    bias: Tensor::new(Shape::vector(w), bs.data.clone()).expect("checked dims"),
                });
                cin = w;
            }
            stages.push(convs);
        }
        Ok(FeatureExtractor {
            stages,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        })
    }

    /// Reads any four-stage extractor file, inferring widths and depths from
    /// the `convS_I.weight` tensors it contains.
    pub fn from_container(c: &Container) -> Result<Self, KstmError> {
        let mut widths = [0; 4];
        let mut depths = [0; 4];
        for s in 0..4 {
            let mut i = 0;
            while let Some(t) = c.get(&format!("conv{}_{}.weight", s + 1, i + 1)) {
                widths[s] = *t.dims.first().unwrap_or(&0) as usize;
                i += 1;
            }
            if i == 0 {
                return Err(KstmError::MissingTensor(format!("conv{}_1.weight", s + 1)));
            }
            depths[s] = i;
        }
        Self::from_container_with(c, widths, depths)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KstmError> {
        self.to_container().write_file(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KstmError> {
        Self::from_container(&Container::read_file(path)?)
    }
}

/// Loads VGG16 convolution weights (conv1_1 .. conv4_3) converted to the
/// KSTM container, with tensor names `convX_Y.weight` / `convX_Y.bias`.
pub fn load_vgg16(path: impl AsRef<Path>) -> Result<FeatureExtractor, KstmError> {
    vgg16_from_container(&Container::read_file(path)?)
}

pub fn vgg16_from_container(c: &Container) -> Result<FeatureExtractor, KstmError> {
    FeatureExtractor::from_container_with(c, VGG16_WIDTHS, VGG16_DEPTHS)
}
