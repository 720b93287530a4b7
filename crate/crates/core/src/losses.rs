//! Perceptual, regularization and temporal loss terms, and the two
//! training objectives built from them.
//!
//! Each term has a tape form used by the trainer and a plain form returning
//! `f64`. The plain forms evaluate the same tape code on constants.

use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::flow::{downsample_flow, downsample_mask, FlowError, FlowField, OcclusionMask};
use crate::perceptual::{FeatureExtractor, FeatureTaps, TapLabel, TapVars};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Resolution ratio between frames and encoder features.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("loss weight {name} = {value} must be finite and non-negative")]
    InvalidWeight { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gamma_content: f64,
    pub rho_style: f64,
    pub tau_tv: f64,
    pub lambda_f: f64,
    pub lambda_o: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma_content: 1.0,
            rho_style: 1e5,
            tau_tv: 1e-6,
            lambda_f: 1e-1,
            lambda_o: 1e1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            gamma_content: 0.0,
            rho_style: 0.0,
            tau_tv: 0.0,
            lambda_f: 0.0,
            lambda_o: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("gamma_content", self.gamma_content),
            ("rho_style", self.rho_style),
            ("tau_tv", self.tau_tv),
            ("lambda_f", self.lambda_f),
            ("lambda_o", self.lambda_o),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Gram matrices of the style image, one per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTarget {
    grams: [Tensor<f32>; 4],
}

impl StyleTarget {
    pub fn from_taps(taps: &FeatureTaps<f32>) -> Result<Self, TensorError> {
        let mut grams = Vec::with_capacity(4);
        for t in &taps.taps {
            grams.push(gram(t)?);
        }
        Ok(StyleTarget {
            grams: grams.try_into().expect("four taps"),
        })
    }

    pub fn from_image(extractor: &FeatureExtractor, style: &Tensor<f32>) -> Result<Self, TensorError> {
        Self::from_taps(&extractor.extract(style)?)
    }

    pub fn get(&self, label: TapLabel) -> &Tensor<f32> {
        &self.grams[label.index()]
    }
}

/// `G = F F^T / (C H W)` as a `(1, 1, C, C)` tensor; input must have `n = 1`.
pub fn gram<T: Scalar>(feature: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    crate::autograd::gram_matrix(feature)
}

pub fn content_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, gen: &TapVars, content: &TapVars) -> Result<Var, TensorError> {
    tape.mse(gen.get(TapLabel::Relu2_2), content.get(TapLabel::Relu2_2))
}

pub fn style_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, gen: &TapVars, target: &StyleTarget) -> Result<Var, TensorError> {
    let mut terms = Vec::with_capacity(4);
    for label in TapLabel::ALL {
        let g = tape.gram(gen.get(label))?;
        let d = tape.squared_distance(g, &target.get(label).cast())?;
        terms.push((d, T::one()));
    }
    tape.weighted_sum(&terms)
}

pub fn tv_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, image: Var) -> Result<Var, TensorError> {
    tape.total_variation(image)
}

/// Masked mean of `|F_t - warp(F_prev)|^2`; flow and mask are already at
/// feature resolution.
pub fn temporal_feature_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f_t: Var,
    f_prev: Var,
    flow_down: &FlowField,
    mask_down: &OcclusionMask,
) -> Result<Var, TensorError> {
    let warped = tape.warp(f_prev, flow_down)?;
    let d = tape.sub(f_t, warped)?;
    tape.masked_mean_square(d, mask_down)
}

/// Masked mean of `((O_t - warp(O_prev)) - (Y(I_t) - Y(warp(I_prev))))^2`
/// over traceable pixels and the three output channels.
pub fn temporal_output_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    o_t: Var,
    o_prev: Var,
    i_t: Var,
    i_prev: Var,
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<Var, TensorError> {
    let wo = tape.warp(o_prev, flow)?;
    let d_out = tape.sub(o_t, wo)?;
    let wi = tape.warp(i_prev, flow)?;
    let y_t = tape.luminance(i_t)?;
    let y_p = tape.luminance(wi)?;
    let d_lum = tape.sub(y_t, y_p)?;
    let channels = tape.value(d_out).shape().c;
    let d_lum = tape.broadcast_channels(d_lum, channels)?;
    let d = tape.sub(d_out, d_lum)?;
    tape.masked_mean_square(d, mask)
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

fn taps_on_tape<T: Scalar>(tape: &mut Tape<T>, taps: &FeatureTaps<T>) -> TapVars {
    TapVars {
        taps: taps.taps.clone().map(|t| tape.constant(t)),
    }
}

pub fn content_loss<T: Scalar>(gen: &FeatureTaps<T>, content: &FeatureTaps<T>) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let (g, c) = (taps_on_tape(&mut tape, gen), taps_on_tape(&mut tape, content));
    let v = content_loss_on_tape(&mut tape, &g, &c)?;
    Ok(scalar_of(&tape, v))
}

pub fn style_loss<T: Scalar>(gen: &FeatureTaps<T>, target: &StyleTarget) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let g = taps_on_tape(&mut tape, gen);
    let v = style_loss_on_tape(&mut tape, &g, target)?;
    Ok(scalar_of(&tape, v))
}

pub fn tv_loss<T: Scalar>(image: &Tensor<T>) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let v = tv_loss_on_tape(&mut tape, x)?;
    Ok(scalar_of(&tape, v))
}

pub fn temporal_feature_loss<T: Scalar>(
    f_t: &Tensor<T>,
    f_prev: &Tensor<T>,
    flow_down: &FlowField,
    mask_down: &OcclusionMask,
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let a = tape.constant(f_t.clone());
    let b = tape.constant(f_prev.clone());
    let v = temporal_feature_loss_on_tape(&mut tape, a, b, flow_down, mask_down)?;
    Ok(scalar_of(&tape, v))
}

pub fn temporal_output_loss<T: Scalar>(
    o_t: &Tensor<T>,
    o_prev: &Tensor<T>,
    i_t: &Tensor<T>,
    i_prev: &Tensor<T>,
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars = [o_t, o_prev, i_t, i_prev].map(|t| tape.constant(t.clone()));
    let v = temporal_output_loss_on_tape(&mut tape, vars[0], vars[1], vars[2], vars[3], flow, mask)?;
    Ok(scalar_of(&tape, v))
}

/// Scalar values of every term; terms absent from an objective are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub temp_f: f64,
    pub temp_o: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Vars {
    pub content: Var,
    pub style: Var,
    pub tv: Var,
    pub total: Var,
}

/// `gamma * content + rho * style + tau * tv` for one frame and the
/// network output produced from it.
pub fn stage1_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    extractor: &FeatureExtractor,
    frame: Var,
    output: Var,
    target: &StyleTarget,
    weights: &LossWeights,
) -> Result<Stage1Vars, TensorError> {
    let content_taps = extractor.extract_on_tape(tape, frame)?;
    let gen_taps = extractor.extract_on_tape(tape, output)?;
    let content = content_loss_on_tape(tape, &gen_taps, &content_taps)?;
    let style = style_loss_on_tape(tape, &gen_taps, target)?;
    let tv = tv_loss_on_tape(tape, output)?;
    let total = tape.weighted_sum(&[
        (content, T::from_f64(weights.gamma_content)),
        (style, T::from_f64(weights.rho_style)),
        (tv, T::from_f64(weights.tau_tv)),
    ])?;
    Ok(Stage1Vars {
        content,
        style,
        tv,
        total,
    })
}

impl Stage1Vars {
    pub fn terms<T: Scalar>(&self, tape: &Tape<T>) -> LossTerms {
        LossTerms {
            content: scalar_of(tape, self.content),
            style: scalar_of(tape, self.style),
            tv: scalar_of(tape, self.tv),
            temp_f: 0.0,
            temp_o: 0.0,
            total: scalar_of(tape, self.total),
        }
    }
}

/// Network output handles for one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameVars {
    pub frame: Var,
    pub image: Var,
    pub features: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Vars {
    pub frames: [Stage1Vars; 2],
    pub temp_f: Var,
    pub temp_o: Var,
    pub total: Var,
}

impl Stage2Vars {
    /// Per-frame terms are summed over both frames.
    pub fn terms<T: Scalar>(&self, tape: &Tape<T>) -> LossTerms {
        let [a, b] = self.frames.map(|f| f.terms(tape));
        LossTerms {
            content: a.content + b.content,
            style: a.style + b.style,
            tv: a.tv + b.tv,
            temp_f: scalar_of(tape, self.temp_f),
            temp_o: scalar_of(tape, self.temp_o),
            total: scalar_of(tape, self.total),
        }
    }
}

/// Stage-1 objective on both frames plus the weighted temporal terms.
/// `flow` and `mask` are at frame resolution and are downsampled for the
/// feature term.
#[allow(clippy::too_many_arguments)]
pub fn stage2_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    extractor: &FeatureExtractor,
    prev: FrameVars,
    cur: FrameVars,
    flow: &FlowField,
    mask: &OcclusionMask,
    target: &StyleTarget,
    weights: &LossWeights,
) -> Result<Stage2Vars, LossError> {
    let s_prev = stage1_on_tape(tape, extractor, prev.frame, prev.image, target, weights)?;
    let s_cur = stage1_on_tape(tape, extractor, cur.frame, cur.image, target, weights)?;
    let flow_down = downsample_flow(flow, FEATURE_STRIDE)?;
    let mask_down = downsample_mask(mask, FEATURE_STRIDE)?;
    let temp_f = temporal_feature_loss_on_tape(tape, cur.features, prev.features, &flow_down, &mask_down)?;
    let temp_o = temporal_output_loss_on_tape(tape, cur.image, prev.image, cur.frame, prev.frame, flow, mask)?;
    let total = tape.weighted_sum(&[
        (s_prev.total, T::one()),
        (s_cur.total, T::one()),
        (temp_f, T::from_f64(weights.lambda_f)),
        (temp_o, T::from_f64(weights.lambda_o)),
    ])?;
    Ok(Stage2Vars {
        frames: [s_prev, s_cur],
        temp_f,
        temp_o,
        total,
    })
}

pub fn total_stage1<T: Scalar>(
    extractor: &FeatureExtractor,
    frame: &Tensor<T>,
    output: &Tensor<T>,
    target: &StyleTarget,
    weights: &LossWeights,
) -> Result<LossTerms, TensorError> {
    let mut tape = Tape::new();
    let f = tape.constant(frame.clone());
    let o = tape.constant(output.clone());
    let v = stage1_on_tape(&mut tape, extractor, f, o, target, weights)?;
    Ok(v.terms(&tape))
}

/// One frame with the network's stylized image and encoder features.
#[derive(Debug, Clone, Copy)]
pub struct FrameOutputs<'a, T: Scalar> {
    pub frame: &'a Tensor<T>,
    pub image: &'a Tensor<T>,
    pub features: &'a Tensor<T>,
}

pub fn total_stage2<T: Scalar>(
    extractor: &FeatureExtractor,
    prev: FrameOutputs<'_, T>,
    cur: FrameOutputs<'_, T>,
    flow: &FlowField,
    mask: &OcclusionMask,
    target: &StyleTarget,
    weights: &LossWeights,
) -> Result<LossTerms, LossError> {
    let mut tape = Tape::new();
    let mut bind = |o: FrameOutputs<'_, T>| FrameVars {
        frame: tape.constant(o.frame.clone()),
        image: tape.constant(o.image.clone()),
        features: tape.constant(o.features.clone()),
    };
    let (p, c) = (bind(prev), bind(cur));
    let v = stage2_on_tape(&mut tape, extractor, p, c, flow, mask, target, weights)?;
    Ok(v.terms(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn gram_hand_example() {
        let f = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, _, _| (c + 1) as f64);
        let g = gram(&f).unwrap();
        assert_eq!(g.data(), &[0.5, 1.0, 1.0, 2.0]);
        assert!(gram(&Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2)))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(gram(&Tensor::<f64>::zeros(Shape::new(2, 3, 2, 2))).is_err());
    }

    fn taps(seed: u64, offset: f64) -> FeatureTaps<f64> {
        let mk = |c: usize, hw: usize, k: u64| {
            Tensor::from_fn(Shape::new(1, c, hw, hw), |_, ch, y, x| {
                ((seed + k) as f64 * 0.37 + ch as f64 * 0.11 + y as f64 * 0.7 - x as f64 * 0.3).sin().abs() + offset
            })
        };
        FeatureTaps {
            taps: [mk(2, 8, 0), mk(3, 4, 1), mk(4, 2, 2), mk(5, 1, 3)],
        }
    }

    #[test]
    fn content_loss_cases() {
        let a = taps(1, 0.0);
        assert_eq!(content_loss(&a, &a).unwrap(), 0.0);
        let b = taps(1, 1.0);
        assert!((content_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut bad = a.clone();
        bad.taps[1] = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(content_loss(&bad, &a).is_err());
    }

    fn target_of(t: &FeatureTaps<f64>) -> StyleTarget {
        StyleTarget::from_taps(&FeatureTaps {
            taps: t.taps.clone().map(|x| x.cast()),
        })
        .unwrap()
    }

    #[test]
    fn style_loss_cases() {
        let a = taps(3, 0.0);
        let target = target_of(&a);
        assert!(style_loss(&a, &target).unwrap() < 1e-12);
        let zero = FeatureTaps {
            taps: a.taps.clone().map(|t| t.map(|_| 0.0)),
        };
        let expect: f64 = TapLabel::ALL
            .iter()
            .map(|&l| target.get(l).data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
            .sum();
        assert!((style_loss(&zero, &target).unwrap() - expect).abs() < 1e-9 * expect.max(1.0));
    }

    #[test]
    fn tv_cases() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tv_loss(&x).unwrap(), 0.5);
        let xt = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(tv_loss(&xt).unwrap(), 0.5);
        assert_eq!(tv_loss(&Tensor::full(Shape::new(1, 3, 4, 4), 0.7f64)).unwrap(), 0.0);
        assert!(tv_loss(&Tensor::<f64>::zeros(Shape::new(1, 1, 1, 4))).is_err());
    }

    #[test]
    fn temporal_feature_cases() {
        let f = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, y, x| (c * 9 + y * 3 + x) as f64);
        let delta = 0.25;
        let g = f.map(|v| v + delta);
        let flow = FlowField::zeros(3, 3);
        let all = OcclusionMask::all_traceable(3, 3);
        assert_eq!(temporal_feature_loss(&f, &f, &flow, &all).unwrap(), 0.0);
        assert!((temporal_feature_loss(&g, &f, &flow, &all).unwrap() - delta * delta).abs() < 1e-12);
        let none = OcclusionMask::new(3, 3, vec![false; 9]);
        assert_eq!(temporal_feature_loss(&g, &f, &flow, &none).unwrap(), 0.0);
        assert!(temporal_feature_loss(&g, &f, &FlowField::zeros(4, 4), &all).is_err());
    }

    #[test]
    fn temporal_output_static_scene() {
        let i = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, c, y, x| (c + y + x) as f64 / 10.0);
        let o = i.map(|v| v * 2.0 - 0.3);
        let flow = FlowField::zeros(4, 4);
        let mask = OcclusionMask::all_traceable(4, 4);
        assert_eq!(temporal_output_loss(&o, &o, &i, &i, &flow, &mask).unwrap(), 0.0);
        let c = 0.3;
        let shifted = o.map(|v| v + c);
        let got = temporal_output_loss(&shifted, &o, &i, &i, &flow, &mask).unwrap();
        assert!((got - c * c).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            tau_tv: -1.0,
            ..LossWeights::default()
        };
        assert_eq!(
            w.validate(),
            Err(LossError::InvalidWeight {
                name: "tau_tv",
                value: -1.0
            })
        );
    }

    #[test]
    fn stage1_composition() {
        let e = FeatureExtractor::tiny(9);
        let frame = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| ((c + 2 * y + x) % 7) as f64 / 7.0);
        let out = frame.map(|v| 1.0 - v);
        let target = StyleTarget::from_image(&e, &frame.cast()).unwrap();
        let zero = total_stage1(&e, &frame, &out, &target, &LossWeights::zero()).unwrap();
        assert_eq!(zero.total, 0.0);
        let only_content = LossWeights {
            gamma_content: 1.0,
            ..LossWeights::zero()
        };
        let t = total_stage1(&e, &frame, &out, &target, &only_content).unwrap();
        assert_eq!(t.total, t.content);
        let w = LossWeights::default();
        let t = total_stage1(&e, &frame, &out, &target, &w).unwrap();
        let expect = w.gamma_content * t.content + w.rho_style * t.style + w.tau_tv * t.tv;
        assert!((t.total - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }
}
