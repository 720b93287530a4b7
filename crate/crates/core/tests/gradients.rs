//! Tape gradients against central finite differences in f64.

mod common;

use common::*;
use styleforge_core::autograd::{Tape, Var};
use styleforge_core::losses::{
    content_loss_on_tape, stage1_on_tape, stage2_on_tape, style_loss_on_tape, temporal_feature_loss_on_tape,
    temporal_output_loss_on_tape, tv_loss_on_tape, FrameVars, LossWeights, StyleTarget,
};
use styleforge_core::ops::Padding;
use styleforge_core::perceptual::FeatureExtractor;
use styleforge_core::rng::SplitMix64;
use styleforge_core::stylenet::BoundParams;
use styleforge_core::{ArchConfig, FlowField, Shape, StyleNetModel, Tensor, Variant};

const TOL: f64 = 1e-4;

fn target_loss(tape: &mut Tape<f64>, y: Var, target: &Tensor<f64>) -> Var {
    tape.squared_distance(y, target).unwrap()
}

#[test]
fn conv_gradients() {
    let mut rng = SplitMix64::new(1);
    for (k, stride, padding) in [
        (3, 1, Padding::Reflect),
        (3, 2, Padding::Reflect),
        (5, 1, Padding::Zero),
        (1, 2, Padding::Zero),
        (3, 2, Padding::Zero),
    ] {
        let x = random_tensor(&mut rng, Shape::new(2, 2, 7, 6), 1.0);
        let w = random_tensor(&mut rng, Shape::new(3, 2, k, k), 0.5);
        let b = random_tensor(&mut rng, Shape::vector(3), 0.5);
        let out = Shape::new(2, 3, 7usize.div_ceil(stride), 6usize.div_ceil(stride));
        let target = random_tensor(&mut rng, out, 1.0);
        let err = gradient_error(&[x, w, b], |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
            target_loss(tape, y, &target)
        });
        assert!(err < TOL, "k={k} stride={stride} {padding:?}: {err}");
    }
}

#[test]
fn instance_norm_gradients() {
    let mut rng = SplitMix64::new(2);
    let x = random_tensor(&mut rng, Shape::new(2, 3, 5, 4), 2.0);
    let g = random_tensor(&mut rng, Shape::vector(3), 1.5);
    let b = random_tensor(&mut rng, Shape::vector(3), 1.0);
    let target = random_tensor(&mut rng, x.shape(), 1.0);
    let err = gradient_error(&[x, g, b], |tape, v| {
        let y = tape.instance_norm(v[0], v[1], v[2], 1e-5).unwrap();
        target_loss(tape, y, &target)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn warp_gradient() {
    let mut rng = SplitMix64::new(3);
    let x = random_tensor(&mut rng, Shape::new(1, 3, 6, 8), 1.0);
    let flow = random_flow(&mut rng, 6, 8, 3.0);
    let target = random_tensor(&mut rng, x.shape(), 1.0);
    let err = gradient_error(&[x], |tape, v| {
        let y = tape.warp(v[0], &flow).unwrap();
        target_loss(tape, y, &target)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn elementwise_and_resampling_gradients() {
    let mut rng = SplitMix64::new(4);
    let x = random_tensor(&mut rng, Shape::new(1, 3, 4, 6), 1.0);
    let other = random_tensor(&mut rng, x.shape(), 1.0);
    let target = random_tensor(&mut rng, Shape::new(1, 3, 4, 6), 1.0);
    let err = gradient_error(&[x, other], |tape, v| {
        let r = tape.relu(v[0]);
        let up = tape.upsample_nearest(r);
        let pooled = tape.max_pool2(up).unwrap();
        let s = tape.sub(pooled, v[1]).unwrap();
        let a = tape.channel_affine(s, vec![0.5, -2.0, 1.5], vec![0.1, 0.0, -0.3]).unwrap();
        let y = tape.luminance(a).unwrap();
        let y = tape.broadcast_channels(y, 3).unwrap();
        let y = tape.add(y, v[1]).unwrap();
        let y = tape.scale(y, 0.7);
        target_loss(tape, y, &target)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gram_gradient() {
    let mut rng = SplitMix64::new(5);
    let x = random_tensor(&mut rng, Shape::new(1, 4, 3, 5), 1.0);
    let target = random_tensor(&mut rng, Shape::new(1, 1, 4, 4), 0.3);
    let err = gradient_error(&[x], |tape, v| {
        let g = tape.gram(v[0]).unwrap();
        target_loss(tape, g, &target)
    });
    assert!(err < TOL, "{err}");
}

fn taps(tape: &mut Tape<f64>, ex: &FeatureExtractor, x: Var) -> styleforge_core::perceptual::TapVars {
    ex.extract_on_tape(tape, x).unwrap()
}

#[test]
fn content_loss_gradient() {
    let mut rng = SplitMix64::new(6);
    let ex = FeatureExtractor::tiny(7);
    let gen = random_image(&mut rng, Shape::new(1, 3, 8, 8));
    let content = random_image(&mut rng, gen.shape());
    let err = gradient_error(&[gen], |tape, v| {
        let g = taps(tape, &ex, v[0]);
        let c = tape.constant(content.clone());
        let c = taps(tape, &ex, c);
        content_loss_on_tape(tape, &g, &c).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn style_loss_gradient() {
    let mut rng = SplitMix64::new(8);
    let ex = FeatureExtractor::tiny(7);
    let style = random_image(&mut rng, Shape::new(1, 3, 16, 16)).cast::<f32>();
    let target = StyleTarget::from_image(&ex, &style).unwrap();
    let gen = random_image(&mut rng, Shape::new(1, 3, 8, 8));
    let err = gradient_error(&[gen], |tape, v| {
        let g = taps(tape, &ex, v[0]);
        style_loss_on_tape(tape, &g, &target).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn tv_loss_gradient() {
    let mut rng = SplitMix64::new(9);
    let x = random_tensor(&mut rng, Shape::new(2, 3, 5, 7), 1.0);
    let err = gradient_error(&[x], |tape, v| tv_loss_on_tape(tape, v[0]).unwrap());
    assert!(err < TOL, "{err}");
}

#[test]
fn temporal_feature_loss_gradient() {
    let mut rng = SplitMix64::new(10);
    let f_t = random_tensor(&mut rng, Shape::new(1, 4, 4, 6), 1.0);
    let f_p = random_tensor(&mut rng, f_t.shape(), 1.0);
    let flow = random_flow(&mut rng, 4, 6, 1.5);
    let mask = random_mask(&mut rng, 4, 6);
    let err = gradient_error(&[f_t, f_p], |tape, v| {
        temporal_feature_loss_on_tape(tape, v[0], v[1], &flow, &mask).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn temporal_output_loss_gradient() {
    let mut rng = SplitMix64::new(11);
    let s = Shape::new(1, 3, 6, 8);
    let (o_t, o_p) = (random_tensor(&mut rng, s, 1.0), random_tensor(&mut rng, s, 1.0));
    let (i_t, i_p) = (random_image(&mut rng, s), random_image(&mut rng, s));
    let flow = random_flow(&mut rng, 6, 8, 2.0);
    let mask = random_mask(&mut rng, 6, 8);
    let err = gradient_error(&[o_t, o_p], |tape, v| {
        let a = tape.constant(i_t.clone());
        let b = tape.constant(i_p.clone());
        temporal_output_loss_on_tape(tape, v[0], v[1], a, b, &flow, &mask).unwrap()
    });
    assert!(err < TOL, "{err}");
}

fn model_params(model: &StyleNetModel) -> Vec<Tensor<f64>> {
    model.parameters().into_iter().map(|(_, t)| t.cast()).collect()
}

#[test]
fn network_stage1_gradient() {
    let mut rng = SplitMix64::new(12);
    let ex = FeatureExtractor::tiny(7);
    let model = StyleNetModel::build(ArchConfig::new(0.125, 0.5, Variant::Paper).unwrap(), 5);
    let frame = random_image(&mut rng, Shape::new(1, 3, 8, 8));
    let style = random_image(&mut rng, Shape::new(1, 3, 16, 16)).cast::<f32>();
    let target = StyleTarget::from_image(&ex, &style).unwrap();
    let weights = LossWeights {
        rho_style: 10.0,
        tau_tv: 1e-2,
        ..LossWeights::default()
    };
    let err = gradient_error(&model_params(&model), |tape, v| {
        let bound = BoundParams { vars: v.to_vec() };
        let f = tape.constant(frame.clone());
        let out = model.forward_on_tape(tape, &bound, f).unwrap();
        stage1_on_tape(tape, &ex, f, out.image, &target, &weights).unwrap().total
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn network_stage2_gradient() {
    let mut rng = SplitMix64::new(13);
    let ex = FeatureExtractor::tiny(7);
    let model = StyleNetModel::build(ArchConfig::new(0.125, 0.5, Variant::Paper).unwrap(), 6);
    let s = Shape::new(1, 3, 8, 8);
    let (prev, cur) = (random_image(&mut rng, s), random_image(&mut rng, s));
    let flow = FlowField::constant(8, 8, 1.25, -0.5);
    let mask = random_mask(&mut rng, 8, 8);
    let style = random_image(&mut rng, Shape::new(1, 3, 16, 16)).cast::<f32>();
    let target = StyleTarget::from_image(&ex, &style).unwrap();
    let weights = LossWeights {
        rho_style: 10.0,
        tau_tv: 1e-2,
        lambda_f: 1.0,
        lambda_o: 5.0,
        ..LossWeights::default()
    };
    let err = gradient_error(&model_params(&model), |tape, v| {
        let bound = BoundParams { vars: v.to_vec() };
        let frame = |img: &Tensor<f64>, tape: &mut Tape<f64>| {
            let f = tape.constant(img.clone());
            let out = model.forward_on_tape(tape, &bound, f).unwrap();
            FrameVars {
                frame: f,
                image: out.image,
                features: out.features,
            }
        };
        let p = frame(&prev, tape);
        let c = frame(&cur, tape);
        stage2_on_tape(tape, &ex, p, c, &flow, &mask, &target, &weights).unwrap().total
    });
    assert!(err < TOL, "{err}");
}
