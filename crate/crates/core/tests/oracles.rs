//! Kernels and losses against direct brute-force formulas on random inputs.

mod common;

use common::*;
use proptest::prelude::*;
use styleforge_core::flow::warp;
use styleforge_core::losses::{
    content_loss, style_loss, temporal_feature_loss, temporal_output_loss, tv_loss, StyleTarget,
};
use styleforge_core::ops::{conv2d, ConvSpec, Padding};
use styleforge_core::perceptual::{FeatureTaps, TapLabel};
use styleforge_core::pipeline::flicker_metric;
use styleforge_core::rng::SplitMix64;
use styleforge_core::Shape;

const TOL: f64 = 1e-6;

fn random_taps(rng: &mut SplitMix64, channels: [usize; 4], side: usize) -> FeatureTaps<f64> {
    let mut sides = [side, side / 2, side / 4, side / 8];
    sides.iter_mut().for_each(|s| *s = (*s).max(1));
    FeatureTaps {
        taps: std::array::from_fn(|i| random_image(rng, Shape::new(1, channels[i], sides[i], sides[i] + 1))),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv_matches_direct_sum(
        seed in any::<u64>(),
        n in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..7,
        k in prop::sample::select(vec![1usize, 3, 5, 7, 9]),
        stride in 1usize..3,
        h in 5usize..13,
        w in 5usize..13,
        zero in any::<bool>(),
    ) {
        let mut rng = SplitMix64::new(seed);
        let padding = if zero { Padding::Zero } else { Padding::Reflect };
        prop_assume!(padding == Padding::Zero || (k / 2 < h && k / 2 < w));
        let x = random_tensor(&mut rng, Shape::new(n, cin, h, w), 1.0);
        let wt = random_tensor(&mut rng, Shape::new(cout, cin, k, k), 1.0);
        let b = random_tensor(&mut rng, Shape::vector(cout), 1.0);
        let expected = naive_conv(&x, &wt, &b, stride, padding);
        let got = conv2d(&x, &ConvSpec::new(wt, b, stride, padding).unwrap()).unwrap();
        prop_assert_eq!(got.shape(), expected.shape());
        prop_assert!(got.max_abs_diff(&expected) < TOL, "{}", got.max_abs_diff(&expected));
    }

    #[test]
    fn warp_matches_bilinear_formula(
        seed in any::<u64>(),
        c in 1usize..4,
        h in 1usize..10,
        w in 1usize..10,
        reach in 0.0f64..12.0,
    ) {
        let mut rng = SplitMix64::new(seed);
        let x = random_tensor(&mut rng, Shape::new(2, c, h, w), 1.0);
        let flow = random_flow(&mut rng, h, w, reach);
        let got = warp(&x, &flow).unwrap();
        prop_assert!(got.max_abs_diff(&naive_warp(&x, &flow)) < TOL);
    }

    #[test]
    fn content_and_tv_match_direct_sums(seed in any::<u64>(), side in 8usize..20) {
        let mut rng = SplitMix64::new(seed);
        let ch = [3, 4, 5, 6];
        let (a, b) = (random_taps(&mut rng, ch, side), random_taps(&mut rng, ch, side));
        let (ga, gb) = (a.get(TapLabel::Relu2_2), b.get(TapLabel::Relu2_2));
        let expected = ga.data().iter().zip(gb.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / ga.len() as f64;
        prop_assert!((content_loss(&a, &b).unwrap() - expected).abs() < TOL);

        let img = random_tensor(&mut rng, Shape::new(2, 3, side, side + 3), 1.0);
        prop_assert!((tv_loss(&img).unwrap() - naive_tv(&img)).abs() < TOL);
    }

    #[test]
    fn style_matches_direct_gram_sums(seed in any::<u64>(), side in 8usize..20) {
        let mut rng = SplitMix64::new(seed);
        let ch = [2, 3, 4, 5];
        let gen = random_taps(&mut rng, ch, side);
        let style = random_taps(&mut rng, ch, side + 4);
        let style32 = FeatureTaps { taps: style.taps.clone().map(|t| t.cast::<f32>()) };
        let target = StyleTarget::from_taps(&style32).unwrap();
        let mut expected = 0.0;
        for label in TapLabel::ALL {
            let g = naive_gram(gen.get(label));
            for (p, q) in g.iter().zip(target.get(label).data()) {
                expected += (p - *q as f64).powi(2);
            }
        }
        let got = style_loss(&gen, &target).unwrap();
        prop_assert!((got - expected).abs() < TOL * expected.max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn temporal_losses_match_direct_sums(seed in any::<u64>(), h in 2usize..9, w in 2usize..9, c in 1usize..5) {
        let mut rng = SplitMix64::new(seed);
        let flow = random_flow(&mut rng, h, w, 3.0);
        let mask = random_mask(&mut rng, h, w);

        let fs = Shape::new(1, c, h, w);
        let (f_t, f_p) = (random_tensor(&mut rng, fs, 1.0), random_tensor(&mut rng, fs, 1.0));
        let wf = naive_warp(&f_p, &flow);
        let expected = naive_masked_mean(fs, &mask, |n, c, y, x| f_t.at(n, c, y, x) - wf.at(n, c, y, x));
        prop_assert!((temporal_feature_loss(&f_t, &f_p, &flow, &mask).unwrap() - expected).abs() < TOL);

        let s = Shape::new(1, 3, h, w);
        let (o_t, o_p) = (random_tensor(&mut rng, s, 1.0), random_tensor(&mut rng, s, 1.0));
        let (i_t, i_p) = (random_image(&mut rng, s), random_image(&mut rng, s));
        let (wo, wi) = (naive_warp(&o_p, &flow), naive_warp(&i_p, &flow));
        let expected = naive_masked_mean(s, &mask, |n, c, y, x| {
            (o_t.at(n, c, y, x) - wo.at(n, c, y, x)) - (luma(&i_t, n, y, x) - luma(&wi, n, y, x))
        });
        let got = temporal_output_loss(&o_t, &o_p, &i_t, &i_p, &flow, &mask).unwrap();
        prop_assert!((got - expected).abs() < TOL);
    }

    #[test]
    fn flicker_matches_per_pixel_oracle(seed in any::<u64>(), len in 2usize..5, h in 2usize..10, w in 2usize..10) {
        let mut rng = SplitMix64::new(seed);
        let s = Shape::new(1, 3, h, w);
        let frames: Vec<_> = (0..len).map(|_| random_image(&mut rng, s).cast::<f32>()).collect();
        let flows: Vec<_> = (1..len).map(|_| random_flow(&mut rng, h, w, 2.5)).collect();
        let masks: Vec<_> = (1..len).map(|_| random_mask(&mut rng, h, w)).collect();
        let mut expected = 0.0;
        for k in 0..len - 1 {
            let (prev, cur) = (frames[k].cast::<f64>(), frames[k + 1].cast::<f64>());
            let wp = naive_warp(&prev, &flows[k]);
            expected += naive_masked_mean(s, &masks[k], |n, c, y, x| cur.at(n, c, y, x) - wp.at(n, c, y, x));
        }
        expected /= (len - 1) as f64;
        let got = flicker_metric(&frames, &flows, &masks).unwrap();
        prop_assert!((got - expected).abs() < TOL, "{got} vs {expected}");
    }
}
