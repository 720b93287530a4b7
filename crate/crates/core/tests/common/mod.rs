#![allow(dead_code)]

use styleforge_core::autograd::{Tape, Var};
use styleforge_core::ops::Padding;
use styleforge_core::rng::SplitMix64;
use styleforge_core::{FlowField, OcclusionMask, Shape, Tensor};

pub fn random_tensor(rng: &mut SplitMix64, shape: Shape, bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.symmetric(bound))
}

pub fn random_image(rng: &mut SplitMix64, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.next_f64())
}

pub fn random_flow(rng: &mut SplitMix64, h: usize, w: usize, bound: f64) -> FlowField {
    let data = (0..2 * h * w).map(|_| rng.symmetric(bound) as f32).collect();
    FlowField::new(h, w, data).unwrap()
}

pub fn random_mask(rng: &mut SplitMix64, h: usize, w: usize) -> OcclusionMask {
    OcclusionMask::new(h, w, (0..h * w).map(|_| rng.next_f64() < 0.7).collect())
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` between the tape
/// gradient and central differences, over all inputs concatenated. `f`
/// builds the scalar objective from leaf variables.
pub fn gradient_error(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };

    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let x = input.data()[i];
            let h = 1e-6 * x.abs().max(1.0);
            work[k].data_mut()[i] = x + h;
            let up = eval(&work);
            work[k].data_mut()[i] = x - h;
            let down = eval(&work);
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let scale: f64 = a2.sqrt().max(n2.sqrt());
    assert!(scale > 0.0, "objective has zero gradient everywhere");
    diff2.sqrt() / scale
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Direct seven-loop convolution with "same" padding of `k / 2` and
/// output size `ceil(size / stride)`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let pad = (k / 2) as isize;
    let (oh, ow) = (xs.h.div_ceil(stride), xs.w.div_ceil(stride));
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, y, xo| {
        let mut acc = b.data()[o];
        for c in 0..xs.c {
            for i in 0..k {
                for j in 0..k {
                    let sy = (y * stride) as isize + i as isize - pad;
                    let sx = (xo * stride) as isize + j as isize - pad;
                    let v = match padding {
                        Padding::Zero => {
                            if sy < 0 || sx < 0 || sy >= xs.h as isize || sx >= xs.w as isize {
                                0.0
                            } else {
                                x.at(n, c, sy as usize, sx as usize)
                            }
                        }
                        Padding::Reflect => x.at(n, c, reflect(sy, xs.h), reflect(sx, xs.w)),
                    };
                    acc += w.at(o, c, i, j) * v;
                }
            }
        }
        acc
    })
}

/// Bilinear lookup at a real position, clamped to the frame, written as
/// the explicit interpolation formula.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let (y0, x0) = (y.floor(), x.floor());
    let (dy, dx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        let yi = (yy as usize).min(h - 1);
        let xi = (xx as usize).min(w - 1);
        plane[yi * w + xi]
    };
    let top = at(y0, x0) + dx * (at(y0, x0 + 1.0) - at(y0, x0));
    let bottom = at(y0 + 1.0, x0) + dx * (at(y0 + 1.0, x0 + 1.0) - at(y0 + 1.0, x0));
    top + dy * (bottom - top)
}

pub fn naive_warp(x: &Tensor<f64>, flow: &FlowField) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, y, xx| {
        let (u, v) = flow.get(y, xx);
        bilinear(x.plane(n, c), s.h, s.w, y as f64 + v as f64, xx as f64 + u as f64)
    })
}

pub fn naive_gram(f: &Tensor<f64>) -> Vec<f64> {
    let s = f.shape();
    let hw = s.h * s.w;
    let mut g = vec![0.0; s.c * s.c];
    for i in 0..s.c {
        for j in 0..s.c {
            let mut acc = 0.0;
            for p in 0..hw {
                acc += f.plane(0, i)[p] * f.plane(0, j)[p];
            }
            g[i * s.c + j] = acc / (s.c * hw) as f64;
        }
    }
    g
}

pub fn naive_tv(x: &Tensor<f64>) -> f64 {
    let s = x.shape();
    let mut acc = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    if y + 1 < s.h {
                        acc += (x.at(n, c, y + 1, xx) - x.at(n, c, y, xx)).powi(2);
                    }
                    if xx + 1 < s.w {
                        acc += (x.at(n, c, y, xx + 1) - x.at(n, c, y, xx)).powi(2);
                    }
                }
            }
        }
    }
    acc / s.numel() as f64
}

/// Masked mean over traceable pixels (all channels) of `d(n, c, y, x)^2`.
pub fn naive_masked_mean(s: Shape, mask: &OcclusionMask, d: impl Fn(usize, usize, usize, usize) -> f64) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    if mask.is_traceable(y, x) {
                        acc += d(n, c, y, x).powi(2);
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

pub fn luma(x: &Tensor<f64>, n: usize, y: usize, xx: usize) -> f64 {
    0.2126 * x.at(n, 0, y, xx) + 0.7152 * x.at(n, 1, y, xx) + 0.0722 * x.at(n, 2, y, xx)
}
