//! Adam with bias correction, global-norm gradient clipping, and the
//! optimizer-state sidecar format.

use crate::kstm::{Container, KstmError, NamedTensor};
use crate::stylenet::param_dims;
use crate::tensor::{Tensor, TensorError};

/// Largest step count stored exactly in the f32 sidecar tensor.
const MAX_STORED_STEP: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let m: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Sidecar container: `<name>.m`, `<name>.v` per parameter plus a
    /// one-element `adam.step` tensor.
    pub fn to_container(&self, names: &[String]) -> Container {
        assert_eq!(names.len(), self.m.len());
        assert!(self.step <= MAX_STORED_STEP, "step count too large for the sidecar");
        let mut tensors = Vec::with_capacity(2 * names.len() + 1);
        for ((name, m), v) in names.iter().zip(&self.m).zip(&self.v) {
            tensors.push(NamedTensor::new(format!("{name}.m"), param_dims(m), m.data().to_vec()));
            tensors.push(NamedTensor::new(format!("{name}.v"), param_dims(v), v.data().to_vec()));
        }
        tensors.push(NamedTensor::new("adam.step", vec![1], vec![self.step as f32]));
        Container {
            alpha: 0.0,
            beta: 0.0,
            variant: 0,
            tensors,
        }
    }

    /// Inverse of [`AdamState::to_container`]; `params` supplies names and
    /// expected shapes.
    pub fn from_container(c: &Container, params: &[(String, &Tensor<f32>)]) -> Result<Self, KstmError> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, p) in params {
            let dims = param_dims(p);
            for (suffix, out) in [("m", &mut m), ("v", &mut v)] {
                let t = c.expect(&format!("{name}.{suffix}"), &dims)?;
                out.push(Tensor::new(p.shape(), t.data.clone()).expect("checked dims"));
            }
        }
        let step = c.expect("adam.step", &[1])?.data[0];
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(KstmError::Header(format!("invalid adam.step {step}")));
        }
        if c.tensors.len() != 2 * params.len() + 1 {
            let known: Vec<String> = params
                .iter()
                .flat_map(|(n, _)| [format!("{n}.m"), format!("{n}.v")])
                .chain(["adam.step".to_string()])
                .collect();
            let extra = c.tensors.iter().find(|t| !known.contains(&t.name)).map(|t| t.name.clone());
            return Err(KstmError::UnexpectedTensor(extra.unwrap_or_default()));
        }
        Ok(AdamState {
            step: step as u64,
            m,
            v,
        })
    }
}

/// One Adam update. The step counter advances even for zero gradients.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            expected: format!("{} tensors", params.len()),
            actual: format!("{} gradients, {} moments", grads.len(), state.m.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                expected: p.shape().to_string(),
                actual: g.shape().to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = config.learning_rate * (mj / c1) / ((vj / c2).sqrt() + config.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
