//! Two-stage training: perceptual training on single frames, then
//! fine-tuning on consecutive frame pairs with temporal terms added.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autograd::Tape;
use crate::flow::{FlowField, OcclusionMask};
use crate::image::resize_bilinear;
use crate::kstm::{Container, KstmError};
use crate::losses::{stage1_on_tape, stage2_on_tape, FrameVars, LossError, LossTerms, LossWeights, StyleTarget};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::perceptual::FeatureExtractor;
use crate::rng::SplitMix64;
use crate::stylenet::StyleNetModel;
use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training source is empty")]
    EmptySource,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sample {index}: expected shape {expected}, found {actual}")]
    SampleShape { index: usize, expected: Shape, actual: Shape },
    #[error("sample {index}: {what} is {actual:?}, frames are {expected:?}")]
    SampleDims {
        index: usize,
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kstm(#[from] KstmError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    /// `(height, width)` of stage-1 images.
    pub stage1_resolution: (usize, usize),
    /// `(height, width)` of stage-2 frames.
    pub stage2_resolution: (usize, usize),
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Shorter side of the style image before its Gram matrices are taken.
    pub style_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            stage1_steps: 40_000,
            stage2_steps: 10_000,
            batch_size: 4,
            stage1_resolution: (256, 256),
            stage2_resolution: (352, 640),
            checkpoint_interval: 1000,
            seed: 0,
            clip_norm: 10.0,
            style_size: 512,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.style_size < 8 {
            return bad(format!("style_size must be at least 8, got {}", self.style_size));
        }
        for (name, (h, w)) in [
            ("stage1_resolution", self.stage1_resolution),
            ("stage2_resolution", self.stage2_resolution),
        ] {
            if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
                return bad(format!("{name} {w}x{h} must be non-zero and divisible by 8"));
            }
        }
        Ok(())
    }
}

/// Consecutive frames `I_{t-1}`, `I_t` with the forward flow between them
/// and its occlusion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub prev: Tensor<f32>,
    pub cur: Tensor<f32>,
    pub flow: FlowField,
    pub mask: OcclusionMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub terms: LossTerms,
}

pub const TRACE_HEADER: &str = "step,content,style,tv,temp_f,temp_o,total";

pub fn write_trace(out: &mut impl Write, trace: &[LossRecord]) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        let t = &r.terms;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.step, t.content, t.style, t.tv, t.temp_f, t.temp_o, t.total
        )?;
    }
    Ok(())
}

/// Trailing moving average with window `window`.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Optimizer state carried across checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub adam: AdamState,
}

impl TrainerState {
    pub fn fresh(model: &StyleNetModel) -> Self {
        TrainerState {
            adam: AdamState::new(model.parameters().into_iter().map(|(_, p)| p)),
        }
    }

    pub fn step(&self) -> usize {
        self.adam.step as usize
    }
}

/// Where and under what prefix checkpoints are written.
#[derive(Debug, Clone)]
pub struct Checkpoints {
    pub dir: PathBuf,
    pub prefix: String,
}

impl Checkpoints {
    pub fn model_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("{}_step{step:07}.kstm", self.prefix))
    }

    pub fn state_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("{}_step{step:07}.adam.kstm", self.prefix))
    }
}

pub fn save_checkpoint(model: &StyleNetModel, state: &TrainerState, model_path: &Path, state_path: &Path) -> Result<(), TrainError> {
    model.save(model_path)?;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    state.adam.to_container(&names).write_file(state_path)?;
    Ok(())
}

pub fn load_checkpoint(model_path: &Path, state_path: &Path) -> Result<(StyleNetModel, TrainerState), TrainError> {
    let model = StyleNetModel::load(model_path)?;
    let adam = AdamState::from_container(&Container::read_file(state_path)?, &model.parameters())?;
    Ok((model, TrainerState { adam }))
}

/// Optional run controls shared by both stages.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from a checkpointed optimizer state instead of a fresh one.
    pub resume: Option<TrainerState>,
    pub checkpoints: Option<Checkpoints>,
}

/// Resizes a style image so its shorter side is `shorter_side`, rounding
/// both dims to multiples of 8, and returns its Gram targets.
pub fn style_target_from_image(
    extractor: &FeatureExtractor,
    style: &Tensor<f32>,
    shorter_side: usize,
) -> Result<StyleTarget, TensorError> {
    let s = style.shape();
    let k = shorter_side as f64 / s.h.min(s.w) as f64;
    let round8 = |v: usize| (((v as f64 * k) / 8.0).round() as usize).max(1) * 8;
    let resized = resize_bilinear(style, round8(s.h), round8(s.w));
    StyleTarget::from_image(extractor, &resized)
}

/// Index of the sample occupying global slot `slot` of a seeded sequence
/// of epoch permutations.
fn sample_index(seed: u64, len: usize, slot: usize) -> usize {
    let epoch = slot / len;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = SplitMix64::new(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.shuffle(&mut order);
    order[slot % len]
}

fn check_frame(index: usize, t: &Tensor<f32>, (h, w): (usize, usize)) -> Result<(), TrainError> {
    let expected = Shape::new(1, 3, h, w);
    if t.shape() != expected {
        return Err(TrainError::SampleShape {
            index,
            expected,
            actual: t.shape(),
        });
    }
    Ok(())
}

fn average_terms(acc: &mut LossTerms, t: &LossTerms, k: f64) {
    acc.content += k * t.content;
    acc.style += k * t.style;
    acc.tv += k * t.tv;
    acc.temp_f += k * t.temp_f;
    acc.temp_o += k * t.temp_o;
    acc.total += k * t.total;
}

/// Shared optimization loop; `loss` builds the batch objective on a tape
/// and returns the scalar node and its term values.
fn optimize<F>(
    model: &mut StyleNetModel,
    config: &TrainingConfig,
    steps: usize,
    mut run: RunOptions,
    mut loss: F,
) -> Result<(Vec<LossRecord>, TrainerState), TrainError>
where
    F: FnMut(&mut Tape<f32>, &StyleNetModel, &crate::stylenet::BoundParams, usize) -> Result<(crate::autograd::Var, LossTerms), TrainError>,
{
    let mut state = run.resume.take().unwrap_or_else(|| TrainerState::fresh(model));
    let adam = config.adam();
    let mut trace = Vec::with_capacity(steps.saturating_sub(state.step()));
    while state.step() < steps {
        let step = state.step();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let (total, terms) = loss(&mut tape, model, &bound, step)?;
        if !terms.total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        let mut grads = tape.backward(total)?;
        let mut g: Vec<Tensor<f32>> = bound
            .vars
            .iter()
            .zip(model.parameters())
            .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(tape);
        let norm = clip_global_norm(&mut g, config.clip_norm);
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        adam_step(&mut model.parameters_mut(), &g, &mut state.adam, &adam)?;
        trace.push(LossRecord { step, terms });
        log::debug!("step {step}: total {:.6e} grad norm {norm:.3e}", terms.total);

        let done = state.step();
        if let Some(ck) = &run.checkpoints {
            if config.checkpoint_interval > 0 && done.is_multiple_of(config.checkpoint_interval) {
                fs::create_dir_all(&ck.dir)?;
                save_checkpoint(model, &state, &ck.model_path(done), &ck.state_path(done))?;
                log::info!("checkpoint at step {done}");
            }
        }
    }
    Ok((trace, state))
}

/// Stage 1: Adam on `gamma * content + rho * style + tau * tv` over
/// single images, averaged over each batch.
pub fn train_stage1(
    model: &mut StyleNetModel,
    images: &[Tensor<f32>],
    extractor: &FeatureExtractor,
    target: &StyleTarget,
    config: &TrainingConfig,
    run: RunOptions,
) -> Result<(Vec<LossRecord>, TrainerState), TrainError> {
    config.validate()?;
    if images.is_empty() {
        return Err(TrainError::EmptySource);
    }
    for (i, img) in images.iter().enumerate() {
        check_frame(i, img, config.stage1_resolution)?;
    }
    let b = config.batch_size;
    let k = 1.0 / b as f64;
    let seed = config.seed;
    optimize(model, config, config.stage1_steps, run, |tape, model, bound, step| {
        let mut totals = Vec::with_capacity(b);
        let mut terms = LossTerms::default();
        for j in 0..b {
            let img = &images[sample_index(seed, images.len(), step * b + j)];
            let frame = tape.constant(img.clone());
            let out = model.forward_on_tape(tape, bound, frame)?;
            let v = stage1_on_tape(tape, extractor, frame, out.image, target, &config.weights)?;
            average_terms(&mut terms, &v.terms(tape), k);
            totals.push((v.total, k as f32));
        }
        Ok((tape.weighted_sum(&totals)?, terms))
    })
}

/// Stage 2: continues from the given weights with the pair objective.
pub fn finetune_stage2(
    model: &mut StyleNetModel,
    pairs: &[PairSample],
    extractor: &FeatureExtractor,
    target: &StyleTarget,
    config: &TrainingConfig,
    run: RunOptions,
) -> Result<(Vec<LossRecord>, TrainerState), TrainError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptySource);
    }
    let res = config.stage2_resolution;
    for (i, p) in pairs.iter().enumerate() {
        check_frame(i, &p.prev, res)?;
        check_frame(i, &p.cur, res)?;
        for (what, actual) in [("flow", p.flow.dims()), ("mask", p.mask.dims())] {
            if actual != res {
                return Err(TrainError::SampleDims {
                    index: i,
                    what,
                    expected: res,
                    actual,
                });
            }
        }
    }
    let b = config.batch_size;
    let k = 1.0 / b as f64;
    let seed = config.seed ^ 0x5354_4147_4532;
    optimize(model, config, config.stage2_steps, run, |tape, model, bound, step| {
        let mut totals = Vec::with_capacity(b);
        let mut terms = LossTerms::default();
        for j in 0..b {
            let p = &pairs[sample_index(seed, pairs.len(), step * b + j)];
            let frame_vars = |img: &Tensor<f32>, tape: &mut Tape<f32>| -> Result<FrameVars, TensorError> {
                let frame = tape.constant(img.clone());
                let out = model.forward_on_tape(tape, bound, frame)?;
                Ok(FrameVars {
                    frame,
                    image: out.image,
                    features: out.features,
                })
            };
            let prev = frame_vars(&p.prev, tape)?;
            let cur = frame_vars(&p.cur, tape)?;
            let v = stage2_on_tape(tape, extractor, prev, cur, &p.flow, &p.mask, target, &config.weights)?;
            average_terms(&mut terms, &v.terms(tape), k);
            totals.push((v.total, k as f32));
        }
        Ok((tape.weighted_sum(&totals)?, terms))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::synth_sequence;
    use crate::stylenet::{ArchConfig, Variant};

    fn small_config() -> TrainingConfig {
        TrainingConfig {
            stage1_steps: 3,
            stage2_steps: 2,
            batch_size: 2,
            stage1_resolution: (16, 16),
            stage2_resolution: (16, 16),
            checkpoint_interval: 0,
            style_size: 16,
            ..TrainingConfig::default()
        }
    }

    fn setup() -> (StyleNetModel, FeatureExtractor, StyleTarget, Vec<Tensor<f32>>) {
        let model = StyleNetModel::build(ArchConfig::new(0.125, 0.5, Variant::Paper).unwrap(), 1);
        let ext = FeatureExtractor::tiny(2);
        let style = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| ((c * 5 + y * x) % 9) as f32 / 9.0);
        let target = style_target_from_image(&ext, &style, 16).unwrap();
        let images = (0..3)
            .map(|k| Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| ((k + c + y + 2 * x) % 5) as f32 / 5.0))
            .collect();
        (model, ext, target, images)
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let (mut model, ext, target, images) = setup();
        let before = model.clone();
        let cfg = TrainingConfig {
            stage1_steps: 0,
            ..small_config()
        };
        let (trace, _) = train_stage1(&mut model, &images, &ext, &target, &cfg, RunOptions::default()).unwrap();
        assert!(trace.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut model, ext, target, images) = setup();
        let cfg = small_config();
        assert!(matches!(
            train_stage1(&mut model, &[], &ext, &target, &cfg, RunOptions::default()),
            Err(TrainError::EmptySource)
        ));
        let bad_res = TrainingConfig {
            stage1_resolution: (12, 16),
            ..cfg.clone()
        };
        assert!(matches!(
            train_stage1(&mut model, &images, &ext, &target, &bad_res, RunOptions::default()),
            Err(TrainError::Config(_))
        ));
        let wrong = vec![Tensor::zeros(Shape::new(1, 3, 8, 8))];
        assert!(matches!(
            train_stage1(&mut model, &wrong, &ext, &target, &cfg, RunOptions::default()),
            Err(TrainError::SampleShape { index: 0, .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_moves_weights() {
        let (model0, ext, target, images) = setup();
        let cfg = small_config();
        let run = || {
            let mut m = model0.clone();
            let (trace, _) = train_stage1(&mut m, &images, &ext, &target, &cfg, RunOptions::default()).unwrap();
            (m, trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert_ne!(a, model0);
        assert_eq!(ta.len(), 3);
        assert!(ta.iter().all(|r| r.terms.total.is_finite() && r.terms.total > 0.0));
    }

    #[test]
    fn stage2_rejects_mismatched_flow() {
        let (mut model, ext, target, _) = setup();
        let seq = synth_sequence(1, 2, 16, 16, (1, 0)).unwrap();
        let mut pair = PairSample {
            prev: seq.frames[0].clone(),
            cur: seq.frames[1].clone(),
            flow: seq.flows[0].clone(),
            mask: seq.masks[0].clone(),
        };
        pair.flow = FlowField::zeros(8, 8);
        assert!(matches!(
            finetune_stage2(&mut model, &[pair], &ext, &target, &small_config(), RunOptions::default()),
            Err(TrainError::SampleDims { what: "flow", .. })
        ));
    }

    #[test]
    fn sample_order_covers_each_epoch() {
        let mut seen: Vec<usize> = (0..7).map(|s| sample_index(3, 7, 7 + s)).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
