//! Frame-directory I/O, stylization, throughput measurement, the flicker
//! metric, and loading of training data from disk.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::flow::{occlusion_mask, read_flo, warp, FlowError, FlowField, OcclusionMask};
use crate::image::{read_mask_pgm, read_ppm, resize_bilinear, write_ppm, PnmError};
use crate::stylenet::{param_count, ArchConfig, StyleNetModel};
use crate::tensor::{Shape, Tensor, TensorError};
use crate::trainer::PairSample;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PnmError },
    #[error("{path}: {source}")]
    Flow { path: PathBuf, source: FlowError },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_frame(path: &Path) -> Result<Tensor<f32>, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_ppm(&bytes).map_err(|source| PipelineError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<(), PipelineError> {
    let bytes = write_ppm(frame).map_err(|source| PipelineError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_flow(path: &Path) -> Result<FlowField, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_flo(&bytes).map_err(|source| PipelineError::Flow {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_mask(path: &Path) -> Result<OcclusionMask, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_mask_pgm(&bytes).map_err(|source| PipelineError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Numbered P6 frames of one clip, in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub paths: Vec<PathBuf>,
    /// `(height, width)` shared by every frame.
    pub resolution: (usize, usize),
    /// Informational only.
    pub frame_rate: Option<f64>,
}

impl FrameSequence {
    /// Lists `*.ppm` in `dir` and checks that all frames share one size.
    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        let paths = list_files(dir, "ppm")?;
        let Some(first) = paths.first() else {
            return Err(PipelineError::Data {
                path: dir.to_path_buf(),
                message: "no .ppm frames found".into(),
            });
        };
        let s = read_frame(first)?.shape();
        let resolution = (s.h, s.w);
        for p in &paths[1..] {
            let t = read_frame(p)?.shape();
            if (t.h, t.w) != resolution {
                return Err(PipelineError::Data {
                    path: p.clone(),
                    message: format!("frame is {}x{}, sequence is {}x{}", t.w, t.h, s.w, s.h),
                });
            }
        }
        Ok(FrameSequence {
            paths,
            resolution,
            frame_rate: None,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn load_all(&self) -> Result<Vec<Tensor<f32>>, PipelineError> {
        self.paths.iter().map(|p| read_frame(p)).collect()
    }
}

/// Resize (if requested), forward pass, clamp to `[0, 1]`.
pub fn stylize_frame(
    model: &StyleNetModel,
    frame: &Tensor<f32>,
    resize: Option<(usize, usize)>,
) -> Result<Tensor<f32>, TensorError> {
    let input = match resize {
        Some((h, w)) => resize_bilinear(frame, h, w),
        None => frame.clone(),
    };
    Ok(model.forward(&input)?.image.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTiming {
    pub name: String,
    pub millis: f64,
}

/// Stylizes every frame of `input` into `out_dir` under the same file
/// names. Frames must be divisible by 4 unless `resize` is given.
pub fn stylize_dir(
    model: &StyleNetModel,
    input: &Path,
    out_dir: &Path,
    resize: Option<(usize, usize)>,
    workers: usize,
) -> Result<Vec<FrameTiming>, PipelineError> {
    let seq = FrameSequence::open(input)?;
    let (h, w) = resize.unwrap_or(seq.resolution);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(PipelineError::Data {
            path: input.to_path_buf(),
            message: format!("frames are {w}x{h}, which is not divisible by 4; pass --resize WxH"),
        });
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let job = |path: &PathBuf| -> Result<FrameTiming, PipelineError> {
        let start = Instant::now();
        let frame = read_frame(path)?;
        let out = stylize_frame(model, &frame, resize)?;
        let name = path.file_name().expect("listed file").to_string_lossy().into_owned();
        write_frame(&out_dir.join(&name), &out)?;
        let millis = start.elapsed().as_secs_f64() * 1e3;
        log::info!("{name}: {millis:.1} ms");
        Ok(FrameTiming { name, millis })
    };
    if workers <= 1 {
        return seq.paths.iter().map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Mismatch(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| seq.paths.par_iter().map(job).collect())
}

/// Mean over consecutive pairs of the masked mean square of
/// `O_t - warp(O_{t-1})`. `flows[k]`, `masks[k]` relate frames `k` and `k + 1`.
pub fn flicker_metric(
    stylized: &[Tensor<f32>],
    flows: &[FlowField],
    masks: &[OcclusionMask],
) -> Result<f64, PipelineError> {
    if stylized.len() < 2 || flows.len() != stylized.len() - 1 || masks.len() != flows.len() {
        return Err(PipelineError::Mismatch(format!(
            "{} frames need {} flows and masks, got {} and {}",
            stylized.len(),
            stylized.len().saturating_sub(1),
            flows.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for k in 0..flows.len() {
        let (prev, cur) = (&stylized[k], &stylized[k + 1]);
        let warped = warp(prev, &flows[k])?;
        let s = cur.shape();
        if masks[k].dims() != (s.h, s.w) || warped.shape() != s {
            return Err(PipelineError::Mismatch(format!("pair {k}: mask or frame size mismatch")));
        }
        let traceable = masks[k].traceable_count();
        if traceable == 0 {
            continue;
        }
        let mut acc = 0.0;
        for n in 0..s.n {
            for c in 0..s.c {
                for ((a, b), &m) in cur.plane(n, c).iter().zip(warped.plane(n, c)).zip(masks[k].as_slice()) {
                    if m {
                        acc += ((a - b) as f64).powi(2);
                    }
                }
            }
        }
        total += acc / (traceable * s.c * s.n) as f64;
    }
    Ok(total / flows.len() as f64)
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Minimum frames per measurement.
pub const MIN_BENCH_FRAMES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config: ArchConfig,
    pub params: u64,
    /// `(height, width)` of the network input.
    pub resolution: (usize, usize),
    pub frames: usize,
    /// Resize, forward pass and clamp per frame.
    pub fps_end_to_end: f64,
    /// Forward pass only, on pre-resized frames, when measured.
    pub fps_forward: Option<f64>,
}

/// Times `model` over `frames` repeated `loops` times at `resolution`,
/// optionally followed by a forward-only pass over pre-resized frames.
pub fn bench_model(
    model: &StyleNetModel,
    frames: &[Tensor<f32>],
    resolution: (usize, usize),
    loops: usize,
    measure_forward: bool,
) -> Result<BenchResult, PipelineError> {
    let total = frames.len() * loops;
    if total < MIN_BENCH_FRAMES {
        return Err(PipelineError::Mismatch(format!(
            "benchmark needs at least {MIN_BENCH_FRAMES} frames, got {} x {loops}",
            frames.len()
        )));
    }
    let (h, w) = resolution;
    let start = Instant::now();
    for _ in 0..loops {
        for f in frames {
            std::hint::black_box(stylize_frame(model, f, Some((h, w)))?);
        }
    }
    let e2e = start.elapsed().as_secs_f64();

    let mut fps_forward = None;
    if measure_forward {
        let resized: Vec<Tensor<f32>> = frames.iter().map(|f| resize_bilinear(f, h, w)).collect();
        let start = Instant::now();
        for _ in 0..loops {
            for f in &resized {
                std::hint::black_box(model.forward(f)?);
            }
        }
        fps_forward = Some(total as f64 / start.elapsed().as_secs_f64());
    }
    Ok(BenchResult {
        config: *model.config(),
        params: param_count(model.config()),
        resolution,
        frames: total,
        fps_end_to_end: total as f64 / e2e,
        fps_forward,
    })
}

/// CPU model, core count and OS of the running host.
pub fn host_description() -> String {
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}; {cores} logical cores; {} {}", std::env::consts::OS, std::env::consts::ARCH)
}

pub const BENCH_HEADER: &str = "alpha,beta,variant,params,log10_params,width,height,frames,fps_end_to_end,fps_forward";

pub fn write_bench_report(out: &mut impl Write, results: &[BenchResult]) -> io::Result<()> {
    writeln!(out, "# host: {}", host_description())?;
    writeln!(out, "{BENCH_HEADER}")?;
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{:.4},{},{},{},{:.3},{}",
            r.config.alpha(),
            r.config.beta(),
            r.config.variant(),
            r.params,
            (r.params as f64).log10(),
            r.resolution.1,
            r.resolution.0,
            r.frames,
            r.fps_end_to_end,
            r.fps_forward.map(|f| format!("{f:.3}")).unwrap_or_default()
        )?;
    }
    Ok(())
}

/// Loads single training images from `dir/*.ppm`, resizing each to
/// `(height, width)`.
pub fn load_images(dir: &Path, resolution: (usize, usize)) -> Result<Vec<Tensor<f32>>, PipelineError> {
    let paths = list_files(dir, "ppm")?;
    if paths.is_empty() {
        return Err(PipelineError::Data {
            path: dir.to_path_buf(),
            message: "no .ppm images found".into(),
        });
    }
    paths
        .iter()
        .map(|p| Ok(resize_bilinear(&read_frame(p)?, resolution.0, resolution.1)))
        .collect()
}

fn crop_frame(t: &Tensor<f32>, top: usize, left: usize, (h, w): (usize, usize)) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| t.at(0, c, y + top, x + left))
}

/// Crops flow and mask to the window; pixels whose target leaves the
/// window become untraceable.
fn crop_motion(
    flow: &FlowField,
    mask: &OcclusionMask,
    top: usize,
    left: usize,
    (h, w): (usize, usize),
) -> (FlowField, OcclusionMask) {
    let f = FlowField::from_fn(h, w, |y, x| flow.get(y + top, x + left)).expect("finite source flow");
    let m = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (u, v) = f.get(y, x);
            let (ty, tx) = (y as f32 + v, x as f32 + u);
            mask.is_traceable(y + top, x + left) && ty >= 0.0 && tx >= 0.0 && ty <= (h - 1) as f32 && tx <= (w - 1) as f32
        })
        .collect();
    (f, OcclusionMask::new(h, w, m))
}

/// Loads frame pairs from a clip directory holding `frames/*.ppm`,
/// `flow/*.flo` (one per consecutive pair) and optionally `mask/*.pgm` or
/// `flow_back/*.flo`. Without either, every pixel counts as traceable.
/// Frames larger than `resolution` are center-cropped.
pub fn load_clip_pairs(dir: &Path, resolution: (usize, usize)) -> Result<Vec<PairSample>, PipelineError> {
    let frames = list_files(&dir.join("frames"), "ppm")?;
    let flows = list_files(&dir.join("flow"), "flo")?;
    if frames.len() < 2 || flows.len() != frames.len() - 1 {
        return Err(PipelineError::Data {
            path: dir.to_path_buf(),
            message: format!("{} frames need {} flow files, found {}", frames.len(), frames.len().saturating_sub(1), flows.len()),
        });
    }
    let masks = if dir.join("mask").is_dir() {
        list_files(&dir.join("mask"), "pgm")?
    } else {
        Vec::new()
    };
    let back = if masks.is_empty() && dir.join("flow_back").is_dir() {
        list_files(&dir.join("flow_back"), "flo")?
    } else {
        Vec::new()
    };
    for (what, list) in [("mask", &masks), ("flow_back", &back)] {
        if !list.is_empty() && list.len() != flows.len() {
            return Err(PipelineError::Data {
                path: dir.join(what),
                message: format!("expected {} files, found {}", flows.len(), list.len()),
            });
        }
    }
    if masks.is_empty() && back.is_empty() {
        log::warn!("{}: no masks or backward flow, treating every pixel as traceable", dir.display());
    }

    let loaded: Vec<Tensor<f32>> = frames.iter().map(|p| read_frame(p)).collect::<Result<_, _>>()?;
    let (h, w) = resolution;
    let mut pairs = Vec::with_capacity(flows.len());
    for k in 0..flows.len() {
        let flow = read_flow(&flows[k])?;
        let s = loaded[k + 1].shape();
        if flow.dims() != (s.h, s.w) {
            return Err(PipelineError::Data {
                path: flows[k].clone(),
                message: format!("flow is {}x{}, frames are {}x{}", flow.width(), flow.height(), s.w, s.h),
            });
        }
        let mask = if !masks.is_empty() {
            read_mask(&masks[k])?
        } else if !back.is_empty() {
            let b = read_flow(&back[k])?;
            occlusion_mask(&flow, &b).map_err(|source| PipelineError::Flow {
                path: back[k].clone(),
                source,
            })?
        } else {
            OcclusionMask::all_traceable(s.h, s.w)
        };
        if mask.dims() != (s.h, s.w) {
            return Err(PipelineError::Data {
                path: dir.join("mask"),
                message: format!("mask {k} is {}x{}, frames are {}x{}", mask.width(), mask.height(), s.w, s.h),
            });
        }
        if s.h < h || s.w < w {
            return Err(PipelineError::Data {
                path: frames[k + 1].clone(),
                message: format!("frame is {}x{}, smaller than the training size {w}x{h}", s.w, s.h),
            });
        }
        let (top, left) = ((s.h - h) / 2, (s.w - w) / 2);
        let (flow, mask) = if (s.h, s.w) == (h, w) {
            (flow, mask)
        } else {
            crop_motion(&flow, &mask, top, left, (h, w))
        };
        pairs.push(PairSample {
            prev: crop_frame(&loaded[k], top, left, (h, w)),
            cur: crop_frame(&loaded[k + 1], top, left, (h, w)),
            flow,
            mask,
        });
    }
    Ok(pairs)
}

/// Pairs from `dir` itself when it has a `frames/` folder, otherwise from
/// every subdirectory that does.
pub fn load_pairs(dir: &Path, resolution: (usize, usize)) -> Result<Vec<PairSample>, PipelineError> {
    if dir.join("frames").is_dir() {
        return load_clip_pairs(dir, resolution);
    }
    let mut clips: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    clips.sort();
    if clips.is_empty() {
        return Err(PipelineError::Data {
            path: dir.to_path_buf(),
            message: "no clip directories with a frames/ folder".into(),
        });
    }
    let mut out = Vec::new();
    for c in clips {
        out.extend(load_clip_pairs(&c, resolution)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stylenet::Variant;

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 1.0, 2.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flicker_fixed_points() {
        let f = Tensor::from_fn(Shape::new(1, 3, 4, 6), |_, c, y, x| (c + y * x) as f32 / 20.0);
        let zero = FlowField::zeros(4, 6);
        let all = OcclusionMask::all_traceable(4, 6);
        let frames = vec![f.clone(), f.clone(), f.clone()];
        assert_eq!(flicker_metric(&frames, &[zero.clone(), zero.clone()], &[all.clone(), all.clone()]).unwrap(), 0.0);
        let shift = FlowField::constant(4, 6, 1.0, 0.0);
        let next = warp(&f, &shift).unwrap();
        assert_eq!(flicker_metric(&[f.clone(), next], &[shift], std::slice::from_ref(&all)).unwrap(), 0.0);
        assert!(flicker_metric(&frames, &[zero], &[all]).is_err());
    }

    #[test]
    fn stylize_dir_preserves_names_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let (input, output) = (dir.path().join("in"), dir.path().join("out"));
        fs::create_dir(&input).unwrap();
        for k in 0..3 {
            let f = Tensor::from_fn(Shape::new(1, 3, 8, 12), |_, c, y, x| ((k + c + y + x) % 4) as f32 / 3.0);
            write_frame(&input.join(format!("f{k:03}.ppm")), &f).unwrap();
        }
        let model = StyleNetModel::build(ArchConfig::new(0.125, 0.5, Variant::Paper).unwrap(), 3);
        let timings = stylize_dir(&model, &input, &output, None, 1).unwrap();
        assert_eq!(timings.len(), 3);
        let names: Vec<_> = list_files(&output, "ppm").unwrap().iter().map(|p| p.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, vec!["f000.ppm", "f001.ppm", "f002.ppm"]);

        let odd = dir.path().join("odd");
        fs::create_dir(&odd).unwrap();
        write_frame(&odd.join("a.ppm"), &Tensor::zeros(Shape::new(1, 3, 6, 10))).unwrap();
        assert!(matches!(stylize_dir(&model, &odd, &output, None, 1), Err(PipelineError::Data { .. })));
        assert_eq!(stylize_dir(&model, &odd, &dir.path().join("o2"), Some((8, 8)), 1).unwrap().len(), 1);
    }

    #[test]
    fn bench_requires_enough_frames() {
        let model = StyleNetModel::build(ArchConfig::new(0.125, 0.5, Variant::Paper).unwrap(), 0);
        let frames = vec![Tensor::zeros(Shape::new(1, 3, 8, 8)); 10];
        assert!(bench_model(&model, &frames, (8, 8), 5, true).is_err());
        let r = bench_model(&model, &frames, (8, 8), 10, true).unwrap();
        assert_eq!(r.frames, 100);
        assert!(r.fps_end_to_end.is_finite() && r.fps_end_to_end > 0.0);
        assert!(r.fps_forward.is_some_and(|f| f > 0.0));
        assert_eq!(bench_model(&model, &frames, (8, 8), 10, false).unwrap().fps_forward, None);
    }
}
