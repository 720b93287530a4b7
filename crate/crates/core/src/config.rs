//! Flat `key = value` run configuration for training and fine-tuning.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. Relative paths resolve against the config file's
//! directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::stylenet::{ArchConfig, Variant};
use crate::trainer::TrainingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key \"{key}\"")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key \"{key}\"")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value for {key}: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("missing required field \"{0}\"")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractorChoice {
    Tiny { seed: u64 },
    Vgg16 { weights: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub style_image: PathBuf,
    pub extractor: ExtractorChoice,
    /// Architecture of a freshly built model when no `init_model` is given.
    pub arch: ArchConfig,
    pub model_seed: u64,
    pub init_model: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "style_image",
    "extractor",
    "extractor_seed",
    "vgg16_weights",
    "alpha",
    "beta",
    "variant",
    "model_seed",
    "init_model",
    "checkpoint_dir",
    "trace",
    "gamma_content",
    "rho_style",
    "tau_tv",
    "lambda_f",
    "lambda_o",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "stage1_steps",
    "stage2_steps",
    "batch_size",
    "stage1_resolution",
    "stage2_resolution",
    "checkpoint_interval",
    "seed",
    "clip_norm",
    "style_size",
];

/// Parses `WxH` into `(height, width)`.
pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got \"{s}\""))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err(format!("zero dimension in \"{s}\""));
    }
    Ok((h, w))
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut t = TrainingConfig::default();
        let mut style_image = None;
        let mut extractor_kind = "tiny".to_string();
        let mut extractor_line = 0;
        let mut extractor_seed = 0u64;
        let mut vgg16_weights = None;
        let (mut alpha, mut beta, mut variant) = (1.0f32, 0.5f32, Variant::Paper);
        let mut arch_line = 0;
        let mut model_seed = 0;
        let mut init_model = None;
        let mut checkpoint_dir = None;
        let mut trace = None;
        let mut seen = HashSet::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (key, value) = s.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            let err = |message: String| ConfigError::Value {
                line,
                key: key.to_string(),
                message,
            };
            fn num<T: FromStr>(v: &str) -> Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
            }
            let path = |v: &str| -> Result<PathBuf, ConfigError> {
                if v.is_empty() {
                    return Err(err("empty path".into()));
                }
                Ok(base_dir.join(v))
            };
            match key {
                "style_image" => style_image = Some(path(value)?),
                "extractor" => {
                    extractor_kind = value.to_string();
                    extractor_line = line;
                }
                "extractor_seed" => extractor_seed = num(value).map_err(err)?,
                "vgg16_weights" => vgg16_weights = Some(path(value)?),
                "alpha" => {
                    alpha = num(value).map_err(err)?;
                    arch_line = line;
                }
                "beta" => {
                    beta = num(value).map_err(err)?;
                    arch_line = line;
                }
                "variant" => {
                    variant = value.parse().map_err(|e| err(format!("{e}")))?;
                    arch_line = line;
                }
                "model_seed" => model_seed = num(value).map_err(err)?,
                "init_model" => init_model = Some(path(value)?),
                "checkpoint_dir" => checkpoint_dir = Some(path(value)?),
                "trace" => trace = Some(path(value)?),
                "gamma_content" => t.weights.gamma_content = num(value).map_err(err)?,
                "rho_style" => t.weights.rho_style = num(value).map_err(err)?,
                "tau_tv" => t.weights.tau_tv = num(value).map_err(err)?,
                "lambda_f" => t.weights.lambda_f = num(value).map_err(err)?,
                "lambda_o" => t.weights.lambda_o = num(value).map_err(err)?,
                "learning_rate" => t.learning_rate = num(value).map_err(err)?,
                "adam_beta1" => t.adam_beta1 = num(value).map_err(err)?,
                "adam_beta2" => t.adam_beta2 = num(value).map_err(err)?,
                "adam_eps" => t.adam_eps = num(value).map_err(err)?,
                "stage1_steps" => t.stage1_steps = num(value).map_err(err)?,
                "stage2_steps" => t.stage2_steps = num(value).map_err(err)?,
                "batch_size" => t.batch_size = num(value).map_err(err)?,
                "stage1_resolution" => t.stage1_resolution = parse_resolution(value).map_err(err)?,
                "stage2_resolution" => t.stage2_resolution = parse_resolution(value).map_err(err)?,
                "checkpoint_interval" => t.checkpoint_interval = num(value).map_err(err)?,
                "seed" => t.seed = num(value).map_err(err)?,
                "clip_norm" => t.clip_norm = num(value).map_err(err)?,
                "style_size" => t.style_size = num(value).map_err(err)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }

        let style_image = style_image.ok_or(ConfigError::Missing("style_image"))?;
        let extractor = match extractor_kind.as_str() {
            "tiny" => ExtractorChoice::Tiny { seed: extractor_seed },
            "vgg16" => ExtractorChoice::Vgg16 {
                weights: vgg16_weights.ok_or(ConfigError::Missing("vgg16_weights"))?,
            },
            other => {
                return Err(ConfigError::Value {
                    line: extractor_line,
                    key: "extractor".into(),
                    message: format!("expected tiny or vgg16, got \"{other}\""),
                })
            }
        };
        let arch = ArchConfig::new(alpha, beta, variant).map_err(|e| ConfigError::Value {
            line: arch_line,
            key: "alpha/beta".into(),
            message: e.to_string(),
        })?;
        t.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(RunConfig {
            training: t,
            style_image,
            extractor,
            arch,
            model_seed,
            init_model,
            checkpoint_dir,
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "style_image = style.ppm\n";

    #[test]
    fn parses_fields_and_paths() {
        let text = "# desk run\nstyle_image = style.ppm\nalpha = 0.125\nbeta=0.5\n\nstage1_resolution = 64x48\nlambda_o = 3000\nextractor = tiny\nextractor_seed = 7\n";
        let c = RunConfig::parse(text, Path::new("/data")).unwrap();
        assert_eq!(c.style_image, PathBuf::from("/data/style.ppm"));
        assert_eq!(c.arch.alpha(), 0.125);
        assert_eq!(c.training.stage1_resolution, (48, 64));
        assert_eq!(c.training.weights.lambda_o, 3000.0);
        assert_eq!(c.extractor, ExtractorChoice::Tiny { seed: 7 });
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse(&format!("{BASE}\nlamda_o = 1\n"), Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { line: 3, ref key } if key == "lamda_o"), "{e}");
        let e = RunConfig::parse(&format!("{BASE}seed = x\n"), Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Value { line: 2, .. }), "{e}");
        let e = RunConfig::parse(&format!("{BASE}just words\n"), Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 2 }));
        let e = RunConfig::parse(&format!("{BASE}seed = 1\nseed = 2\n"), Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::DuplicateKey { line: 3, .. }));
    }

    #[test]
    fn missing_style_image_is_named() {
        let e = RunConfig::parse("alpha = 0.5\n", Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Missing("style_image")));
        assert!(e.to_string().contains("style_image"));
    }

    #[test]
    fn semantic_checks() {
        let e = RunConfig::parse(&format!("{BASE}stage1_resolution = 60x60\n"), Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)));
        let e = RunConfig::parse(&format!("{BASE}extractor = vgg16\n"), Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Missing("vgg16_weights")));
        let e = RunConfig::parse(&format!("{BASE}alpha = 0.01\n"), Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Value { line: 2, .. }));
    }
}
