//! Flat `key = value` configuration files.
//!
//! `#` starts a comment, blank lines are ignored, every key may appear at
//! most once and unknown keys are errors. A model config may name a
//! `preset` (`full` or `toy`) that supplies the defaults for every key not
//! given; without one the `full` values apply.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use pit_core::data::SyntheticSpec;
use pit_core::model::PitConfig;

use crate::error::{io_err, Error, Result};

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits a key-value file into entries, rejecting malformed lines and
/// duplicate keys.
pub fn parse_entries(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("expected `key = value`, found `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(fail("empty key".into()));
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(fail(format!("`{key}` already set on line {}", prev.line)));
        }
        entries.push(Entry {
            line: i + 1,
            key: key.into(),
            value: value.into(),
        });
    }
    Ok(entries)
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_entries(&text, path)
}

fn value<T: FromStr>(e: &Entry, path: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err: T::Err| Error::Parse {
        path: path.into(),
        line: e.line,
        msg: format!("`{}`: invalid value `{}`: {err}", e.key, e.value),
    })
}

fn flag(e: &Entry, path: &Path) -> Result<bool> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        v => Err(Error::Parse {
            path: path.into(),
            line: e.line,
            msg: format!("`{}`: expected true or false, found `{v}`", e.key),
        }),
    }
}

pub fn preset(name: &str) -> Option<PitConfig> {
    match name {
        "full" => Some(PitConfig::full()),
        "toy" => Some(PitConfig::toy()),
        _ => None,
    }
}

/// Every model config key, in rendering order.
pub const MODEL_KEYS: [&str; 29] = [
    "image_height",
    "image_width",
    "channels",
    "kernel",
    "stride",
    "embed_dim",
    "lambda1",
    "lambda2",
    "num_cameras",
    "pixel_mean",
    "pixel_std",
    "depth",
    "num_heads",
    "mlp_dim",
    "ln_eps",
    "trailing_norm",
    "division",
    "head_depth",
    "keyframes",
    "batch_p",
    "batch_q",
    "lr",
    "momentum",
    "epochs",
    "freeze_epochs",
    "bn_momentum",
    "bn_eps",
    "seed",
    "distance",
];

/// Applies one entry to `cfg`. Returns `false` for unknown keys.
pub fn apply(cfg: &mut PitConfig, e: &Entry, path: &Path) -> Result<bool> {
    match e.key.as_str() {
        "image_height" => cfg.image_height = value(e, path)?,
        "image_width" => cfg.image_width = value(e, path)?,
        "channels" => cfg.channels = value(e, path)?,
        "kernel" => cfg.kernel = value(e, path)?,
        "stride" => cfg.stride = value(e, path)?,
        "embed_dim" => cfg.embed_dim = value(e, path)?,
        "lambda1" => cfg.lambda1 = value(e, path)?,
        "lambda2" => cfg.lambda2 = value(e, path)?,
        "num_cameras" => cfg.num_cameras = value(e, path)?,
        "pixel_mean" => cfg.pixel_mean = value(e, path)?,
        "pixel_std" => cfg.pixel_std = value(e, path)?,
        "depth" => cfg.depth = value(e, path)?,
        "num_heads" => cfg.num_heads = value(e, path)?,
        "mlp_dim" => cfg.mlp_dim = value(e, path)?,
        "ln_eps" => cfg.ln_eps = value(e, path)?,
        "trailing_norm" => cfg.trailing_norm = flag(e, path)?,
        "division" => cfg.division = value(e, path)?,
        "head_depth" => cfg.head_depth = value(e, path)?,
        "keyframes" => cfg.keyframes = value(e, path)?,
        "batch_p" => cfg.batch_p = value(e, path)?,
        "batch_q" => cfg.batch_q = value(e, path)?,
        "lr" => cfg.lr = value(e, path)?,
        "momentum" => cfg.momentum = value(e, path)?,
        "epochs" => cfg.epochs = value(e, path)?,
        "freeze_epochs" => cfg.freeze_epochs = value(e, path)?,
        "bn_momentum" => cfg.bn_momentum = value(e, path)?,
        "bn_eps" => cfg.bn_eps = value(e, path)?,
        "seed" => cfg.seed = value(e, path)?,
        "distance" => cfg.distance = value(e, path)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Builds a model config from entries, then checks it (including the
/// division against the token grid).
pub fn model_config(entries: &[Entry], path: &Path) -> Result<PitConfig> {
    let mut cfg = PitConfig::full();
    if let Some(e) = entries.iter().find(|e| e.key == "preset") {
        cfg = preset(&e.value).ok_or_else(|| Error::Parse {
            path: path.into(),
            line: e.line,
            msg: format!("unknown preset `{}` (expected full or toy)", e.value),
        })?;
    }
    for e in entries.iter().filter(|e| e.key != "preset") {
        if !apply(&mut cfg, e, path)? {
            return Err(Error::Parse {
                path: path.into(),
                line: e.line,
                msg: format!("unknown key `{}`", e.key),
            });
        }
    }
    cfg.validate().map_err(|err| Error::Format {
        path: path.into(),
        msg: err.to_string(),
    })?;
    Ok(cfg)
}

pub fn parse_model_config(text: &str, path: &Path) -> Result<PitConfig> {
    model_config(&parse_entries(text, path)?, path)
}

pub fn read_model_config(path: &Path) -> Result<PitConfig> {
    model_config(&read_entries(path)?, path)
}

/// All keys with their resolved values. Floats use the shortest
/// representation that parses back to the same value.
pub fn render_model_config(cfg: &PitConfig) -> String {
    let mut s = String::new();
    for key in MODEL_KEYS {
        let v = match key {
            "image_height" => cfg.image_height.to_string(),
            "image_width" => cfg.image_width.to_string(),
            "channels" => cfg.channels.to_string(),
            "kernel" => cfg.kernel.to_string(),
            "stride" => cfg.stride.to_string(),
            "embed_dim" => cfg.embed_dim.to_string(),
            "lambda1" => format!("{:?}", cfg.lambda1),
            "lambda2" => format!("{:?}", cfg.lambda2),
            "num_cameras" => cfg.num_cameras.to_string(),
            "pixel_mean" => format!("{:?}", cfg.pixel_mean),
            "pixel_std" => format!("{:?}", cfg.pixel_std),
            "depth" => cfg.depth.to_string(),
            "num_heads" => cfg.num_heads.to_string(),
            "mlp_dim" => cfg.mlp_dim.to_string(),
            "ln_eps" => format!("{:?}", cfg.ln_eps),
            "trailing_norm" => cfg.trailing_norm.to_string(),
            "division" => cfg.division.to_string(),
            "head_depth" => cfg.head_depth.to_string(),
            "keyframes" => cfg.keyframes.to_string(),
            "batch_p" => cfg.batch_p.to_string(),
            "batch_q" => cfg.batch_q.to_string(),
            "lr" => format!("{:?}", cfg.lr),
            "momentum" => format!("{:?}", cfg.momentum),
            "epochs" => cfg.epochs.to_string(),
            "freeze_epochs" => cfg.freeze_epochs.to_string(),
            "bn_momentum" => format!("{:?}", cfg.bn_momentum),
            "bn_eps" => format!("{:?}", cfg.bn_eps),
            "seed" => cfg.seed.to_string(),
            "distance" => cfg.distance.to_string(),
            _ => unreachable!(),
        };
        let _ = writeln!(s, "{key} = {v}");
    }
    s
}

pub const SYNTHETIC_KEYS: [&str; 10] = [
    "num_ids",
    "videos_per_id",
    "frames_per_video",
    "num_cameras",
    "channels",
    "height",
    "width",
    "noise",
    "test_ids",
    "seed",
];

/// Synthetic dataset defaults: 4 identities x 4 videos x 8 frames, two
/// cameras, 40x28 grayscale frames, noise 0.05, nothing held out.
pub fn default_synthetic() -> SyntheticSpec {
    SyntheticSpec {
        num_ids: 4,
        videos_per_id: 4,
        frames_per_video: 8,
        num_cameras: 2,
        channels: 1,
        height: 40,
        width: 28,
        noise: 0.05,
        test_ids: 0,
        seed: 0,
    }
}

pub fn apply_synthetic(spec: &mut SyntheticSpec, e: &Entry, path: &Path) -> Result<bool> {
    match e.key.as_str() {
        "num_ids" => spec.num_ids = value(e, path)?,
        "videos_per_id" => spec.videos_per_id = value(e, path)?,
        "frames_per_video" => spec.frames_per_video = value(e, path)?,
        "num_cameras" => spec.num_cameras = value(e, path)?,
        "channels" => spec.channels = value(e, path)?,
        "height" => spec.height = value(e, path)?,
        "width" => spec.width = value(e, path)?,
        "noise" => spec.noise = value(e, path)?,
        "test_ids" => spec.test_ids = value(e, path)?,
        "seed" => spec.seed = value(e, path)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn synthetic_spec(entries: &[Entry], path: &Path) -> Result<SyntheticSpec> {
    let mut spec = default_synthetic();
    for e in entries {
        if !apply_synthetic(&mut spec, e, path)? {
            return Err(Error::Parse {
                path: path.into(),
                line: e.line,
                msg: format!("unknown key `{}`", e.key),
            });
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn render_synthetic(spec: &SyntheticSpec) -> String {
    let mut s = String::new();
    for key in SYNTHETIC_KEYS {
        let v = match key {
            "num_ids" => spec.num_ids.to_string(),
            "videos_per_id" => spec.videos_per_id.to_string(),
            "frames_per_video" => spec.frames_per_video.to_string(),
            "num_cameras" => spec.num_cameras.to_string(),
            "channels" => spec.channels.to_string(),
            "height" => spec.height.to_string(),
            "width" => spec.width.to_string(),
            "noise" => format!("{:?}", spec.noise),
            "test_ids" => spec.test_ids.to_string(),
            "seed" => spec.seed.to_string(),
            _ => unreachable!(),
        };
        let _ = writeln!(s, "{key} = {v}");
    }
    s
}
