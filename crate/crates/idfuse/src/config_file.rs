//! `key=value` experiment files.
//!
//! Blank lines are ignored and `#` starts a comment when it begins a line or
//! follows whitespace. Unspecified keys keep their defaults. Overrides given
//! as `key=value` strings are applied after the file, and validation runs
//! last, so an override can repair a bad file value.

use std::fmt::Write as _;
use std::path::Path;

use idfuse_core::config::{profile_by_name, AblationFlags, DatasetSource, ExperimentConfig, Modality};

use crate::error::{Error, Result};

/// Every key `serialize_config` writes, in output order.
pub const KEYS: &[&str] = &[
    "scale",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "learning_rate",
    "batch_size",
    "refinement_steps",
    "use_ifblock",
    "use_input_latent",
    "load_pretrained_id",
    "seed",
    "modality",
    "mask_classes",
    "per_contour",
    "train_steps",
    "checkpoint_every",
    "log_every",
    "normalized_losses",
    "final_only_loss",
    "average_code_samples",
    "dataset",
    "max_train_pairs",
    "generator_pretrain_steps",
    "embedder_pretrain_steps",
    "identity_pretrain_steps",
];

fn strip_comment(line: &str) -> &str {
    let mut prev_space = true;
    for (i, c) in line.char_indices() {
        if c == '#' && prev_space {
            return &line[..i];
        }
        prev_space = c.is_whitespace();
    }
    line
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_dataset(v: &str) -> std::result::Result<DatasetSource, String> {
    match v.strip_prefix("procedural:") {
        Some(dims) => {
            let (a, b) = dims
                .split_once('x')
                .ok_or_else(|| format!("expected procedural:<identities>x<per_identity>, got `{v}`"))?;
            Ok(DatasetSource::Procedural {
                identities: parse_num(a)?,
                per_identity: parse_num(b)?,
            })
        }
        None if v.is_empty() => Err("dataset path is empty".into()),
        None => Ok(DatasetSource::Path(v.to_string())),
    }
}

fn format_dataset(d: &DatasetSource) -> String {
    match d {
        DatasetSource::Procedural {
            identities,
            per_identity,
        } => format!("procedural:{identities}x{per_identity}"),
        DatasetSource::Path(p) => p.clone(),
    }
}

/// Set one key. The error string explains the value problem; callers add
/// the location.
pub fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let flags = &mut cfg.ablation;
    match key {
        "scale" => {
            cfg.scale = profile_by_name(value).ok_or_else(|| format!("unknown profile `{value}` (toy, full)"))?
        }
        "lambda1" => cfg.lambdas[0] = parse_num(value)?,
        "lambda2" => cfg.lambdas[1] = parse_num(value)?,
        "lambda3" => cfg.lambdas[2] = parse_num(value)?,
        "lambda4" => cfg.lambdas[3] = parse_num(value)?,
        "learning_rate" | "lr" => cfg.learning_rate = parse_num(value)?,
        "batch_size" => cfg.batch_size = parse_num(value)?,
        "refinement_steps" => cfg.refinement_steps = parse_num(value)?,
        "use_ifblock" => flags.use_ifblock = parse_bool(value)?,
        "use_input_latent" => flags.use_input_latent = parse_bool(value)?,
        "load_pretrained_id" => flags.load_pretrained_id = parse_bool(value)?,
        "ablation" => *flags = parse_flags(value)?,
        "seed" => cfg.seed = parse_num(value)?,
        "modality" => cfg.modality = value.parse::<Modality>().map_err(|e| e.to_string())?,
        "mask_classes" => cfg.mask_classes = parse_num(value)?,
        "per_contour" => cfg.per_contour = parse_num(value)?,
        "train_steps" => cfg.train_steps = parse_num(value)?,
        "checkpoint_every" => cfg.checkpoint_every = parse_num(value)?,
        "log_every" => cfg.log_every = parse_num(value)?,
        "normalized_losses" => cfg.normalized_losses = parse_bool(value)?,
        "final_only_loss" => cfg.final_only_loss = parse_bool(value)?,
        "average_code_samples" => cfg.average_code_samples = parse_num(value)?,
        "dataset" => cfg.dataset = parse_dataset(value)?,
        "max_train_pairs" => cfg.max_train_pairs = parse_num(value)?,
        "generator_pretrain_steps" => cfg.generator_pretrain_steps = parse_num(value)?,
        "embedder_pretrain_steps" => cfg.embedder_pretrain_steps = parse_num(value)?,
        "identity_pretrain_steps" => cfg.identity_pretrain_steps = parse_num(value)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

/// Ablation flags by row name (`baseline`, `ifblock`, `input_latent`,
/// `full`) or as three `T`/`F` letters in the order use_ifblock,
/// use_input_latent, load_pretrained_id.
pub fn parse_flags(v: &str) -> std::result::Result<AblationFlags, String> {
    match v.to_ascii_lowercase().as_str() {
        "baseline" => return Ok(AblationFlags::BASELINE),
        "ifblock" | "+ifblock" => return Ok(AblationFlags::IFBLOCK),
        "input_latent" | "+input_latent" => return Ok(AblationFlags::INPUT_LATENT),
        "full" | "ours" => return Ok(AblationFlags::FULL),
        _ => {}
    }
    let bits: Vec<bool> = v
        .chars()
        .map(|c| match c {
            'T' | 't' => Ok(true),
            'F' | 'f' => Ok(false),
            _ => Err(format!("unknown ablation cell `{v}`")),
        })
        .collect::<std::result::Result<_, _>>()?;
    match bits[..] {
        [a, b, c] => Ok(AblationFlags::new(a, b, c)),
        _ => Err(format!("unknown ablation cell `{v}`")),
    }
}

/// Comma-separated ablation cells, kept in the given order.
pub fn parse_grid(spec: &str) -> Result<Vec<AblationFlags>> {
    let cells: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if cells.is_empty() {
        return Err(Error::Config {
            origin: "--grid".into(),
            message: "no ablation cells".into(),
        });
    }
    cells
        .into_iter()
        .map(|c| {
            parse_flags(c).map_err(|message| Error::Config {
                origin: "--grid".into(),
                message,
            })
        })
        .collect()
}

fn apply_line(cfg: &mut ExperimentConfig, line: &str, origin: impl Fn(Option<&str>) -> String) -> Result<()> {
    let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
        origin: origin(None),
        message: format!("expected key=value, got `{}`", line.trim()),
    })?;
    let key = key.trim();
    set_key(cfg, key, value.trim()).map_err(|message| Error::Config {
        origin: origin(Some(key)),
        message,
    })
}

fn located(line: usize) -> impl Fn(Option<&str>) -> String {
    move |key| match key {
        Some(k) => format!("line {line}, key `{k}`"),
        None => format!("line {line}"),
    }
}

/// Apply file text on top of `cfg` without validating.
pub fn apply_text(cfg: &mut ExperimentConfig, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if !line.is_empty() {
            apply_line(cfg, line, located(i + 1))?;
        }
    }
    Ok(())
}

/// Apply `key=value` overrides without validating.
pub fn apply_overrides(cfg: &mut ExperimentConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        apply_line(cfg, o, |key| match key {
            Some(k) => format!("--set {k}"),
            None => "--set".into(),
        })?;
    }
    Ok(())
}

/// Parse and validate file text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    apply_text(&mut cfg, text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read `path` (if any), apply `overrides`, validate.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        apply_text(&mut cfg, &text).map_err(|e| match e {
            Error::Config { origin, message } => Error::Config {
                origin: format!("{}: {origin}", path.display()),
                message,
            },
            other => other,
        })?;
    }
    apply_overrides(&mut cfg, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Every key with its current value; `parse_config` reads it back equal.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let f = cfg.ablation;
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    put("scale", cfg.scale.name.clone());
    for (i, l) in cfg.lambdas.iter().enumerate() {
        put(&format!("lambda{}", i + 1), l.to_string());
    }
    put("learning_rate", cfg.learning_rate.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("refinement_steps", cfg.refinement_steps.to_string());
    put("use_ifblock", f.use_ifblock.to_string());
    put("use_input_latent", f.use_input_latent.to_string());
    put("load_pretrained_id", f.load_pretrained_id.to_string());
    put("seed", cfg.seed.to_string());
    put("modality", cfg.modality.to_string());
    put("mask_classes", cfg.mask_classes.to_string());
    put("per_contour", cfg.per_contour.to_string());
    put("train_steps", cfg.train_steps.to_string());
    put("checkpoint_every", cfg.checkpoint_every.to_string());
    put("log_every", cfg.log_every.to_string());
    put("normalized_losses", cfg.normalized_losses.to_string());
    put("final_only_loss", cfg.final_only_loss.to_string());
    put("average_code_samples", cfg.average_code_samples.to_string());
    put("dataset", format_dataset(&cfg.dataset));
    put("max_train_pairs", cfg.max_train_pairs.to_string());
    put("generator_pretrain_steps", cfg.generator_pretrain_steps.to_string());
    put("embedder_pretrain_steps", cfg.embedder_pretrain_steps.to_string());
    put("identity_pretrain_steps", cfg.identity_pretrain_steps.to_string());
    out
}
