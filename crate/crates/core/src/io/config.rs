//! `key = value` model config files.
//!
//! One assignment per line. `#` starts a comment. Keys are the
//! [`ModelConfig`] field names; missing keys keep their defaults. Lists are
//! comma-separated.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::blocks::GateOrder;
use crate::detector::{ConvBlockKind, DownBlockKind, ModelConfig};
use crate::error::{Error, Result};

/// `line` is 1-based; 0 means the error is not tied to one line.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct ConfigParseError {
    pub line: usize,
    pub kind: ConfigErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigErrorKind {
    #[error("expected `key = value`, found {0:?}")]
    Syntax(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} set twice")]
    DuplicateKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

pub const KEYS: &[&str] = &[
    "num_classes",
    "input_size",
    "width_mult",
    "depth_mult",
    "base_channels",
    "blocks_per_stage",
    "sppf_identity_branch",
    "conv_block",
    "down_block",
    "gate_order",
    "seed",
];

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn positive_real(v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>().map_err(|e| e.to_string())
}

fn apply(cfg: &mut ModelConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let int = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
    match key {
        "num_classes" => cfg.num_classes = int(v)?,
        "input_size" => cfg.input_size = int(v)?,
        "width_mult" => cfg.width_mult = positive_real(v)?,
        "depth_mult" => cfg.depth_mult = positive_real(v)?,
        "base_channels" => cfg.base_channels = list(v)?,
        "blocks_per_stage" => cfg.blocks_per_stage = list(v)?,
        "sppf_identity_branch" => {
            cfg.sppf_identity_branch = v.parse::<bool>().map_err(|_| "expected true or false".to_string())?
        }
        "conv_block" => {
            cfg.conv_block = match v {
                "eaconv" => ConvBlockKind::EaConv,
                "dense" => ConvBlockKind::Dense,
                _ => return Err("expected eaconv or dense".into()),
            }
        }
        "down_block" => {
            cfg.down_block = match v {
                "eadown" => DownBlockKind::EaDown,
                "strided" => DownBlockKind::Strided,
                _ => return Err("expected eadown or strided".into()),
            }
        }
        "gate_order" => {
            cfg.gate_order = match v {
                "channel_first" => GateOrder::ChannelFirst,
                "spatial_first" => GateOrder::SpatialFirst,
                _ => return Err("expected channel_first or spatial_first".into()),
            }
        }
        "seed" => cfg.seed = v.parse::<u64>().map_err(|e| e.to_string())?,
        _ => unreachable!("key checked against KEYS"),
    }
    Ok(())
}

pub fn parse_config(text: &str) -> std::result::Result<ModelConfig, ConfigParseError> {
    let mut cfg = ModelConfig::default();
    let mut set_at: HashMap<&str, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |kind| ConfigParseError { line, kind };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(ConfigErrorKind::Syntax(content.to_string())))?;
        let (key, value) = (key.trim(), value.trim());
        let Some(&key) = KEYS.iter().find(|k| **k == key) else {
            return Err(err(ConfigErrorKind::UnknownKey(key.to_string())));
        };
        if set_at.insert(key, line).is_some() {
            return Err(err(ConfigErrorKind::DuplicateKey(key.to_string())));
        }
        apply(&mut cfg, key, value).map_err(|reason| {
            err(ConfigErrorKind::BadValue {
                key: key.to_string(),
                reason,
            })
        })?;
    }
    cfg.validate().map_err(|inv| ConfigParseError {
        line: inv
            .fields
            .iter()
            .filter_map(|f| set_at.get(f).copied())
            .max()
            .unwrap_or(0),
        kind: ConfigErrorKind::Invalid(inv.message),
    })?;
    Ok(cfg)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Canonical text form listing every key. `parse_config(&print_config(c)) == c`.
pub fn print_config(cfg: &ModelConfig) -> String {
    let conv = match cfg.conv_block {
        ConvBlockKind::EaConv => "eaconv",
        ConvBlockKind::Dense => "dense",
    };
    let down = match cfg.down_block {
        DownBlockKind::EaDown => "eadown",
        DownBlockKind::Strided => "strided",
    };
    let order = match cfg.gate_order {
        GateOrder::ChannelFirst => "channel_first",
        GateOrder::SpatialFirst => "spatial_first",
    };
    format!(
        "num_classes = {}\ninput_size = {}\nwidth_mult = {:?}\ndepth_mult = {:?}\nbase_channels = {}\n\
         blocks_per_stage = {}\nsppf_identity_branch = {}\nconv_block = {conv}\ndown_block = {down}\n\
         gate_order = {order}\nseed = {}\n",
        cfg.num_classes,
        cfg.input_size,
        cfg.width_mult,
        cfg.depth_mult,
        join(&cfg.base_channels),
        join(&cfg.blocks_per_stage),
        cfg.sppf_identity_branch,
        cfg.seed,
    )
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
