//! `key = value` training configs with `[section]` headers.
//!
//! ```text
//! [data]
//! manifest = train/manifest.tsv
//!
//! [model]
//! dims = 2
//! base_width = 8
//!
//! [train]
//! loss = bce
//! base_lr = 1e-3
//! iterations = 200
//! ```
//!
//! Sections and keys:
//!
//! - `[data]` `manifest` (path relative to the config file). Alternatively
//!   `[synth]` generates the dataset in memory: `dims`, `count`, `size`,
//!   `noise_var`, `seed`.
//! - `[model]` `dims`, `base_width`, `levels`, `sab`, `cab`, `position_budget`.
//! - `[train]` `preset` (planar, volumetric_mra, volumetric_synthetic; default
//!   from the model dims), `loss` (bce, combined), `base_lr`, `weight_decay`,
//!   `batch_size`, `iterations` or `epochs`, `schedule` (iteration, epoch),
//!   `window` (e.g. `64x64x64` or `none`), `validate_every`, `seed`.
//! - `[loss]` `alpha`, `epsilon`, `clamp`.
//! - `[augment]` `preset` (identity, planar, volumetric_mra,
//!   volumetric_synthetic), `crop` (`AxB[xC]` or `none`), `rotation_deg`,
//!   `flip_horizontal`, `flip_vertical`, `mirror`, `contrast`.
//!
//! Unknown sections or keys and repeated keys are errors naming the line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cs2net::data::{AugmentConfig, SynthConfig};
use cs2net::train::{LossKind, ScheduleUnit, TrainConfig, TrainLength};

const KEYS: [(&str, &[&str]); 6] = [
    ("data", &["manifest"]),
    ("synth", &["dims", "count", "size", "noise_var", "seed"]),
    ("model", &["dims", "base_width", "levels", "sab", "cab", "position_budget"]),
    (
        "train",
        &[
            "preset",
            "loss",
            "base_lr",
            "weight_decay",
            "batch_size",
            "iterations",
            "epochs",
            "schedule",
            "window",
            "validate_every",
            "seed",
        ],
    ),
    ("loss", &["alpha", "epsilon", "clamp"]),
    (
        "augment",
        &["preset", "crop", "rotation_deg", "flip_horizontal", "flip_vertical", "mirror", "contrast"],
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { line, message: message.into() })
}

#[derive(Debug, Clone)]
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

/// Parsed entries in file order.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: Vec<Entry>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut section: Option<String> = None;
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return err(line, format!("malformed section header `{content}`"));
                };
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return err(line, format!("unknown section `[{name}]`"));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return err(line, format!("expected `key = value`, got `{content}`"));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = &section else {
                return err(line, format!("key `{key}` appears before any section header"));
            };
            let known = KEYS.iter().find(|(s, _)| s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !known.contains(&key) {
                return err(line, format!("unknown key `{key}` in section [{sec}]"));
            }
            if value.is_empty() {
                return err(line, format!("key `{key}` has no value"));
            }
            if let Some(prev) = entries.iter().find(|e| e.section == *sec && e.key == key) {
                return err(line, format!("key `{key}` already set on line {}", prev.line));
            }
            entries.push(Entry { section: sec.clone(), key: key.to_string(), value: value.to_string(), line });
        }
        Ok(RawConfig { entries })
    }

    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.section == section && e.key == key)
    }

    fn has_section(&self, section: &str) -> bool {
        self.entries.iter().any(|e| e.section == section)
    }

    fn value<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(e) => match e.value.parse() {
                Ok(v) => Ok(Some(v)),
                Err(_) => err(e.line, format!("invalid value `{}` for `{key}`", e.value)),
            },
        }
    }

    fn set<T: FromStr>(&self, section: &str, key: &str, target: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.value(section, key)? {
            *target = v;
        }
        Ok(())
    }

    fn choice<T: Copy>(&self, section: &str, key: &str, options: &[(&str, T)]) -> Result<Option<T>, ConfigError> {
        let Some(e) = self.get(section, key) else { return Ok(None) };
        match options.iter().find(|(name, _)| *name == e.value) {
            Some((_, v)) => Ok(Some(*v)),
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                err(e.line, format!("`{key}` must be one of {}, got `{}`", names.join(", "), e.value))
            }
        }
    }

    fn extent(&self, section: &str, key: &str) -> Result<Option<Option<Vec<usize>>>, ConfigError> {
        let Some(e) = self.get(section, key) else { return Ok(None) };
        if e.value == "none" {
            return Ok(Some(None));
        }
        match parse_extent(&e.value) {
            Some(v) => Ok(Some(Some(v))),
            None => err(e.line, format!("`{key}` must look like 64x64 or 64x64x32, got `{}`", e.value)),
        }
    }

    fn line(&self, section: &str, key: &str) -> usize {
        self.get(section, key).map_or(0, |e| e.line)
    }
}

/// `64x64x32` → `[64, 64, 32]`.
pub fn parse_extent(s: &str) -> Option<Vec<usize>> {
    let v: Option<Vec<usize>> = s.split('x').map(|p| p.trim().parse().ok().filter(|&n| n > 0)).collect();
    v.filter(|v| (2..=3).contains(&v.len()))
}

/// Where training samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth { config: SynthConfig, count: usize },
}

#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub data: DataSource,
}

#[derive(Clone, Copy)]
enum Preset {
    Planar,
    VolumetricMra,
    VolumetricSynthetic,
    Identity,
}

const TRAIN_PRESETS: [(&str, Preset); 3] = [
    ("planar", Preset::Planar),
    ("volumetric_mra", Preset::VolumetricMra),
    ("volumetric_synthetic", Preset::VolumetricSynthetic),
];

impl TrainSetup {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: 0, message: format!("cannot read {}: {e}", path.display()) })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_raw(&RawConfig::parse(&text)?, base)
    }

    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self, ConfigError> {
        let synth_dims: Option<usize> = raw.value("synth", "dims")?;
        let model_dims: Option<usize> = raw.value("model", "dims")?;
        let preset = match raw.choice("train", "preset", &TRAIN_PRESETS)? {
            Some(p) => p,
            None => match model_dims.or(synth_dims).unwrap_or(2) {
                2 => Preset::Planar,
                3 => Preset::VolumetricSynthetic,
                d => return err(raw.line("model", "dims"), format!("dims must be 2 or 3, got {d}")),
            },
        };
        let mut cfg = match preset {
            Preset::Planar => TrainConfig::planar(),
            Preset::VolumetricMra => TrainConfig::volumetric_mra(),
            _ => TrainConfig::volumetric_synthetic(),
        };

        let m = &mut cfg.model;
        raw.set("model", "dims", &mut m.dims)?;
        raw.set("model", "base_width", &mut m.base_width)?;
        raw.set("model", "levels", &mut m.levels)?;
        raw.set("model", "sab", &mut m.sab)?;
        raw.set("model", "cab", &mut m.cab)?;
        raw.set("model", "position_budget", &mut m.position_budget)?;

        if let Some(kind) = raw.choice("train", "loss", &[("bce", LossKind::Bce), ("combined", LossKind::Combined)])? {
            cfg.loss_kind = kind;
        }
        raw.set("train", "base_lr", &mut cfg.base_lr)?;
        raw.set("train", "weight_decay", &mut cfg.weight_decay)?;
        raw.set("train", "batch_size", &mut cfg.batch_size)?;
        let iters: Option<u64> = raw.value("train", "iterations")?;
        let epochs: Option<u64> = raw.value("train", "epochs")?;
        cfg.length = match (iters, epochs) {
            (Some(_), Some(_)) => return err(raw.line("train", "epochs"), "set either `iterations` or `epochs`, not both"),
            (Some(n), None) => TrainLength::Iterations(n),
            (None, Some(n)) => TrainLength::Epochs(n),
            (None, None) => cfg.length,
        };
        let units = [("iteration", ScheduleUnit::Iteration), ("epoch", ScheduleUnit::Epoch)];
        if let Some(u) = raw.choice("train", "schedule", &units)? {
            cfg.schedule_unit = u;
        }
        if let Some(w) = raw.extent("train", "window")? {
            cfg.window = w;
        }
        raw.set("train", "validate_every", &mut cfg.validate_every)?;
        raw.set("train", "seed", &mut cfg.seed)?;

        raw.set("loss", "alpha", &mut cfg.loss.alpha)?;
        raw.set("loss", "epsilon", &mut cfg.loss.epsilon)?;
        raw.set("loss", "clamp", &mut cfg.loss.clamp)?;

        let aug_presets = [
            ("identity", Preset::Identity),
            ("planar", Preset::Planar),
            ("volumetric_mra", Preset::VolumetricMra),
            ("volumetric_synthetic", Preset::VolumetricSynthetic),
        ];
        if let Some(p) = raw.choice("augment", "preset", &aug_presets)? {
            cfg.augment = match p {
                Preset::Identity => AugmentConfig::identity(),
                Preset::Planar => AugmentConfig::planar(),
                Preset::VolumetricMra => AugmentConfig::volumetric_mra(),
                Preset::VolumetricSynthetic => AugmentConfig::volumetric_synthetic(),
            };
        }
        let a = &mut cfg.augment;
        if let Some(c) = raw.extent("augment", "crop")? {
            a.crop = c;
        }
        raw.set("augment", "rotation_deg", &mut a.rotation_deg)?;
        raw.set("augment", "flip_horizontal", &mut a.flip_horizontal)?;
        raw.set("augment", "flip_vertical", &mut a.flip_vertical)?;
        raw.set("augment", "mirror", &mut a.mirror)?;
        raw.set("augment", "contrast", &mut a.contrast)?;

        cfg.validate().map_err(|e| ConfigError { line: 0, message: e.to_string() })?;

        let data = match (raw.get("data", "manifest"), raw.has_section("synth")) {
            (Some(_), true) => return err(raw.line("data", "manifest"), "use either [data] manifest or [synth], not both"),
            (Some(e), false) => DataSource::Manifest(base.join(&e.value)),
            (None, true) => {
                let dims = synth_dims.unwrap_or(cfg.model.dims);
                let size: usize = raw.value("synth", "size")?.unwrap_or(64);
                let mut sc = match dims {
                    2 => SynthConfig::planar(size),
                    3 => SynthConfig::volumetric(size),
                    d => return err(raw.line("synth", "dims"), format!("dims must be 2 or 3, got {d}")),
                };
                raw.set("synth", "noise_var", &mut sc.noise_variance)?;
                raw.set("synth", "seed", &mut sc.seed)?;
                sc.validate().map_err(|e| ConfigError { line: 0, message: e.to_string() })?;
                let count = raw.value("synth", "count")?.unwrap_or(4);
                if count == 0 {
                    return err(raw.line("synth", "count"), "count must be positive");
                }
                DataSource::Synth { config: sc, count }
            }
            (None, false) => return err(0, "config needs a [data] manifest or a [synth] section"),
        };
        Ok(TrainSetup { train: cfg, data })
    }
}
