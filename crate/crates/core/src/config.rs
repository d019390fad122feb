//! Run configuration: a plain-text `key = value` file with `[data]`,
//! `[model]`, `[train]` and `[run]` sections, plus overrides.
//!
//! Keys may also appear without a section (before the first header) or be
//! given unqualified on the command line; an unqualified key resolves to
//! the one section that defines it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{gen_synthetic, load_csv, presets, SplitProfile, SyntheticSpec, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::model::MmkConfig;
use crate::train::TrainConfig;

pub const DATA_KEYS: &[&str] = &["dataset", "split"];
pub const RUN_KEYS: &[&str] = &["out_dir", "lr_search", "deterministic"];

/// Where a series comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Csv(PathBuf),
    /// `synth:<preset>`
    Preset(String),
    /// `synth-spec:<file>`
    SpecFile(PathBuf),
}

impl DatasetSource {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::config("empty dataset"));
        }
        if let Some(name) = s.strip_prefix("synth:") {
            if presets::get(name).is_none() {
                return Err(Error::config(format!(
                    "unknown synthetic preset `{name}` (expected one of {})",
                    presets::NAMES.join(", ")
                )));
            }
            return Ok(DatasetSource::Preset(name.to_string()));
        }
        if let Some(path) = s.strip_prefix("synth-spec:") {
            return Ok(DatasetSource::SpecFile(PathBuf::from(path)));
        }
        Ok(DatasetSource::Csv(PathBuf::from(s)))
    }

    pub fn load(&self) -> Result<TimeSeriesDataset> {
        match self {
            DatasetSource::Csv(p) => load_csv(p).map_err(|e| match e {
                Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", p.display()))),
                e => e,
            }),
            DatasetSource::Preset(name) => {
                let text = presets::get(name).ok_or_else(|| Error::config(format!("unknown preset `{name}`")))?;
                gen_synthetic(&SyntheticSpec::parse(text)?)
            }
            DatasetSource::SpecFile(p) => gen_synthetic(&SyntheticSpec::parse(&fs::read_to_string(p)?)?),
        }
    }

    /// Short name for reports.
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Csv(p) => p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
            DatasetSource::Preset(n) => format!("synth-{n}"),
            DatasetSource::SpecFile(p) => p
                .file_stem()
                .map_or_else(|| "synth".to_string(), |s| format!("synth-{}", s.to_string_lossy())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: MmkConfig,
    pub train: TrainConfig,
    pub dataset: Option<String>,
    pub split: SplitProfile,
    pub out_dir: PathBuf,
    /// Train every rate in the grid and keep the best by validation MSE.
    pub lr_search: bool,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: MmkConfig::default(),
            train: TrainConfig::default(),
            dataset: None,
            split: SplitProfile::EttHour,
            out_dir: PathBuf::from("runs"),
            lr_search: false,
            deterministic: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn section_of(key: &str) -> Option<&'static str> {
    if DATA_KEYS.contains(&key) {
        Some("data")
    } else if RUN_KEYS.contains(&key) {
        Some("run")
    } else if MmkConfig::KEYS.contains(&key) {
        Some("model")
    } else if TrainConfig::KEYS.contains(&key) {
        Some("train")
    } else {
        None
    }
}

impl RunConfig {
    /// Sets `section.key` or an unqualified key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, key) = match key.split_once('.') {
            Some((s, k)) => (s, k),
            None => (
                section_of(key).ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?,
                key,
            ),
        };
        self.set_in(section, key, value)
    }

    fn set_in(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match section {
            "model" => self.model.set(key, v),
            "train" => self.train.set(key, v),
            "data" => {
                match key {
                    "dataset" => {
                        DatasetSource::parse(v)?;
                        self.dataset = Some(v.to_string());
                    }
                    "split" => self.split = SplitProfile::parse(v)?,
                    _ => return Err(Error::config(format!("unknown data key `{key}`"))),
                }
                Ok(())
            }
            "run" => {
                match key {
                    "out_dir" => self.out_dir = PathBuf::from(v),
                    "lr_search" => self.lr_search = parse_bool(key, v)?,
                    "deterministic" => self.deterministic = parse_bool(key, v)?,
                    _ => return Err(Error::config(format!("unknown run key `{key}`"))),
                }
                Ok(())
            }
            _ => Err(Error::config(format!("unknown config section `{section}`"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", i + 1)),
                e => Error::config(format!("line {}: {e}", i + 1)),
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["data", "model", "train", "run"].contains(&name) {
                    return Err(at(Error::config(format!("unknown section `[{name}]`"))));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(Error::config(format!("expected key = value, got `{line}`"))))?;
            let k = k.trim();
            match &section {
                Some(s) => cfg.set_in(s, k, v),
                None => cfg.set(k, v),
            }
            .map_err(at)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(d) = &self.dataset {
            DatasetSource::parse(d)?;
        }
        Ok(())
    }

    pub fn source(&self) -> Result<DatasetSource> {
        DatasetSource::parse(
            self.dataset
                .as_deref()
                .ok_or_else(|| Error::config("no dataset given (use --dataset or `dataset` under [data])"))?,
        )
    }

    /// The effective configuration in the file format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[data]");
        if let Some(d) = &self.dataset {
            let _ = writeln!(out, "dataset = {d}");
        }
        let _ = writeln!(out, "split = {}", self.split.name());
        let _ = writeln!(out, "\n[model]");
        for (k, v) in self.model.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "\n[train]");
        for (k, v) in self.train.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "\n[run]");
        let _ = writeln!(out, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(out, "lr_search = {}", self.lr_search);
        let _ = writeln!(out, "deterministic = {}", self.deterministic);
        out
    }
}
