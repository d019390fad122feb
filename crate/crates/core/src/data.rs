//! Time-series datasets: CSV ingestion, chronological splits,
//! standardisation, sliding windows and synthetic generators.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Hours in the ETT month convention (30 days).
pub const ETT_MONTH_HOURS: usize = 30 * 24;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    /// `[N, C]`
    pub values: Tensor,
    pub timestamps: Vec<String>,
    pub names: Vec<String>,
    /// Generator family of each variable for synthetic data; empty for
    /// loaded files.
    pub families: Vec<String>,
    pub scaler: Option<Scaler>,
}

/// Per-variable train statistics used to standardise a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Index range `[start, end)` a split draws windows from. Targets never
/// precede `target_start`; the `lookback` steps before it are input only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRange {
    pub start: usize,
    pub target_start: usize,
    pub end: usize,
}

impl SplitRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: SplitRange,
    pub val: SplitRange,
    pub test: SplitRange,
}

impl Splits {
    pub fn get(&self, s: Split) -> SplitRange {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitProfile {
    /// 12/4/4 months of hourly data.
    EttHour,
    /// 12/4/4 months of 15-minute data.
    EttMinute,
    /// Train and test take `floor` of their fractions, validation the rest.
    Ratio { train: f64, test: f64 },
}

impl SplitProfile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ett_hour" => Ok(SplitProfile::EttHour),
            "ett_minute" => Ok(SplitProfile::EttMinute),
            "ratio" => Ok(SplitProfile::Ratio { train: 0.7, test: 0.2 }),
            _ => Err(Error::config(format!(
                "unknown split profile `{s}` (expected ett_hour, ett_minute or ratio)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitProfile::EttHour => "ett_hour",
            SplitProfile::EttMinute => "ett_minute",
            SplitProfile::Ratio { .. } => "ratio",
        }
    }
}

/// Split borders for a series of `n_total` steps. Validation and test
/// ranges start `lookback` steps before their first target so that the
/// first target directly follows the previous split.
pub fn chrono_split(n_total: usize, profile: SplitProfile, lookback: usize) -> Result<Splits> {
    let (train_end, val_end, test_end) = match profile {
        SplitProfile::EttHour | SplitProfile::EttMinute => {
            let m = if profile == SplitProfile::EttHour {
                ETT_MONTH_HOURS
            } else {
                4 * ETT_MONTH_HOURS
            };
            (12 * m, 16 * m, 20 * m)
        }
        SplitProfile::Ratio { train, test } => {
            if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
                return Err(Error::config(format!("invalid split ratios train={train} test={test}")));
            }
            let n_train = (n_total as f64 * train) as usize;
            let n_test = (n_total as f64 * test) as usize;
            let n_val = n_total - n_train - n_test;
            (n_train, n_train + n_val, n_total)
        }
    };
    if test_end > n_total {
        return Err(Error::domain(format!(
            "{} split needs {test_end} steps, the series has {n_total}",
            profile.name()
        )));
    }
    if lookback >= train_end || train_end >= val_end || val_end >= test_end {
        return Err(Error::domain(format!(
            "series of {n_total} steps is too short for lookback {lookback} under {}",
            profile.name()
        )));
    }
    Ok(Splits {
        train: SplitRange {
            start: 0,
            target_start: lookback,
            end: train_end,
        },
        val: SplitRange {
            start: train_end - lookback,
            target_start: train_end,
            end: val_end,
        },
        test: SplitRange {
            start: val_end - lookback,
            target_start: val_end,
            end: test_end,
        },
    })
}

/// One lookback/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[T, C]`
    pub x: Tensor,
    /// `[P, C]`
    pub y: Tensor,
    pub origin: usize,
}

/// Window origins of `range`: every `o` with `[o, o + T + P)` inside it,
/// ascending.
pub fn window_origins(range: SplitRange, lookback: usize, horizon: usize) -> Result<Vec<usize>> {
    let need = lookback + horizon;
    if range.len() < need {
        return Err(Error::domain(format!(
            "split range [{}, {}) holds {} steps, a window needs {need}",
            range.start,
            range.end,
            range.len()
        )));
    }
    Ok((range.start..=range.end - need).collect())
}

impl TimeSeriesDataset {
    pub fn new(values: Tensor, names: Vec<String>) -> Result<Self> {
        let (n, c) = values.dims2()?;
        if names.len() != c {
            return Err(Error::dim(format!("{} names for {c} variables", names.len())));
        }
        Ok(Self {
            timestamps: (0..n).map(|i| i.to_string()).collect(),
            values,
            names,
            families: Vec::new(),
            scaler: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.dim(1)
    }

    /// Standardises every variable with the population mean and standard
    /// deviation of `train` and returns the statistics used.
    pub fn standardize(&mut self, train: SplitRange) -> Result<Scaler> {
        let c = self.n_vars();
        if train.end > self.len() || train.is_empty() {
            return Err(Error::domain("train range lies outside the series"));
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for v in 0..c {
            let m = (train.start..train.end).map(|t| self.values.get2(t, v)).sum::<f64>() / n;
            let var = (train.start..train.end)
                .map(|t| (self.values.get2(t, v) - m).powi(2))
                .sum::<f64>()
                / n;
            if !(var > 0.0) {
                return Err(Error::domain(format!(
                    "variable `{}` is constant over the train range and cannot be standardised",
                    self.names[v]
                )));
            }
            mean[v] = m;
            std[v] = var.sqrt();
        }
        for t in 0..self.len() {
            for (v, x) in self.values.row_mut(t).iter_mut().enumerate() {
                *x = (*x - mean[v]) / std[v];
            }
        }
        let scaler = Scaler { mean, std };
        self.scaler = Some(scaler.clone());
        Ok(scaler)
    }

    pub fn window(&self, origin: usize, lookback: usize, horizon: usize) -> Result<WindowSample> {
        if origin + lookback + horizon > self.len() {
            return Err(Error::domain(format!(
                "window at {origin} runs past the end of the series"
            )));
        }
        let c = self.n_vars();
        let slice = |a: usize, len: usize| Tensor::new(&[len, c], self.values.data()[a * c..(a + len) * c].to_vec());
        Ok(WindowSample {
            x: slice(origin, lookback)?,
            y: slice(origin + lookback, horizon)?,
            origin,
        })
    }

    /// Stacks the windows at `origins` into `([B, T, C], [B, P, C])`.
    pub fn batch(&self, origins: &[usize], lookback: usize, horizon: usize) -> Result<(Tensor, Tensor)> {
        let c = self.n_vars();
        let b = origins.len();
        let mut x = Vec::with_capacity(b * lookback * c);
        let mut y = Vec::with_capacity(b * horizon * c);
        let d = self.values.data();
        for &o in origins {
            if o + lookback + horizon > self.len() {
                return Err(Error::domain(format!("window at {o} runs past the end of the series")));
            }
            x.extend_from_slice(&d[o * c..(o + lookback) * c]);
            y.extend_from_slice(&d[(o + lookback) * c..(o + lookback + horizon) * c]);
        }
        Ok((Tensor::new(&[b, lookback, c], x)?, Tensor::new(&[b, horizon, c], y)?))
    }

    /// Writes the dataset as a `date,<names...>` CSV file.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(csv_io)?;
        for t in 0..self.len() {
            let mut rec = vec![self.timestamps[t].clone()];
            rec.extend(self.values.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

/// Reads a `date,<var>...` CSV file. Every cell after the first column must
/// parse as a float; missing cells and ragged rows are errors.
pub fn load_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let file = std::fs::File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: format!("unreadable header: {e}"),
        })?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Parse {
            line: 1,
            msg: "file is empty".into(),
        });
    }
    if header[0].trim() != "date" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("first column must be `date`, found `{}`", &header[0]),
        });
    }
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "no value columns".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let c = names.len();
    let mut values = Vec::new();
    let mut timestamps = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            let msg = match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    format!("row has {len} fields, expected {expected_len}")
                }
                _ => e.to_string(),
            };
            Error::Parse { line, msg }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        timestamps.push(rec[0].to_string());
        for (i, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: format!("missing value in column `{}`", names[i]),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{cell}` in column `{}` is not a number", names[i]),
            })?;
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "file has a header but no rows".into(),
        });
    }
    let n = timestamps.len();
    Ok(TimeSeriesDataset {
        values: Tensor::new(&[n, c], values)?,
        timestamps,
        names,
        families: Vec::new(),
        scaler: None,
    })
}

/// One additive component of a synthetic variable.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Sine { period: f64, amp: f64, phase: f64 },
    Trend { slope: f64, intercept: f64 },
    Sawtooth { period: f64, amp: f64 },
    Ar1 { rho: f64, sigma: f64 },
}

impl Generator {
    pub fn family(&self) -> &'static str {
        match self {
            Generator::Sine { .. } => "sine",
            Generator::Trend { .. } => "trend",
            Generator::Sawtooth { .. } => "sawtooth",
            Generator::Ar1 { .. } => "ar1",
        }
    }

    /// Parses `name(key=value, ...)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config(format!("unbalanced parentheses in `{s}`")))?;
                (n.trim(), inner)
            }
            None => (s, ""),
        };
        let mut kv = BTreeMap::new();
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("generator argument `{part}` is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("generator argument `{part}` is not numeric")))?;
            kv.insert(k.trim().to_string(), v);
        }
        let mut take = |k: &str, default: Option<f64>| -> Result<f64> {
            kv.remove(k)
                .or(default)
                .ok_or_else(|| Error::config(format!("`{name}` needs `{k}`")))
        };
        let g = match name {
            "sine" => Generator::Sine {
                period: take("period", None)?,
                amp: take("amp", Some(1.0))?,
                phase: take("phase", Some(0.0))?,
            },
            "trend" => Generator::Trend {
                slope: take("slope", None)?,
                intercept: take("intercept", Some(0.0))?,
            },
            "sawtooth" => Generator::Sawtooth {
                period: take("period", None)?,
                amp: take("amp", Some(1.0))?,
            },
            "ar1" => Generator::Ar1 {
                rho: take("rho", None)?,
                sigma: take("sigma", Some(1.0))?,
            },
            _ => return Err(Error::config(format!("unknown generator `{name}`"))),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::config(format!("`{name}` has no argument `{k}`")));
        }
        match g {
            Generator::Sine { period, .. } | Generator::Sawtooth { period, .. } if !(period > 0.0) => {
                Err(Error::config(format!("`{name}` period must be positive")))
            }
            Generator::Ar1 { rho, sigma } if !(rho.abs() < 1.0) || sigma < 0.0 => {
                Err(Error::config("ar1 needs |rho| < 1 and sigma >= 0"))
            }
            g => Ok(g),
        }
    }

    fn fill(&self, out: &mut [f64], rng: &mut SeededRng) {
        match *self {
            Generator::Sine { period, amp, phase } => {
                for (t, o) in out.iter_mut().enumerate() {
                    *o += amp * (2.0 * PI * t as f64 / period + phase).sin();
                }
            }
            Generator::Trend { slope, intercept } => {
                for (t, o) in out.iter_mut().enumerate() {
                    *o += intercept + slope * t as f64;
                }
            }
            Generator::Sawtooth { period, amp } => {
                for (t, o) in out.iter_mut().enumerate() {
                    let frac = (t as f64 / period).fract();
                    *o += amp * (2.0 * frac - 1.0);
                }
            }
            Generator::Ar1 { rho, sigma } => {
                let mut x = sigma / (1.0 - rho * rho).sqrt() * rng.standard_normal();
                for o in out.iter_mut() {
                    *o += x;
                    x = rho * x + sigma * rng.standard_normal();
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVar {
    pub name: String,
    pub components: Vec<Generator>,
    pub noise: f64,
}

/// Text spec of a synthetic dataset: `key=value` lines with `length`,
/// optional `seed` and `noise` defaults, and one `var.<name>=<gen>+<gen>`
/// line per variable in file order. `noise.<name>` overrides the noise of
/// one variable. `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub length: usize,
    pub seed: u64,
    pub vars: Vec<SyntheticVar>,
}

impl SyntheticSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut length = None;
        let mut seed = 0;
        let mut noise = 0.0;
        let mut vars: Vec<(String, Vec<Generator>)> = Vec::new();
        let mut noise_override = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("synthetic spec line {} is not key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::config(format!("synthetic spec line {}: `{v}` is not a number", i + 1)))
            };
            if let Some(name) = k.strip_prefix("var.") {
                let comps = split_components(v)
                    .into_iter()
                    .map(Generator::parse)
                    .collect::<Result<Vec<_>>>()?;
                if comps.is_empty() {
                    return Err(Error::config(format!("variable `{name}` has no generator")));
                }
                vars.push((name.to_string(), comps));
            } else if let Some(name) = k.strip_prefix("noise.") {
                noise_override.insert(name.to_string(), num(v)?);
            } else {
                match k {
                    "length" => length = Some(num(v)? as usize),
                    "seed" => seed = num(v)? as u64,
                    "noise" => noise = num(v)?,
                    _ => return Err(Error::config(format!("unknown synthetic spec key `{k}`"))),
                }
            }
        }
        let length = length.ok_or_else(|| Error::config("synthetic spec needs `length`"))?;
        if vars.is_empty() {
            return Err(Error::config("synthetic spec declares no variables"));
        }
        for name in noise_override.keys() {
            if !vars.iter().any(|(n, _)| n == name) {
                return Err(Error::config(format!("noise override for unknown variable `{name}`")));
            }
        }
        let vars = vars
            .into_iter()
            .map(|(name, components)| SyntheticVar {
                noise: noise_override.get(&name).copied().unwrap_or(noise),
                name,
                components,
            })
            .collect();
        Ok(Self { length, seed, vars })
    }
}

/// Splits on `+` outside parentheses.
fn split_components(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            '+' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(s[start..].trim());
    out.into_iter().filter(|p| !p.is_empty()).collect()
}

/// Generates a dataset from `spec`; identical seeds give identical data.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<TimeSeriesDataset> {
    let n = spec.length;
    let c = spec.vars.len();
    let mut rng = SeededRng::new(spec.seed);
    let mut values = Tensor::zeros(&[n, c]);
    for (v, var) in spec.vars.iter().enumerate() {
        let mut vrng = rng.fork(v as u64);
        let mut col = vec![0.0; n];
        for g in &var.components {
            g.fill(&mut col, &mut vrng);
        }
        if var.noise > 0.0 {
            for x in col.iter_mut() {
                *x += var.noise * vrng.standard_normal();
            }
        }
        for (t, x) in col.into_iter().enumerate() {
            values.set2(t, v, x);
        }
    }
    let mut ds = TimeSeriesDataset::new(values, spec.vars.iter().map(|v| v.name.clone()).collect())?;
    ds.families = spec
        .vars
        .iter()
        .map(|v| {
            let fams: Vec<&str> = v.components.iter().map(Generator::family).collect();
            fams.join("+")
        })
        .collect();
    Ok(ds)
}

/// A standardised dataset with its split borders and window origins.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ds: TimeSeriesDataset,
    pub splits: Splits,
    pub lookback: usize,
    pub horizon: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Prepared {
    /// Splits `ds`, standardises it with train statistics and enumerates
    /// the windows of every split.
    pub fn new(mut ds: TimeSeriesDataset, profile: SplitProfile, lookback: usize, horizon: usize) -> Result<Self> {
        let splits = chrono_split(ds.len(), profile, lookback)?;
        ds.standardize(SplitRange {
            start: splits.train.start,
            target_start: splits.train.start,
            end: splits.train.end,
        })?;
        Ok(Self {
            train: window_origins(splits.train, lookback, horizon)?,
            val: window_origins(splits.val, lookback, horizon)?,
            test: window_origins(splits.test, lookback, horizon)?,
            ds,
            splits,
            lookback,
            horizon,
        })
    }

    pub fn origins(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Built-in synthetic specs.
pub mod presets {
    /// Three sine variables and three trend-plus-sawtooth variables.
    pub const ROUTING: &str = "\
length=3000
noise=0.05
var.sine_a=sine(period=24)
var.sine_b=sine(period=36,phase=1)
var.sine_c=sine(period=48,phase=2)
var.ramp_a=trend(slope=0.002)+sawtooth(period=60)
var.ramp_b=trend(slope=-0.003)+sawtooth(period=90)
var.ramp_c=trend(slope=0.001)+sawtooth(period=120)
";

    /// One variable with a flat-topped 144-step daily cycle (odd harmonics
    /// up to the ninth) under white noise.
    pub const DAILY: &str = "\
length=20000
noise=0.3
var.daily=sine(period=144)+sine(period=48,amp=0.333)+sine(period=28.8,amp=0.2)+sine(period=20.571428571428573,amp=0.143)+sine(period=16,amp=0.111)
";

    /// Seven mixed-regime variables shaped like an hourly ETT file.
    pub const ETT_LIKE: &str = "\
length=14400
noise=0.1
var.HUFL=sine(period=24,amp=2)+ar1(rho=0.95,sigma=0.3)
var.HULL=sine(period=24,amp=1,phase=1)+ar1(rho=0.9,sigma=0.2)
var.MUFL=sine(period=24,amp=1.5,phase=2)+sine(period=168,amp=0.5)+ar1(rho=0.95,sigma=0.3)
var.MULL=sine(period=12,amp=0.7)+ar1(rho=0.9,sigma=0.2)
var.LUFL=trend(slope=0.0002)+sawtooth(period=168,amp=0.8)+ar1(rho=0.9,sigma=0.2)
var.LULL=sine(period=24,amp=0.5,phase=3)+ar1(rho=0.98,sigma=0.2)
var.OT=trend(slope=-0.0003)+sine(period=720,amp=2)+ar1(rho=0.99,sigma=0.2)
";

    pub const NAMES: [&str; 3] = ["routing", "daily", "ett_like"];

    pub fn get(name: &str) -> Option<&'static str> {
        match name {
            "routing" => Some(ROUTING),
            "daily" => Some(DAILY),
            "ett_like" => Some(ETT_LIKE),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_toy_file() {
        let f =
            write_tmp("date,a,b\n2016-07-01 00:00:00,1.5,-2\n2016-07-01 01:00:00,3,4.25\n2016-07-01 02:00:00,0,1e-3\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.values.shape(), [3, 2]);
        assert_eq!(ds.values.data(), [1.5, -2.0, 3.0, 4.25, 0.0, 1e-3]);
        assert_eq!(ds.names, ["a", "b"]);
        assert_eq!(ds.timestamps[2], "2016-07-01 02:00:00");
    }

    #[test]
    fn parse_errors_name_the_line() {
        let f = write_tmp("date,a,b\nt0,1,2\nt1,,4\n");
        match load_csv(f.path()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains('a'), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let f = write_tmp("date,a,b\nt0,1,2\nt1,3\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { line: 3, .. })));
        let f = write_tmp("date,a\nt0,x\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { line: 2, .. })));
        let f = write_tmp("");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn ett_hour_borders() {
        let s = chrono_split(17420, SplitProfile::EttHour, 96).unwrap();
        assert_eq!((s.train.end, s.val.end, s.test.end), (8640, 11520, 14400));
        assert_eq!((s.val.start, s.test.start), (8640 - 96, 11520 - 96));
        assert_eq!((s.val.target_start, s.test.target_start), (8640, 11520));
        let s = chrono_split(69680, SplitProfile::EttMinute, 96).unwrap();
        assert_eq!((s.train.end, s.val.end, s.test.end), (34560, 46080, 57600));
        assert!(matches!(
            chrono_split(10000, SplitProfile::EttHour, 96),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn ratio_split_of_100() {
        let s = chrono_split(100, SplitProfile::Ratio { train: 0.7, test: 0.2 }, 5).unwrap();
        assert_eq!(s.train.end, 70);
        assert_eq!(s.val.end - s.val.target_start, 10);
        assert_eq!(s.test.end - s.test.target_start, 20);
    }

    #[test]
    fn window_count_and_adjacency() {
        let r = SplitRange {
            start: 0,
            target_start: 4,
            end: 10,
        };
        let o = window_origins(r, 4, 2).unwrap();
        assert_eq!(o, [0, 1, 2, 3, 4]);
        let ds = TimeSeriesDataset::new(
            Tensor::new(&[10, 1], (0..10).map(f64::from).collect()).unwrap(),
            vec!["v".into()],
        )
        .unwrap();
        let w = ds.window(o[0], 4, 2).unwrap();
        assert_eq!(w.y.data()[0], 4.0);
        assert_eq!(w.x.data(), [0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(window_origins(r, 8, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn targets_stay_inside_their_split() {
        let s = chrono_split(14400, SplitProfile::EttHour, 96).unwrap();
        for split in Split::ALL {
            let r = s.get(split);
            for o in window_origins(r, 96, 96).unwrap() {
                assert!(o >= r.start && o + 96 >= r.target_start && o + 192 <= r.end);
            }
        }
        let last_train_target = window_origins(s.train, 96, 96).unwrap().last().unwrap() + 191;
        assert!(last_train_target < s.val.target_start);
    }

    #[test]
    fn standardize_uses_train_range() {
        let mut rng = SeededRng::new(1);
        let values = rng.normal_tensor(&[200, 3], 5.0, 2.0).unwrap();
        let mut ds = TimeSeriesDataset::new(values.clone(), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let train = SplitRange {
            start: 0,
            target_start: 0,
            end: 140,
        };
        let scaler = ds.standardize(train).unwrap();
        for v in 0..3 {
            let col: Vec<f64> = (0..140).map(|t| values.get2(t, v)).collect();
            let m = col.iter().sum::<f64>() / 140.0;
            let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 140.0).sqrt();
            assert!((scaler.mean[v] - m).abs() < 1e-12);
            assert!((scaler.std[v] - sd).abs() < 1e-12);
            let z: Vec<f64> = (0..140).map(|t| ds.values.get2(t, v)).collect();
            let zm = z.iter().sum::<f64>() / 140.0;
            let zs = (z.iter().map(|x| (x - zm).powi(2)).sum::<f64>() / 140.0).sqrt();
            assert!(zm.abs() < 1e-10 && (zs - 1.0).abs() < 1e-10);
        }
        let once = ds.values.clone();
        ds.standardize(train).unwrap();
        for (a, b) in once.data().iter().zip(ds.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_variable_is_an_error() {
        let mut ds = TimeSeriesDataset::new(Tensor::full(&[20, 1], 3.0), vec!["flat".into()]).unwrap();
        let err = ds
            .standardize(SplitRange {
                start: 0,
                target_start: 0,
                end: 10,
            })
            .unwrap_err();
        assert!(err.to_string().contains("flat"));
    }

    #[test]
    fn sine_closed_form() {
        let spec = SyntheticSpec::parse("length=13\nvar.s=sine(period=24,amp=1)\n").unwrap();
        let ds = gen_synthetic(&spec).unwrap();
        assert!(ds.values.get2(0, 0).abs() < 1e-15);
        assert!((ds.values.get2(6, 0) - 1.0).abs() < 1e-15);
        assert!(ds.values.get2(12, 0).abs() < 1e-15);
        assert_eq!(ds.families, ["sine"]);
    }

    #[test]
    fn synthetic_is_deterministic_and_labelled() {
        let spec = SyntheticSpec::parse(presets::ROUTING).unwrap();
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.families[0], "sine");
        assert_eq!(a.families[3], "trend+sawtooth");
        let mut other = spec.clone();
        other.seed = 1;
        assert_ne!(gen_synthetic(&other).unwrap().values, a.values);
    }

    #[test]
    fn ar1_autocorrelation() {
        let spec = SyntheticSpec::parse("length=10000\nseed=3\nvar.x=ar1(rho=0.9)\n").unwrap();
        let ds = gen_synthetic(&spec).unwrap();
        let x: Vec<f64> = (0..10000).map(|t| ds.values.get2(t, 0)).collect();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        let c1: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        assert!((c1 / c0 - 0.9).abs() < 0.05, "{}", c1 / c0);
    }

    #[test]
    fn unknown_generator_is_config_error() {
        assert!(matches!(
            SyntheticSpec::parse("length=10\nvar.x=square(period=3)\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            SyntheticSpec::parse("length=10\nvar.x=sine(amp=3)\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_synthetic(&SyntheticSpec::parse(presets::ROUTING).unwrap()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.save_csv(f.path()).unwrap();
        let back = load_csv(f.path()).unwrap();
        assert_eq!(back.values, ds.values);
        assert_eq!(back.names, ds.names);
    }

    #[test]
    fn batch_stacks_windows() {
        let ds = TimeSeriesDataset::new(
            Tensor::new(&[12, 2], (0..24).map(f64::from).collect()).unwrap(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let (x, y) = ds.batch(&[0, 3], 4, 2).unwrap();
        assert_eq!(x.shape(), [2, 4, 2]);
        assert_eq!(y.shape(), [2, 2, 2]);
        let w = ds.window(3, 4, 2).unwrap();
        assert_eq!(&x.data()[8..], w.x.data());
        assert_eq!(&y.data()[4..], w.y.data());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn origins_are_exhaustive(start in 0usize..50, len in 0usize..80, t in 1usize..10, p in 1usize..10) {
                let r = SplitRange { start, target_start: start, end: start + len };
                match window_origins(r, t, p) {
                    Ok(o) => {
                        prop_assert_eq!(o.len(), len - t - p + 1);
                        prop_assert!(o.windows(2).all(|w| w[1] == w[0] + 1));
                        prop_assert_eq!(*o.last().unwrap() + t + p, start + len);
                    }
                    Err(_) => prop_assert!(len < t + p),
                }
            }

            #[test]
            fn ratio_splits_are_ordered(n in 200usize..5000, t in 2usize..50) {
                let s = chrono_split(n, SplitProfile::Ratio { train: 0.7, test: 0.2 }, t).unwrap();
                prop_assert!(s.train.end == s.val.target_start && s.val.end == s.test.target_start && s.test.end == n);
                prop_assert_eq!(s.val.start + t, s.val.target_start);
            }
        }
    }
}
