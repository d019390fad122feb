use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command as Proc, ExitCode};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use mmk::checkpoint;
use mmk::config::{DatasetSource, RunConfig};
use mmk::data::{gen_synthetic, presets, Prepared, SplitProfile, SyntheticSpec};
use mmk::eval::{evaluate, export_expert_loads, export_feature_weights, write_exports};
use mmk::layers::KanVariant;
use mmk::model::{MmkConfig, MmkModel, PresampleMode};
use mmk::moe::ExpertKind;
use mmk::train::{grad_check_suite, lr_search, run_seeds, History, SeedReport, SeedRun, TrainConfig};
use mmk::{Error, Result};

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "mmk", version, about = "Mixture-of-KAN time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and report test metrics.
    Train(RunArgs),
    /// Score a checkpoint on the test split.
    Eval(CheckpointArgs),
    /// Finite-difference check of every layer and a tiny full model.
    Gradcheck(GradArgs),
    /// Write expert-load and feature-importance exports for a checkpoint.
    Inspect(CheckpointArgs),
    /// Generate a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Run the model-variant and strategy ablation matrices.
    Ablate(AblateArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Config file (`key = value` with [data], [model], [train], [run]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV path, `synth:<preset>` or `synth-spec:<file>`.
    #[arg(long)]
    dataset: Option<String>,
    /// Split profile: ett_hour, ett_minute or ratio.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long = "pred-len")]
    pred_len: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    /// Search these learning rates (default 1e-2,1e-3,1e-4,1e-5).
    #[arg(long = "lr-grid", num_args = 0..=1, default_missing_value = "0.01,0.001,0.0001,0.00001")]
    lr_grid: Option<String>,
    /// Comma-separated expert kinds.
    #[arg(long)]
    experts: Option<String>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// off, as_written or variance_preserving.
    #[arg(long)]
    presample: Option<String>,
    #[arg(long = "lb-weight")]
    lb_weight: Option<f64>,
    /// Single-threaded fixed-order execution.
    #[arg(long)]
    deterministic: bool,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Run directory name under the output directory (default: timestamped).
    #[arg(long = "run-name")]
    run_name: Option<String>,
    /// Any config key, e.g. `--set train.max_epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset of the run that wrote the checkpoint.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long = "pred-len")]
    pred_len: Option<usize>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[arg(long = "run-name")]
    run_name: Option<String>,
    /// MoK layer whose routing `inspect` exports (0 is the embedding layer).
    #[arg(long, default_value_t = 0)]
    layer: usize,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// One of the built-in presets.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// A synthetic spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated horizons (default: the configured one).
    #[arg(long)]
    horizons: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Parse { .. } | Error::Io(_) | Error::Checkpoint(_) | Error::Domain(_) | Error::Dimension(_) => EXIT_DATA,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Contract(_) => EXIT_FAILED,
    }
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("data.dataset", self.dataset.clone());
        put("data.split", self.split.clone());
        put("model.lookback", self.lookback.map(|v| v.to_string()));
        put("model.horizon", self.pred_len.map(|v| v.to_string()));
        put("train.seeds", self.seeds.clone());
        put("train.lr", self.lr.map(|v| v.to_string()));
        put("train.lr_grid", self.lr_grid.clone());
        put("run.lr_search", self.lr_grid.as_ref().map(|_| "true".to_string()));
        put("model.experts", self.experts.clone());
        put("model.top_k", self.topk.map(|v| v.to_string()));
        put("model.n_blocks", self.blocks.map(|v| v.to_string()));
        put("model.hidden_dim", self.hidden.map(|v| v.to_string()));
        put("model.presample", self.presample.clone());
        put("model.lb_weight", self.lb_weight.map(|v| v.to_string()));
        put("run.deterministic", self.deterministic.then(|| "true".to_string()));
        put("run.out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            o.push((k.trim().to_string(), v.to_string()));
        }
        Ok(o)
    }

    /// File values, then flags; validated before any data is touched.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for (k, v) in self.overrides()? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads the dataset, fits `n_vars` to it and builds the windows.
fn prepare(cfg: &mut RunConfig) -> Result<(DatasetSource, Prepared)> {
    let src = cfg.source()?;
    let ds = src.load()?;
    cfg.model.n_vars = ds.n_vars();
    cfg.model.validate()?;
    log::info!("{}: {} steps x {} variables", src.name(), ds.len(), ds.n_vars());
    let data = Prepared::new(ds, cfg.split, cfg.model.lookback, cfg.model.horizon)?;
    Ok((src, data))
}

fn git_describe() -> String {
    Proc::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// `YYYYmmdd-HHMMSS` in UTC.
fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()) as i64;
    let (days, rem) = (secs.div_euclid(86_400), secs.rem_euclid(86_400));
    // civil-from-days, proleptic Gregorian
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    format!(
        "{y:04}{m:02}{d:02}-{:02}{:02}{:02}",
        rem / 3600,
        rem % 3600 / 60,
        rem % 60
    )
}

fn run_dir(out: &Path, command: &str, name: Option<&str>) -> Result<PathBuf> {
    let dir = match name {
        Some(n) => out.join(n),
        None => {
            let base = format!("{command}-{}", timestamp());
            let mut dir = out.join(&base);
            let mut i = 2;
            while dir.exists() {
                dir = out.join(format!("{base}-{i}"));
                i += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_provenance(dir: &Path, cfg: &RunConfig, dataset: &str) -> Result<()> {
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let seeds: Vec<String> = cfg.train.seeds.iter().map(|s| s.to_string()).collect();
    let args: Vec<String> = std::env::args().collect();
    let text = format!(
        "git_describe={}\nseeds={}\ndataset={dataset}\nversion={}\ncommand={}\n",
        git_describe(),
        seeds.join(","),
        env!("CARGO_PKG_VERSION"),
        args.join(" ")
    );
    fs::write(dir.join("provenance.txt"), text)?;
    Ok(())
}

/// Writes checkpoints and histories as seeds finish and collects timings.
struct RunSink {
    dir: PathBuf,
    started: Instant,
    timing: String,
}

impl RunSink {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            timing: String::new(),
        }
    }

    fn record(&mut self, tag: &str, run: &SeedRun, model: &MmkModel, history: &History) -> Result<()> {
        let name = format!("{tag}lr{}_seed{}", run.lr, run.seed);
        checkpoint::save(model, &self.dir.join("checkpoints").join(&name))?;
        fs::create_dir_all(self.dir.join("history"))?;
        fs::write(self.dir.join("history").join(format!("{name}.txt")), history.to_kv())?;
        let secs = self.started.elapsed().as_secs_f64();
        let _ = writeln!(self.timing, "run={name} wall_clock_s={secs:.3} steps={}", run.steps);
        log::info!(
            "{name}: test mse {:.6} mae {:.6} ({} windows, {secs:.1}s)",
            run.test.mse,
            run.test.mae,
            run.test.windows
        );
        self.started = Instant::now();
        Ok(())
    }
}

fn metrics_csv(reports: &[SeedReport], best: Option<usize>) -> String {
    let mut out = String::from("lr,seed,test_mse,test_mae,val_mse,windows,complete,best\n");
    for (i, r) in reports.iter().enumerate() {
        for run in &r.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},,",
                r.lr, run.seed, run.test.mse, run.test.mae, run.best_val_mse, run.test.windows
            );
        }
        for (seed, _) in &r.failures {
            let _ = writeln!(out, "{},{seed},nan,nan,nan,0,false,", r.lr);
        }
        if let Some(a) = r.aggregate() {
            let windows = r.runs.first().map_or(0, |x| x.test.windows);
            let _ = writeln!(
                out,
                "{},mean,{},{},{},{windows},{},{}",
                r.lr,
                a.mse_mean,
                a.mae_mean,
                a.val_mean,
                r.complete(),
                best == Some(i)
            );
            let _ = writeln!(
                out,
                "{},std,{},{},,{windows},{},",
                r.lr,
                a.mse_std,
                a.mae_std,
                r.complete()
            );
        }
    }
    out
}

/// Trains at the configured rate or searches the grid.
fn train_reports(
    cfg: &RunConfig,
    model_cfg: &MmkConfig,
    data: &Prepared,
    sink: &mut RunSink,
    tag: &str,
) -> Result<(Vec<SeedReport>, Option<usize>)> {
    let mut on_run = |run: &SeedRun, m: &MmkModel, h: &History| sink.record(tag, run, m, h);
    if cfg.lr_search {
        let s = lr_search(model_cfg, &cfg.train, data, &mut on_run)?;
        Ok((s.reports, s.best))
    } else {
        Ok((vec![run_seeds(model_cfg, &cfg.train, data, &mut on_run)?], Some(0)))
    }
}

fn status(reports: &[SeedReport]) -> u8 {
    if reports.iter().all(SeedReport::complete) {
        0
    } else {
        EXIT_NUMERICAL
    }
}

fn cmd_train(a: &RunArgs) -> Result<u8> {
    let mut cfg = a.resolve()?;
    let (src, data) = prepare(&mut cfg)?;
    let dir = run_dir(&cfg.out_dir, "train", a.run_name.as_deref())?;
    write_provenance(&dir, &cfg, &src.name())?;
    let started = Instant::now();
    let mut sink = RunSink::new(&dir);
    let model_cfg = cfg.model.clone();
    let (reports, best) = train_reports(&cfg, &model_cfg, &data, &mut sink, "")?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&reports, best))?;
    let report: String = reports.iter().map(SeedReport::to_kv).collect();
    fs::write(dir.join("report.txt"), &report)?;
    let _ = writeln!(sink.timing, "total_wall_clock_s={:.3}", started.elapsed().as_secs_f64());
    fs::write(dir.join("timing.txt"), &sink.timing)?;
    print!("{report}");
    if let Some(r) = best.map(|i| &reports[i]) {
        println!("best_lr={} run_dir={}", r.lr, dir.display());
    }
    Ok(status(&reports))
}

impl CheckpointArgs {
    /// The checkpoint plus the run configuration its data comes from.
    fn resolve(&self) -> Result<(MmkModel, RunConfig)> {
        let model = checkpoint::load(&self.checkpoint)?;
        let run_cfg = match &self.config {
            Some(p) => Some(p.clone()),
            None => {
                let p = self.checkpoint.join("../../config.txt");
                p.exists().then_some(p)
            }
        };
        let mut cfg = match run_cfg {
            Some(p) => RunConfig::load(&p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.set("data.dataset", d)?;
        }
        if let Some(s) = &self.split {
            cfg.split = SplitProfile::parse(s)?;
        }
        if let Some(p) = self.pred_len {
            if p != model.config.horizon {
                return Err(Error::Config(format!(
                    "checkpoint predicts P={} but --pred-len is P={p}",
                    model.config.horizon
                )));
            }
        }
        if let Some(t) = self.lookback {
            if t != model.config.lookback {
                return Err(Error::Config(format!(
                    "checkpoint reads T={} but --lookback is T={t}",
                    model.config.lookback
                )));
            }
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = o.clone();
        }
        cfg.deterministic |= self.deterministic;
        cfg.model = model.config.clone();
        Ok((model, cfg))
    }

    fn data(&self, cfg: &RunConfig, model: &MmkModel) -> Result<(DatasetSource, Prepared)> {
        let src = cfg.source()?;
        let ds = src.load()?;
        if ds.n_vars() != model.config.n_vars {
            return Err(Error::Config(format!(
                "checkpoint expects {} variables, {} has {}",
                model.config.n_vars,
                src.name(),
                ds.n_vars()
            )));
        }
        let data = Prepared::new(ds, cfg.split, model.config.lookback, model.config.horizon)?;
        Ok((src, data))
    }
}

fn cmd_eval(a: &CheckpointArgs) -> Result<u8> {
    let (mut model, cfg) = a.resolve()?;
    let (src, data) = a.data(&cfg, &model)?;
    let dir = run_dir(&cfg.out_dir, "eval", a.run_name.as_deref())?;
    let started = Instant::now();
    let m = evaluate(&mut model, &data.ds, &data.test)?;
    let secs = started.elapsed().as_secs_f64();
    let report = format!(
        "record=eval dataset={} lookback={} horizon={} test_mse={} test_mae={} windows={}\n",
        src.name(),
        model.config.lookback,
        model.config.horizon,
        m.mse,
        m.mae,
        m.windows
    );
    fs::write(dir.join("metrics.txt"), &report)?;
    fs::write(
        dir.join("timing.txt"),
        format!(
            "wall_clock_s={secs:.6}\nwindows_per_s={:.1}\n",
            m.windows as f64 / secs.max(1e-9)
        ),
    )?;
    print!("{report}");
    println!(
        "wall_clock_s={secs:.3} windows_per_s={:.1}",
        m.windows as f64 / secs.max(1e-9)
    );
    Ok(0)
}

fn cmd_inspect(a: &CheckpointArgs) -> Result<u8> {
    let (mut model, cfg) = a.resolve()?;
    let (_, data) = a.data(&cfg, &model)?;
    let dir = run_dir(&cfg.out_dir, "inspect", a.run_name.as_deref())?;
    let loads = export_expert_loads(&mut model, &data.ds, &data.test, a.layer)?;
    let weights = export_feature_weights(&mut model, &data.ds, &data.test)?;
    write_exports(&dir, &loads, &weights)?;
    println!(
        "wrote expert loads ({} experts x {} variables) and feature weights to {}",
        loads.experts.len(),
        loads.variables.len(),
        dir.display()
    );
    Ok(0)
}

fn cmd_gradcheck(a: &GradArgs) -> Result<u8> {
    let started = Instant::now();
    let reports = grad_check_suite(a.seed, a.corrupt.as_deref())?;
    let mut ok = true;
    for r in &reports {
        print!("{r}");
        ok &= r.passed();
    }
    println!(
        "{} {}/{} checks passed in {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        reports.iter().filter(|r| r.passed()).count(),
        reports.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(if ok { 0 } else { EXIT_NUMERICAL })
}

fn cmd_synth(a: &SynthArgs) -> Result<u8> {
    let text = match (&a.preset, &a.spec) {
        (Some(name), None) => presets::get(name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{name}` (expected one of {})",
                    presets::NAMES.join(", ")
                ))
            })?
            .to_string(),
        (None, Some(p)) => fs::read_to_string(p)?,
        _ => return Err(Error::Config("give exactly one of --preset or --spec".into())),
    };
    let ds = gen_synthetic(&SyntheticSpec::parse(&text)?)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ds.save_csv(&a.output)?;
    println!(
        "wrote {} steps x {} variables to {}",
        ds.len(),
        ds.n_vars(),
        a.output.display()
    );
    Ok(0)
}

/// One ablation row: a name and the change it makes to the base run.
struct Variant {
    group: &'static str,
    name: &'static str,
    apply: fn(&mut MmkConfig, &mut TrainConfig),
}

fn single(kinds: Vec<ExpertKind>, top_k: usize) -> impl Fn(&mut MmkConfig) {
    move |m: &mut MmkConfig| {
        m.single_layer = true;
        m.experts = kinds.clone();
        m.top_k = top_k.min(kinds.len());
    }
}

const VARIANTS: &[Variant] = &[
    Variant {
        group: "model",
        name: "mok",
        apply: |m, _| single(ExpertKind::default_roster(), m.top_k)(m),
    },
    Variant {
        group: "model",
        name: "mol",
        apply: |m, _| single(vec![ExpertKind::Linear; 4], m.top_k)(m),
    },
    Variant {
        group: "model",
        name: "wavkan",
        apply: |m, _| single(vec![ExpertKind::Kan(KanVariant::Wavelet)], 1)(m),
    },
    Variant {
        group: "model",
        name: "taylorkan",
        apply: |m, _| single(vec![ExpertKind::Kan(KanVariant::Taylor)], 1)(m),
    },
    Variant {
        group: "model",
        name: "linear",
        apply: |m, _| single(vec![ExpertKind::Linear], 1)(m),
    },
    Variant {
        group: "model",
        name: "mok_lb0",
        apply: |m, _| {
            single(ExpertKind::default_roster(), m.top_k)(m);
            m.lb_weight = 0.0;
        },
    },
    Variant {
        group: "strategy",
        name: "mmk",
        apply: |m, _| m.single_layer = false,
    },
    Variant {
        group: "strategy",
        name: "no_revin",
        apply: |m, _| {
            m.single_layer = false;
            m.revin = false;
        },
    },
    Variant {
        group: "strategy",
        name: "no_blocks",
        apply: |m, _| {
            m.single_layer = false;
            m.n_blocks = 0;
        },
    },
    Variant {
        group: "strategy",
        name: "no_warmup",
        apply: |m, t| {
            m.single_layer = false;
            t.warmup_steps = 0;
        },
    },
    Variant {
        group: "strategy",
        name: "no_presample",
        apply: |m, _| {
            m.single_layer = false;
            m.presample = PresampleMode::Off;
        },
    },
    Variant {
        group: "strategy",
        name: "mmk_lb0",
        apply: |m, _| {
            m.single_layer = false;
            m.lb_weight = 0.0;
        },
    },
];

fn cmd_ablate(a: &AblateArgs) -> Result<u8> {
    let mut cfg = a.run.resolve()?;
    let horizons: Vec<usize> = match &a.horizons {
        Some(h) => h
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid horizon `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => vec![cfg.model.horizon],
    };
    let src = cfg.source()?;
    let ds = src.load()?;
    cfg.model.n_vars = ds.n_vars();
    let dir = run_dir(&cfg.out_dir, "ablate", a.run.run_name.as_deref())?;
    write_provenance(&dir, &cfg, &src.name())?;
    let mut sink = RunSink::new(&dir);
    let mut csv =
        String::from("group,variant,horizon,lb_weight,test_mse,test_mae,test_mse_std,test_mae_std,lr,complete\n");
    let mut all = Vec::new();
    for &p in &horizons {
        let data = Prepared::new(ds.clone(), cfg.split, cfg.model.lookback, p)?;
        for v in VARIANTS {
            let mut mc = cfg.model.clone();
            let mut tc = cfg.train.clone();
            mc.horizon = p;
            (v.apply)(&mut mc, &mut tc);
            mc.validate()?;
            log::info!("ablation {}/{} at P={p}", v.group, v.name);
            let run_cfg = RunConfig {
                train: tc,
                ..cfg.clone()
            };
            let tag = format!("{}_p{p}_", v.name);
            let (reports, best) = train_reports(&run_cfg, &mc, &data, &mut sink, &tag)?;
            let chosen = best.map(|i| &reports[i]);
            let agg = chosen.and_then(|r| r.aggregate());
            let _ = writeln!(
                csv,
                "{},{},{p},{},{},{},{},{},{},{}",
                v.group,
                v.name,
                mc.lb_weight,
                agg.map_or(f64::NAN, |x| x.mse_mean),
                agg.map_or(f64::NAN, |x| x.mae_mean),
                agg.map_or(f64::NAN, |x| x.mse_std),
                agg.map_or(f64::NAN, |x| x.mae_std),
                chosen.map_or(f64::NAN, |r| r.lr),
                chosen.is_some_and(|r| r.complete())
            );
            all.extend(reports);
        }
    }
    fs::write(dir.join("ablation.csv"), &csv)?;
    fs::write(
        dir.join("report.txt"),
        all.iter().map(SeedReport::to_kv).collect::<String>(),
    )?;
    fs::write(dir.join("timing.txt"), &sink.timing)?;
    print!("{csv}");
    Ok(status(&all))
}
