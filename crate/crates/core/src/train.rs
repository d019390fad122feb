//! Optimisation: loss assembly, Adam, the learning-rate schedule, the
//! training loop with early stopping, multi-seed runs and the model-level
//! gradient checks.

use std::fmt::Write as _;

use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::gradcheck::{
    check_layer_with, check_subject, GradCheckOptions, GradCheckReport, GradSubject, LayerUnderTest,
};
use crate::layers::kan::KanOptions;
use crate::layers::{BatchNorm1d, KanLayer, KanVariant, Linear, Mode, Param, Parameters, RevIn};
use crate::model::{MmkConfig, MmkModel, PresampleMode, PresampleStats};
use crate::moe::{load_balance_loss, Expert, ExpertKind, GateDecision, GateMode, GateNoise, Gating, MokLayer};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DECAY_FACTOR: f64 = 0.5;
pub const DEFAULT_LR_GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];
pub const DEFAULT_SEEDS: [u64; 4] = [0, 1, 2, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub lr_grid: Vec<f64>,
    /// Halve the learning rate every epoch from the first epoch that fails
    /// to improve validation MSE.
    pub decay: bool,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 500,
            max_epochs: 10,
            patience: 3,
            batch_size: 32,
            seeds: DEFAULT_SEEDS.to_vec(),
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            decay: true,
            max_steps: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "warmup_steps",
        "max_epochs",
        "patience",
        "batch_size",
        "seeds",
        "lr_grid",
        "decay",
        "max_steps",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("`lr` must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::config("`patience` must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("`batch_size` must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("`max_epochs` must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("`seeds` is empty"));
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::config("`lr_grid` entries must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("`max_steps` must be at least 1 or `none`"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "lr" => self.lr = parse_num(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "lr_grid" => self.lr_grid = parse_list(key, v)?,
            "decay" => {
                self.decay = match v {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(Error::config(format!("invalid boolean `{v}` for `decay`"))),
                }
            }
            "max_steps" => self.max_steps = if v == "none" { None } else { Some(parse_num(key, v)?) },
            _ => return Err(Error::config(format!("unknown train key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seeds", join(&self.seeds)),
            ("lr_grid", join(&self.lr_grid)),
            ("decay", self.decay.to_string()),
            (
                "max_steps",
                self.max_steps.map_or("none".to_string(), |m| m.to_string()),
            ),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    /// Unweighted sum of CV² over MoK layers.
    pub lb: f64,
}

/// Loss value plus the cotangents that seed the backward pass.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub parts: LossParts,
    pub d_pred: Tensor,
    /// One cotangent per MoK layer's loads, already scaled by λ.
    pub d_loads: Vec<Tensor>,
}

/// `MSE(pred, target) + λ · Σ CV²(loads)` over the given gate decisions.
pub fn total_loss(pred: &Tensor, target: &Tensor, decisions: &[GateDecision], lambda: f64) -> Result<LossTerms> {
    pred.expect_shape(target.shape())?;
    if pred.is_empty() {
        return Err(Error::domain("empty prediction"));
    }
    let n = pred.len() as f64;
    let diff = pred.sub(target)?;
    let mse = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let d_pred = diff.scale(2.0 / n);
    let mut lb = 0.0;
    let mut d_loads = Vec::with_capacity(decisions.len());
    for d in decisions {
        let (cv2, g) = load_balance_loss(&d.loads)?;
        lb += cv2;
        d_loads.push(g.scale(lambda));
    }
    Ok(LossTerms {
        parts: LossParts {
            total: mse + lambda * lb,
            mse,
            lb,
        },
        d_pred,
        d_loads,
    })
}

/// Bias-corrected Adam over a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates every parameter from its accumulated gradient. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: Vec<(String, &mut Param)>, lr: f64) -> Result<()> {
        for (name, p) in &params {
            if !p.grad.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in parameter `{name}`")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimiser tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((name, p), m) in params.iter().zip(&self.m) {
            if m.shape() != p.value.shape() {
                return Err(Error::contract(format!(
                    "parameter `{name}` changed shape under the optimiser"
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((_, p), (m, v)) in params.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate for optimiser step `step`: linear warmup to `cfg.lr`, then
/// `cfg.lr` times the accumulated plateau decay `scale`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, scale: f64) -> f64 {
    let ramp = if step < cfg.warmup_steps {
        (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        1.0
    };
    cfg.lr * ramp * scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
    pub improved: bool,
    /// Decay multiplier in force during the epoch.
    pub lr_scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub stopped_early: bool,
    pub presample: PresampleStats,
}

impl History {
    /// Mean total training loss over the first `n` steps.
    pub fn mean_loss(&self, n: usize) -> Option<f64> {
        let s = &self.steps[..n.min(self.steps.len())];
        (!s.is_empty()).then(|| s.iter().map(|r| r.loss.total).sum::<f64>() / s.len() as f64)
    }

    /// One `key=value` record per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for p in &self.presample.layers {
            let ratio = p.ratio.map_or("skipped".to_string(), |r| r.to_string());
            let _ = writeln!(
                out,
                "record=presample layer={} expert={} var_input={} var_base={} ratio={ratio}",
                p.layer, p.expert, p.var_input, p.var_base
            );
        }
        for s in &self.steps {
            let _ = writeln!(
                out,
                "record=step step={} epoch={} lr={} loss={} mse={} lb={}",
                s.step, s.epoch, s.lr, s.loss.total, s.loss.mse, s.loss.lb
            );
        }
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "record=epoch epoch={} train_loss={} val_mse={} val_mae={} improved={} lr_scale={}",
                e.epoch, e.train_loss, e.val.mse, e.val.mae, e.improved, e.lr_scale
            );
        }
        let _ = writeln!(
            out,
            "record=summary best_epoch={} best_val_mse={} stopped_early={}",
            self.best_epoch.map_or("none".to_string(), |e| e.to_string()),
            self.best_val_mse.map_or("none".to_string(), |v| v.to_string()),
            self.stopped_early
        );
        out
    }
}

/// Patience and plateau-decay bookkeeping over validation scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub decay: bool,
    pub best: f64,
    pub bad_epochs: usize,
    /// Multiplier for the next epoch's learning rate.
    pub lr_scale: f64,
    decaying: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, decay: bool) -> Self {
        Self {
            patience,
            decay,
            best: f64::INFINITY,
            bad_epochs: 0,
            lr_scale: 1.0,
            decaying: false,
        }
    }

    /// Records one validation score; returns whether it improved.
    pub fn observe(&mut self, val: f64) -> bool {
        let improved = val < self.best;
        if improved {
            self.best = val;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            self.decaying |= self.decay;
        }
        if self.decaying {
            self.lr_scale *= DECAY_FACTOR;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

fn check_compatible(model: &MmkModel, data: &Prepared) -> Result<()> {
    let c = &model.config;
    if c.lookback != data.lookback || c.horizon != data.horizon || c.n_vars != data.ds.n_vars() {
        return Err(Error::config(format!(
            "model expects T={} P={} C={}, data has T={} P={} C={}",
            c.lookback,
            c.horizon,
            c.n_vars,
            data.lookback,
            data.horizon,
            data.ds.n_vars()
        )));
    }
    Ok(())
}

/// Trains `model` on the train windows of `data`, validating after every
/// epoch, and leaves it holding the parameters with the best validation
/// MSE. All randomness is forked from the model seed.
///
/// A non-finite loss or gradient restores the best parameters seen so far
/// and returns a numerical error.
pub fn fit(model: &mut MmkModel, data: &Prepared, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    check_compatible(model, data)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::domain("training needs train and validation windows"));
    }
    let (t, p, c) = (data.lookback, data.horizon, data.ds.n_vars());
    let bs = cfg.batch_size;
    let lambda = model.config.lb_weight;
    let mut root = SeededRng::new(model.config.seed).fork(0x7a11);
    let mut shuffle_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let mut pre_rng = root.fork(3);

    let mut history = History::default();
    if model.config.presample != PresampleMode::Off {
        let mut origins = data.train.clone();
        pre_rng.shuffle(&mut origins);
        let n = model
            .config
            .presample_batches
            .map_or(origins.len(), |m| (m * bs).min(origins.len()));
        let batches = origins[..n]
            .chunks(bs)
            .map(|o| Ok(data.ds.batch(o, t, p)?.0))
            .collect::<Result<Vec<_>>>()?;
        history.presample = model.presample_init(&batches, &mut pre_rng)?;
    }

    let mut adam = Adam::new();
    let mut best = model.clone();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.decay);
    let mut step = 0;
    let out_of_steps = |step: usize| cfg.max_steps.is_some_and(|m| step >= m);

    for epoch in 0..cfg.max_epochs {
        let mut order = data.train.clone();
        shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(bs) {
            if out_of_steps(step) {
                break;
            }
            // batch statistics need at least two rows
            if chunk.len() * c < 2 {
                continue;
            }
            let (x, y) = data.ds.batch(chunk, t, p)?;
            model.zero_grad();
            let (pred, decisions, cache) = model.forward(&x, Mode::Train, Some(&mut noise_rng))?;
            let terms = total_loss(&pred, &y, &decisions, lambda)?;
            if !terms.parts.total.is_finite() {
                *model = best;
                return Err(Error::Numerical(format!(
                    "training loss became {} at step {step}; best parameters restored",
                    terms.parts.total
                )));
            }
            model.backward(&cache, &terms.d_pred, Some(&terms.d_loads))?;
            let lr = lr_schedule(step, cfg, stopper.lr_scale);
            let mut ps = Vec::new();
            model.params_mut("", &mut ps);
            if let Err(e) = adam.step(ps, lr) {
                *model = best;
                return Err(Error::Numerical(format!(
                    "{e} at step {step}; best parameters restored"
                )));
            }
            model.project();
            history.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: terms.parts,
            });
            loss_sum += terms.parts.total;
            batches += 1;
            step += 1;
        }
        if batches == 0 {
            break;
        }
        let val = match evaluate(model, &data.ds, &data.val) {
            Ok(v) if v.mse.is_finite() => v,
            Ok(_) | Err(Error::Numerical(_)) => {
                *model = best;
                return Err(Error::Numerical(format!(
                    "validation diverged after epoch {epoch}; best parameters restored"
                )));
            }
            Err(e) => return Err(e),
        };
        let scale_used = stopper.lr_scale;
        let improved = stopper.observe(val.mse);
        if improved {
            best = model.clone();
            history.best_epoch = Some(epoch);
            history.best_val_mse = Some(val.mse);
        }
        log::info!(
            "seed {} epoch {epoch}: train loss {:.6} val mse {:.6}{}",
            model.config.seed,
            loss_sum / batches as f64,
            val.mse,
            if improved { " (best)" } else { "" }
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val,
            improved,
            lr_scale: scale_used,
        });
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
        if out_of_steps(step) {
            break;
        }
    }
    *model = best;
    Ok(history)
}

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub lr: f64,
    pub best_val_mse: f64,
    pub test: Metrics,
    pub steps: usize,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub val_mean: f64,
}

/// Per-seed results at one learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedReport {
    pub lr: f64,
    pub runs: Vec<SeedRun>,
    /// Seeds whose run aborted, with the reason.
    pub failures: Vec<(u64, String)>,
}

/// Mean and population standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SeedReport {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn aggregate(&self) -> Option<Aggregate> {
        if self.runs.is_empty() {
            return None;
        }
        let col = |f: fn(&SeedRun) -> f64| self.runs.iter().map(f).collect::<Vec<_>>();
        let (mse_mean, mse_std) = mean_std(&col(|r| r.test.mse));
        let (mae_mean, mae_std) = mean_std(&col(|r| r.test.mae));
        let (val_mean, _) = mean_std(&col(|r| r.best_val_mse));
        Some(Aggregate {
            mse_mean,
            mse_std,
            mae_mean,
            mae_std,
            val_mean,
        })
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for r in &self.runs {
            let _ = writeln!(
                out,
                "record=seed lr={} seed={} test_mse={} test_mae={} best_val_mse={} windows={} steps={} epochs={}",
                self.lr, r.seed, r.test.mse, r.test.mae, r.best_val_mse, r.test.windows, r.steps, r.epochs
            );
        }
        for (seed, why) in &self.failures {
            let _ = writeln!(out, "record=failure lr={} seed={seed} reason={why:?}", self.lr);
        }
        if let Some(a) = self.aggregate() {
            let _ = writeln!(
                out,
                "record=aggregate lr={} seeds={} test_mse_mean={} test_mse_std={} test_mae_mean={} test_mae_std={} val_mse_mean={} complete={}",
                self.lr,
                self.runs.len(),
                a.mse_mean,
                a.mse_std,
                a.mae_mean,
                a.mae_std,
                a.val_mean,
                self.complete()
            );
        }
        out
    }
}

/// Trains one model per seed in `cfg.seeds` at `cfg.lr` and scores each on
/// the test split. `on_run` sees every finished model. A run that fails
/// numerically is recorded and the remaining seeds still run.
pub fn run_seeds(
    model_cfg: &MmkConfig,
    cfg: &TrainConfig,
    data: &Prepared,
    on_run: &mut dyn FnMut(&SeedRun, &MmkModel, &History) -> Result<()>,
) -> Result<SeedReport> {
    cfg.validate()?;
    let mut report = SeedReport {
        lr: cfg.lr,
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let mut mc = model_cfg.clone();
        mc.seed = seed;
        let mut model = MmkModel::new(mc)?;
        let history = match fit(&mut model, data, cfg) {
            Ok(h) => h,
            Err(Error::Numerical(msg)) => {
                log::warn!("seed {seed} at lr {} aborted: {msg}", cfg.lr);
                report.failures.push((seed, msg));
                continue;
            }
            Err(e) => return Err(e),
        };
        let test = match evaluate(&mut model, &data.ds, &data.test) {
            Ok(m) => m,
            Err(Error::Numerical(msg)) => {
                report.failures.push((seed, msg));
                continue;
            }
            Err(e) => return Err(e),
        };
        let run = SeedRun {
            seed,
            lr: cfg.lr,
            best_val_mse: history.best_val_mse.unwrap_or(f64::NAN),
            test,
            steps: history.steps.len(),
            epochs: history.epochs.len(),
        };
        on_run(&run, &model, &history)?;
        report.runs.push(run);
    }
    Ok(report)
}

/// One seed report per learning rate in `cfg.lr_grid`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSearch {
    pub reports: Vec<SeedReport>,
    /// Index of the report with the lowest mean validation MSE.
    pub best: Option<usize>,
}

impl LrSearch {
    pub fn best_report(&self) -> Option<&SeedReport> {
        self.best.map(|i| &self.reports[i])
    }
}

/// Runs [`run_seeds`] at every grid learning rate and selects by mean
/// validation MSE, so the test split plays no part in the choice.
pub fn lr_search(
    model_cfg: &MmkConfig,
    cfg: &TrainConfig,
    data: &Prepared,
    on_run: &mut dyn FnMut(&SeedRun, &MmkModel, &History) -> Result<()>,
) -> Result<LrSearch> {
    if cfg.lr_grid.is_empty() {
        return Err(Error::config("`lr_grid` is empty"));
    }
    let mut reports = Vec::new();
    for &lr in &cfg.lr_grid {
        let c = TrainConfig { lr, ..cfg.clone() };
        reports.push(run_seeds(model_cfg, &c, data, on_run)?);
    }
    let best = reports
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.aggregate().map(|a| (i, a.val_mean)))
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    Ok(LrSearch { reports, best })
}

/// Full model under the training loss, evaluated in eval mode.
struct ModelSubject {
    model: MmkModel,
    target: Tensor,
    lambda: f64,
}

impl GradSubject for ModelSubject {
    fn loss(&mut self, x: &Tensor) -> Result<f64> {
        let (pred, decisions, _) = self.model.forward(x, Mode::Eval, None)?;
        Ok(total_loss(&pred, &self.target, &decisions, self.lambda)?.parts.total)
    }

    fn loss_and_grads(&mut self, x: &Tensor) -> Result<(f64, Option<Tensor>)> {
        self.model.zero_grad();
        let (pred, decisions, cache) = self.model.forward(x, Mode::Eval, None)?;
        let terms = total_loss(&pred, &self.target, &decisions, self.lambda)?;
        let d_x = self.model.backward(&cache, &terms.d_pred, Some(&terms.d_loads))?;
        Ok((terms.parts.total, Some(d_x)))
    }

    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.model.params_mut("", &mut out);
        out
    }
}

/// Checks the gradient of the total loss at `(x, target)` with routing
/// frozen at the unperturbed selection.
pub fn check_model(
    mut model: MmkModel,
    x: &Tensor,
    target: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    model.unfreeze_routing();
    let (_, decisions, _) = model.forward(x, Mode::Eval, None)?;
    model.freeze_routing(&decisions)?;
    let lambda = model.config.lb_weight;
    let mut subject = ModelSubject {
        model,
        target: target.clone(),
        lambda,
    };
    check_subject(&mut subject, x, "mmk/tiny", opts)
}

pub const LINEAR_TOLERANCE: f64 = 1e-7;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Tiny model for the full gradient check: T=8, P=4, C=2, d=8.
pub fn tiny_model(seed: u64) -> Result<MmkModel> {
    let cfg = MmkConfig {
        lookback: 8,
        horizon: 4,
        n_vars: 2,
        hidden_dim: 8,
        n_blocks: 2,
        dropout: 0.0,
        gate_noise: GateNoise::Literal,
        seed,
        ..MmkConfig::default()
    };
    let mut model = MmkModel::new(cfg)?;
    let mut rng = SeededRng::new(seed).fork(0x6c);
    // move every parameter and buffer off its structured initial value
    for layer in model.mok_layers_mut() {
        let shape = layer.gate.w_g.value.shape().to_vec();
        layer.gate.w_g.value = rng.normal_tensor(&shape, 0.0, 0.5)?;
        layer.gate.w_noise.value = rng.normal_tensor(&shape, 0.0, 0.5)?;
    }
    for b in &mut model.blocks {
        let f = b.bn.features();
        b.bn.gamma.value = rng.uniform_tensor(&[f], 0.5, 1.5);
        b.bn.beta.value = rng.normal_tensor(&[f], 0.0, 0.2)?;
        b.bn.running_mean = rng.normal_tensor(&[f], 0.0, 0.2)?;
        b.bn.running_var = rng.uniform_tensor(&[f], 0.5, 1.5);
    }
    model.revin.weight.value = rng.uniform_tensor(&[2], 0.5, 1.5);
    model.revin.bias.value = rng.normal_tensor(&[2], 0.0, 0.2)?;
    Ok(model)
}

fn randomized_gate(
    d_in: usize,
    n: usize,
    k: usize,
    mode: GateMode,
    noise: GateNoise,
    rng: &mut SeededRng,
) -> Result<Gating> {
    let mut gate = Gating::new(d_in, n, k, mode, noise)?;
    gate.w_g.value = rng.normal_tensor(&[d_in, n], 0.0, 0.5)?;
    gate.w_noise.value = rng.normal_tensor(&[d_in, n], 0.0, 0.5)?;
    Ok(gate)
}

/// Gradient checks over every layer kind and the tiny model. `corrupt`
/// names a tiny-model parameter whose analytic gradient is perturbed.
pub fn grad_check_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let mut rng = SeededRng::new(seed);
    let opts = |tol: f64| GradCheckOptions {
        seed,
        ..GradCheckOptions::new(tol)
    };
    let kan_opts = KanOptions::default();
    let mut reports = Vec::new();

    let linear = Linear::new(5, 4, &mut rng);
    let x = rng.normal_tensor(&[6, 5], 0.0, 1.0)?;
    reports.push(check_layer_with(
        LayerUnderTest::Linear(linear),
        x,
        &opts(LINEAR_TOLERANCE),
    )?);

    for variant in KanVariant::ALL {
        let layer = KanLayer::new(variant, 4, 3, &kan_opts, &mut rng)?;
        let x = rng.normal_tensor(&[6, 4], 0.0, 0.8)?;
        reports.push(check_layer_with(LayerUnderTest::Kan(layer), x, &opts(LAYER_TOLERANCE))?);
    }

    let mut revin = RevIn::new(3);
    revin.weight.value = rng.uniform_tensor(&[3], 0.5, 1.5);
    revin.bias.value = rng.normal_tensor(&[3], 0.0, 0.3)?;
    let x = rng.normal_tensor(&[2, 8, 3], 0.5, 1.0)?;
    reports.push(check_layer_with(
        LayerUnderTest::RevInPair { revin, horizon: 4 },
        x,
        &opts(LAYER_TOLERANCE),
    )?);

    let mut bn = BatchNorm1d::new(5);
    bn.gamma.value = rng.uniform_tensor(&[5], 0.5, 1.5);
    bn.beta.value = rng.normal_tensor(&[5], 0.0, 0.3)?;
    bn.running_mean = rng.normal_tensor(&[5], 0.0, 0.3)?;
    bn.running_var = rng.uniform_tensor(&[5], 0.5, 1.5);
    let x = rng.normal_tensor(&[6, 5], 0.0, 1.0)?;
    reports.push(check_layer_with(
        LayerUnderTest::BatchNorm { bn, mode: Mode::Eval },
        x,
        &opts(LAYER_TOLERANCE),
    )?);

    let roster = [
        ExpertKind::Kan(KanVariant::BSpline),
        ExpertKind::Kan(KanVariant::Jacobi),
        ExpertKind::Kan(KanVariant::Taylor),
        ExpertKind::Kan(KanVariant::Wavelet),
    ];
    for (mode, noise, k) in [
        (GateMode::Softmax, GateNoise::Gaussian, 4),
        (GateMode::Sparse, GateNoise::Gaussian, 2),
        (GateMode::Sparse, GateNoise::Literal, 2),
    ] {
        let experts = roster
            .iter()
            .map(|kind| match kind {
                ExpertKind::Kan(v) => Ok(Expert::Kan(KanLayer::new(*v, 4, 3, &kan_opts, &mut rng)?)),
                ExpertKind::Linear => Ok(Expert::Linear(Linear::new(4, 3, &mut rng))),
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = randomized_gate(4, roster.len(), k, mode, noise, &mut rng)?;
        let layer = MokLayer::new(gate, experts)?;
        let x = rng.normal_tensor(&[6, 4], 0.0, 0.8)?;
        let mut report = check_layer_with(
            LayerUnderTest::Mok {
                layer,
                mode: Mode::Eval,
            },
            x,
            &opts(LAYER_TOLERANCE),
        )?;
        report.label = format!("mok/{}/{}", mode.name(), noise.name());
        reports.push(report);
    }

    let model = tiny_model(seed)?;
    let x = rng.normal_tensor(&[3, 8, 2], 0.0, 1.0)?;
    let y = rng.normal_tensor(&[3, 4, 2], 0.0, 1.0)?;
    let mut o = opts(MODEL_TOLERANCE);
    o.corrupt = corrupt.map(str::to_string);
    reports.push(check_model(model, &x, &y, &o)?);
    Ok(reports)
}
