//! The MMK forecaster: RevIN, an embedding MoK layer, a stack of residual
//! MoK blocks, a head MoK layer and the inverse RevIN.
//!
//! Variables are handled independently: a `[B, T, C]` window becomes
//! `B·C` rows of length `T`, each routed on its own.

use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};
use crate::layers::batchnorm::BatchNormCache;
use crate::layers::dropout::{DropoutCache, DEFAULT_DROPOUT};
use crate::layers::kan::KanOptions;
use crate::layers::{join, BatchNorm1d, Dropout, KanLayer, Linear, Mode, Param, Parameters, RevIn, RevInStats};
use crate::moe::{Expert, ExpertKind, GateDecision, GateMode, GateNoise, Gating, MokCache, MokLayer};
use crate::rng::SeededRng;
use crate::stats::Moments;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresampleMode {
    Off,
    /// `w_b ~ N(0, Var[F(x)] / Var[x])`
    AsWritten,
    /// `w_b ~ N(0, Var[x] / Var[F(x)])`
    VariancePreserving,
}

impl PresampleMode {
    pub fn name(self) -> &'static str {
        match self {
            PresampleMode::Off => "off",
            PresampleMode::AsWritten => "as_written",
            PresampleMode::VariancePreserving => "variance_preserving",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(PresampleMode::Off),
            "as_written" => Some(PresampleMode::AsWritten),
            "variance_preserving" => Some(PresampleMode::VariancePreserving),
            _ => None,
        }
    }
}

/// Which KAN layers pre-sampling re-initialises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresampleScope {
    All,
    /// Only the experts of the final MoK layer.
    Last,
}

impl PresampleScope {
    pub fn name(self) -> &'static str {
        match self {
            PresampleScope::All => "all",
            PresampleScope::Last => "last",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(PresampleScope::All),
            "last" => Some(PresampleScope::Last),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmkConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub n_vars: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    /// Instance normalisation around the network; off passes inputs through.
    pub revin: bool,
    /// One MoK layer T→P with no blocks or head.
    pub single_layer: bool,
    pub experts: Vec<ExpertKind>,
    pub top_k: usize,
    pub dropout: f64,
    pub gate_mode: GateMode,
    pub gate_noise: GateNoise,
    pub lb_weight: f64,
    pub presample: PresampleMode,
    pub presample_scope: PresampleScope,
    /// `None` uses every training batch.
    pub presample_batches: Option<usize>,
    pub kan: KanOptions,
    pub seed: u64,
}

impl Default for MmkConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            n_vars: 7,
            hidden_dim: 128,
            n_blocks: 2,
            revin: true,
            single_layer: false,
            experts: ExpertKind::default_roster(),
            top_k: 2,
            dropout: DEFAULT_DROPOUT,
            gate_mode: GateMode::Sparse,
            gate_noise: GateNoise::Gaussian,
            lb_weight: 1.0,
            presample: PresampleMode::AsWritten,
            presample_scope: PresampleScope::All,
            presample_batches: Some(32),
            kan: KanOptions::default(),
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

impl MmkConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lookback",
        "horizon",
        "n_vars",
        "hidden_dim",
        "n_blocks",
        "revin",
        "single_layer",
        "experts",
        "top_k",
        "dropout",
        "gate_mode",
        "gate_noise",
        "lb_weight",
        "presample",
        "presample_scope",
        "presample_batches",
        "grid_size",
        "spline_degree",
        "grid_lo",
        "grid_hi",
        "poly_order",
        "jacobi_a",
        "jacobi_b",
        "wavelet_count",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("n_vars", self.n_vars),
            ("hidden_dim", self.hidden_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{k}` must be at least 1")));
            }
        }
        if self.lookback < 2 {
            return Err(Error::config(
                "`lookback` must be at least 2 for instance normalisation",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "`dropout` must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.lb_weight >= 0.0) {
            return Err(Error::config(format!(
                "`lb_weight` must be >= 0, got {}",
                self.lb_weight
            )));
        }
        if self.experts.is_empty() {
            return Err(Error::config("expert roster is empty"));
        }
        if self.gate_mode == GateMode::Sparse && (self.top_k == 0 || self.top_k > self.experts.len()) {
            return Err(Error::config(format!(
                "`top_k` must be in 1..={}, got {}",
                self.experts.len(),
                self.top_k
            )));
        }
        if self.presample_batches == Some(0) {
            return Err(Error::config("`presample_batches` must be at least 1 or `all`"));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "lookback" => self.lookback = parse_num(key, v)?,
            "horizon" => self.horizon = parse_num(key, v)?,
            "n_vars" => self.n_vars = parse_num(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, v)?,
            "n_blocks" => self.n_blocks = parse_num(key, v)?,
            "revin" => self.revin = parse_bool(key, v)?,
            "single_layer" => self.single_layer = parse_bool(key, v)?,
            "experts" => self.experts = ExpertKind::parse_list(v)?,
            "top_k" => self.top_k = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "gate_mode" => {
                self.gate_mode = GateMode::parse(v).ok_or_else(|| Error::config(format!("unknown gate mode `{v}`")))?
            }
            "gate_noise" => {
                self.gate_noise =
                    GateNoise::parse(v).ok_or_else(|| Error::config(format!("unknown gate noise `{v}`")))?
            }
            "lb_weight" => self.lb_weight = parse_num(key, v)?,
            "presample" => {
                self.presample =
                    PresampleMode::parse(v).ok_or_else(|| Error::config(format!("unknown presample mode `{v}`")))?
            }
            "presample_scope" => {
                self.presample_scope =
                    PresampleScope::parse(v).ok_or_else(|| Error::config(format!("unknown presample scope `{v}`")))?
            }
            "presample_batches" => self.presample_batches = if v == "all" { None } else { Some(parse_num(key, v)?) },
            "grid_size" => self.kan.grid_size = parse_num(key, v)?,
            "spline_degree" => self.kan.spline_degree = parse_num(key, v)?,
            "grid_lo" => self.kan.grid_range.0 = parse_num(key, v)?,
            "grid_hi" => self.kan.grid_range.1 = parse_num(key, v)?,
            "poly_order" => self.kan.poly_order = parse_num(key, v)?,
            "jacobi_a" => self.kan.jacobi_a = parse_num(key, v)?,
            "jacobi_b" => self.kan.jacobi_b = parse_num(key, v)?,
            "wavelet_count" => self.kan.wavelet_count = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            _ => return Err(Error::config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let experts: Vec<&str> = self.experts.iter().map(|e| e.name()).collect();
        vec![
            ("lookback", self.lookback.to_string()),
            ("horizon", self.horizon.to_string()),
            ("n_vars", self.n_vars.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("revin", self.revin.to_string()),
            ("single_layer", self.single_layer.to_string()),
            ("experts", experts.join(",")),
            ("top_k", self.top_k.to_string()),
            ("dropout", self.dropout.to_string()),
            ("gate_mode", self.gate_mode.name().to_string()),
            ("gate_noise", self.gate_noise.name().to_string()),
            ("lb_weight", self.lb_weight.to_string()),
            ("presample", self.presample.name().to_string()),
            ("presample_scope", self.presample_scope.name().to_string()),
            (
                "presample_batches",
                self.presample_batches.map_or("all".to_string(), |m| m.to_string()),
            ),
            ("grid_size", self.kan.grid_size.to_string()),
            ("spline_degree", self.kan.spline_degree.to_string()),
            ("grid_lo", self.kan.grid_range.0.to_string()),
            ("grid_hi", self.kan.grid_range.1.to_string()),
            ("poly_order", self.kan.poly_order.to_string()),
            ("jacobi_a", self.kan.jacobi_a.to_string()),
            ("jacobi_b", self.kan.jacobi_b.to_string()),
            ("wavelet_count", self.kan.wavelet_count.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_entries(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn build_mok(d_in: usize, d_out: usize, cfg: &MmkConfig, rng: &mut SeededRng) -> Result<MokLayer> {
    let experts = cfg
        .experts
        .iter()
        .map(|kind| {
            Ok(match kind {
                ExpertKind::Kan(v) => Expert::Kan(KanLayer::new(*v, d_in, d_out, &cfg.kan, rng)?),
                ExpertKind::Linear => Expert::Linear(Linear::new(d_in, d_out, rng)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = match cfg.gate_mode {
        GateMode::Sparse => cfg.top_k,
        GateMode::Softmax => cfg.top_k.clamp(1, experts.len()),
    };
    let gate = Gating::new(d_in, experts.len(), k, cfg.gate_mode, cfg.gate_noise)?;
    MokLayer::new(gate, experts)
}

/// `Dropout(BN(h + MoK(h)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MokBlock {
    pub mok: MokLayer,
    pub bn: BatchNorm1d,
    pub dropout: Dropout,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    mok: MokCache,
    bn: BatchNormCache,
    dropout: DropoutCache,
}

impl MokBlock {
    pub fn new(mok: MokLayer, dropout: f64) -> Result<Self> {
        if mok.d_in() != mok.d_out() {
            return Err(Error::config(format!(
                "a residual block needs a square MoK layer, got {}->{}",
                mok.d_in(),
                mok.d_out()
            )));
        }
        let d = mok.d_in();
        Ok(Self {
            mok,
            bn: BatchNorm1d::new(d),
            dropout: Dropout::new(dropout)?,
        })
    }

    pub fn forward(
        &mut self,
        h: &Tensor,
        mode: Mode,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(Tensor, GateDecision, BlockCache)> {
        let (m, decision, mok) = self.mok.forward(h, mode, rng.as_deref_mut())?;
        let sum = h.add(&m)?;
        let (normed, bn) = self.bn.forward(&sum, mode)?;
        let (out, dropout) = self.dropout.forward(&normed, mode, rng)?;
        Ok((out, decision, BlockCache { mok, bn, dropout }))
    }

    pub fn backward(&mut self, cache: &BlockCache, d_out: &Tensor, d_loads: Option<&Tensor>) -> Result<Tensor> {
        let d_normed = self.dropout.backward(&cache.dropout, d_out)?;
        let g = self.bn.backward(&cache.bn, &d_normed)?;
        self.bn.accumulate(&g)?;
        let d_sum = g.d_input;
        let mut d_h = self.mok.backward(&cache.mok, &d_sum, d_loads)?;
        d_h.add_assign(&d_sum)?;
        Ok(d_h)
    }
}

impl Parameters for MokBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.mok.params(&join(prefix, "mok"), out);
        self.bn.params(&join(prefix, "bn"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.mok.params_mut(&join(prefix, "mok"), out);
        self.bn.params_mut(&join(prefix, "bn"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmkModel {
    pub config: MmkConfig,
    pub revin: RevIn,
    pub embed: MokLayer,
    pub blocks: Vec<MokBlock>,
    pub head: Option<MokLayer>,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    x: Tensor,
    stats: Option<RevInStats>,
    embed: MokCache,
    blocks: Vec<BlockCache>,
    head: Option<MokCache>,
    /// Head output before the inverse normalisation, `[B, P, C]`.
    pre_denorm: Tensor,
}

/// Pre-sampling record for one KAN expert.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPresample {
    pub layer: String,
    pub expert: usize,
    pub var_input: f64,
    pub var_base: f64,
    /// Variance `w_b` was drawn with; `None` when the layer was skipped.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PresampleStats {
    pub layers: Vec<LayerPresample>,
}

/// `[B, T, C]` → `[B·C, T]`, row `b·C + c` holding variable `c` of sample `b`.
pub fn to_rows(x: &Tensor) -> Result<Tensor> {
    let (b, t, c) = dims3(x)?;
    let mut out = Tensor::zeros(&[b * c, t]);
    let src = x.data();
    let dst = out.data_mut();
    for s in 0..b {
        for k in 0..t {
            for v in 0..c {
                dst[(s * c + v) * t + k] = src[(s * t + k) * c + v];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`to_rows`].
pub fn from_rows(rows: &Tensor, b: usize, c: usize) -> Result<Tensor> {
    let (n, t) = rows.dims2()?;
    if n != b * c {
        return Err(Error::dim(format!("{n} rows cannot be split into {b} x {c}")));
    }
    let mut out = Tensor::zeros(&[b, t, c]);
    let src = rows.data();
    let dst = out.data_mut();
    for s in 0..b {
        for k in 0..t {
            for v in 0..c {
                dst[(s * t + k) * c + v] = src[(s * c + v) * t + k];
            }
        }
    }
    Ok(out)
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [b, t, c] => Ok((b, t, c)),
        _ => Err(Error::dim(format!("expected [B, T, C], got {:?}", x.shape()))),
    }
}

impl MmkModel {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: MmkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed).fork(0x1417);
        let (t, p, d) = (config.lookback, config.horizon, config.hidden_dim);
        let revin = RevIn::new(config.n_vars);
        if config.single_layer {
            let embed = build_mok(t, p, &config, &mut rng)?;
            return Ok(Self {
                config,
                revin,
                embed,
                blocks: Vec::new(),
                head: None,
            });
        }
        let embed = build_mok(t, d, &config, &mut rng)?;
        let blocks = (0..config.n_blocks)
            .map(|_| MokBlock::new(build_mok(d, d, &config, &mut rng)?, config.dropout))
            .collect::<Result<Vec<_>>>()?;
        let head = Some(build_mok(d, p, &config, &mut rng)?);
        Ok(Self {
            config,
            revin,
            embed,
            blocks,
            head,
        })
    }

    /// Number of MoK layers, i.e. the number of gate decisions per forward.
    pub fn n_mok_layers(&self) -> usize {
        1 + self.blocks.len() + usize::from(self.head.is_some())
    }

    pub fn mok_layer_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        names.extend((0..self.blocks.len()).map(|i| format!("block{i}")));
        if self.head.is_some() {
            names.push("head".to_string());
        }
        names
    }

    pub fn mok_layers(&self) -> Vec<&MokLayer> {
        let mut out = vec![&self.embed];
        out.extend(self.blocks.iter().map(|b| &b.mok));
        out.extend(self.head.iter());
        out
    }

    pub fn mok_layers_mut(&mut self) -> Vec<&mut MokLayer> {
        let mut out = vec![&mut self.embed];
        out.extend(self.blocks.iter_mut().map(|b| &mut b.mok));
        out.extend(self.head.iter_mut());
        out
    }

    /// Forward pass. Returns `[B, P, C]` predictions and one gate decision
    /// per MoK layer, front to back.
    pub fn forward(
        &mut self,
        x: &Tensor,
        mode: Mode,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(Tensor, Vec<GateDecision>, ModelCache)> {
        let (b, t, c) = dims3(x)?;
        if t != self.config.lookback || c != self.config.n_vars {
            return Err(Error::dim(format!(
                "model expects [B, {}, {}], got {:?}",
                self.config.lookback,
                self.config.n_vars,
                x.shape()
            )));
        }
        let (rows, stats) = if self.config.revin {
            let (xn, stats) = self.revin.normalize(x)?;
            (to_rows(&xn)?, Some(stats))
        } else {
            (to_rows(x)?, None)
        };
        let mut decisions = Vec::with_capacity(self.n_mok_layers());
        let (mut h, dec, embed) = self.embed.forward(&rows, mode, rng.as_deref_mut())?;
        decisions.push(dec);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (out, dec, cache) = block.forward(&h, mode, rng.as_deref_mut())?;
            decisions.push(dec);
            blocks.push(cache);
            h = out;
        }
        let head = match &self.head {
            Some(layer) => {
                let (out, dec, cache) = layer.forward(&h, mode, rng.as_deref_mut())?;
                decisions.push(dec);
                h = out;
                Some(cache)
            }
            None => None,
        };
        let pre_denorm = from_rows(&h, b, c)?;
        let y = match &stats {
            Some(st) => self.revin.denormalize(&pre_denorm, st)?,
            None => pre_denorm.clone(),
        };
        let cache = ModelCache {
            x: x.clone(),
            stats,
            embed,
            blocks,
            head,
            pre_denorm,
        };
        Ok((y, decisions, cache))
    }

    /// The `[B·C, T]` rows the embedding layer sees for `x`.
    pub fn input_rows(&self, x: &Tensor) -> Result<Tensor> {
        dims3(x)?;
        if !self.config.revin {
            return to_rows(x);
        }
        to_rows(&self.revin.normalize(x)?.0)
    }

    /// Eval-mode prediction.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval, None)?.0)
    }

    /// Accumulates every parameter gradient for the cotangent `d_y` on the
    /// predictions and optional cotangents on each MoK layer's loads.
    /// Returns the input cotangent.
    pub fn backward(&mut self, cache: &ModelCache, d_y: &Tensor, d_loads: Option<&[Tensor]>) -> Result<Tensor> {
        if let Some(dl) = d_loads {
            if dl.len() != self.n_mok_layers() {
                return Err(Error::contract(format!(
                    "{} load cotangents for {} MoK layers",
                    dl.len(),
                    self.n_mok_layers()
                )));
            }
        }
        let load = |i: usize| d_loads.map(|dl| &dl[i]);
        let (b, _, c) = dims3(&cache.x)?;
        let (d_pre, stat_grads) = match &cache.stats {
            Some(st) => {
                let (d, sg) = self.revin.denormalize_backward(&cache.pre_denorm, st, d_y)?;
                (d, Some(sg))
            }
            None => (d_y.clone(), None),
        };
        let mut d_h = to_rows(&d_pre)?;
        let mut idx = self.n_mok_layers() - 1;
        if let (Some(layer), Some(hc)) = (self.head.as_mut(), cache.head.as_ref()) {
            d_h = layer.backward(hc, &d_h, load(idx))?;
            idx -= 1;
        }
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d_h = block.backward(bc, &d_h, load(idx))?;
            idx -= 1;
        }
        let d_rows = self.embed.backward(&cache.embed, &d_h, load(0))?;
        let d_xn = from_rows(&d_rows, b, c)?;
        match (&cache.stats, stat_grads) {
            (Some(st), Some(sg)) => self.revin.normalize_backward(&cache.x, st, &d_xn, Some(&sg)),
            _ => Ok(d_xn),
        }
    }

    /// Pins every gate to the selections in `decisions` (one per MoK layer).
    pub fn freeze_routing(&mut self, decisions: &[GateDecision]) -> Result<()> {
        if decisions.len() != self.n_mok_layers() {
            return Err(Error::contract(
                "one decision per MoK layer is required to freeze routing",
            ));
        }
        for (layer, d) in self.mok_layers_mut().into_iter().zip(decisions) {
            layer.gate.freeze(d.topk.clone());
        }
        Ok(())
    }

    pub fn unfreeze_routing(&mut self) {
        for layer in self.mok_layers_mut() {
            layer.gate.unfreeze();
        }
    }

    /// Restores parameter constraints after an optimiser step.
    pub fn project(&mut self) {
        for layer in self.mok_layers_mut() {
            layer.project();
        }
    }

    /// Non-learnable state saved with the parameters.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("block{i}.bn.running_var"), &b.bn.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("block{i}.bn.running_var"), &mut b.bn.running_var));
        }
        out
    }

    /// Re-draws `w_b` of every targeted KAN expert from the activation
    /// statistics of `batches` (each `[B, T, C]`), front to back, so each
    /// layer sees inputs produced by the already re-initialised layers
    /// before it. Activations are taken in eval mode.
    pub fn presample_init(&mut self, batches: &[Tensor], rng: &mut SeededRng) -> Result<PresampleStats> {
        let mode = self.config.presample;
        let mut stats = PresampleStats::default();
        if mode == PresampleMode::Off {
            return Ok(stats);
        }
        if batches.is_empty() {
            return Err(Error::domain("pre-sampling needs at least one batch"));
        }
        let mut acts = batches.iter().map(|x| self.input_rows(x)).collect::<Result<Vec<_>>>()?;
        let names = self.mok_layer_names();
        let n_layers = names.len();
        let scope = self.config.presample_scope;
        for (li, name) in names.iter().enumerate() {
            let targeted = scope == PresampleScope::All || li + 1 == n_layers;
            if targeted {
                let layer = self.mok_layer_mut(li);
                presample_layer(layer, name, &acts, mode, rng, &mut stats)?;
            }
            if li + 1 == n_layers {
                break;
            }
            for a in acts.iter_mut() {
                *a = self.advance(li, a)?;
            }
        }
        Ok(stats)
    }

    fn mok_layer_mut(&mut self, i: usize) -> &mut MokLayer {
        self.mok_layers_mut().swap_remove(i)
    }

    /// Eval-mode output of MoK layer `i` (with its block wrapper).
    fn advance(&mut self, i: usize, h: &Tensor) -> Result<Tensor> {
        if i == 0 {
            return Ok(self.embed.forward(h, Mode::Eval, None)?.0);
        }
        if let Some(block) = self.blocks.get_mut(i - 1) {
            return Ok(block.forward(h, Mode::Eval, None)?.0);
        }
        match &self.head {
            Some(head) => Ok(head.forward(h, Mode::Eval, None)?.0),
            None => Err(Error::contract(format!("no MoK layer {i}"))),
        }
    }
}

fn presample_layer(
    layer: &mut MokLayer,
    name: &str,
    acts: &[Tensor],
    mode: PresampleMode,
    rng: &mut SeededRng,
    stats: &mut PresampleStats,
) -> Result<()> {
    let mut input = Moments::default();
    for a in acts {
        input.merge(&Moments::from_slice(a.data()));
    }
    let var_input = input.variance();
    if !(var_input > 0.0) {
        return Err(Error::domain(format!(
            "pre-sampling: input of `{name}` has zero variance; the data are degenerate"
        )));
    }
    for (e, expert) in layer.experts.iter_mut().enumerate() {
        let Some(kan) = expert.as_kan_mut() else { continue };
        let mut base = Moments::default();
        for a in acts {
            base.merge(&kan.base_output_moments(a)?);
        }
        let var_base = base.variance();
        let ratio = if var_base > 0.0 {
            let r = match mode {
                PresampleMode::AsWritten => var_base / var_input,
                PresampleMode::VariancePreserving => var_input / var_base,
                PresampleMode::Off => unreachable!(),
            };
            let w_b = rng.normal_tensor(kan.w_b.value.shape(), 0.0, r.sqrt())?;
            kan.set_w_b(w_b)?;
            Some(r)
        } else {
            warn!("pre-sampling: base output of {name} expert {e} has zero variance; layer left unchanged");
            None
        };
        stats.layers.push(LayerPresample {
            layer: name.to_string(),
            expert: e,
            var_input,
            var_base,
            ratio,
        });
    }
    Ok(())
}

impl Parameters for MmkModel {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.revin.params(&join(prefix, "revin"), out);
        self.embed.params(&join(prefix, "embed"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(prefix, &format!("block{i}")), out);
        }
        if let Some(h) = &self.head {
            h.params(&join(prefix, "head"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.revin.params_mut(&join(prefix, "revin"), out);
        self.embed.params_mut(&join(prefix, "embed"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("block{i}")), out);
        }
        if let Some(h) = &mut self.head {
            h.params_mut(&join(prefix, "head"), out);
        }
    }
}
