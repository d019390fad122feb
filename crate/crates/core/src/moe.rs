//! Gating networks, the mixture-of-KAN layer and the load-balancing loss.
//!
//! A [`MokLayer`] routes every input row through a gating network, evaluates
//! each expert only on the rows it received, and combines the expert
//! outputs with the gate weights. Gate logits are `x·w_g`; in sparse mode a
//! noise term built from `softplus(x·w_noise)` is added and all but the `k`
//! largest logits are masked before the softmax.

use crate::basis::sigmoid;
use crate::error::{Error, Result};
use crate::layers::{
    join, next_version, KanCache, KanLayer, KanVariant, LayerGrads, Linear, LinearCache, Mode, Param, Parameters,
};
use crate::rng::SeededRng;
use crate::tensor::{gemm, softmax_in_place, Tensor, Trans};

/// Variance floor of the per-row standardisation in [`GateNoise::Literal`].
pub const GATE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Dense softmax over all experts.
    Softmax,
    /// Noisy top-k.
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateNoise {
    /// `ε ⊙ softplus(x·w_noise)` with `ε ~ N(0, 1)`, train mode only.
    Gaussian,
    /// Row-wise standardisation of `softplus(x·w_noise)`, deterministic and
    /// applied in both modes.
    Literal,
}

impl GateMode {
    pub fn name(self) -> &'static str {
        match self {
            GateMode::Softmax => "softmax",
            GateMode::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(GateMode::Softmax),
            "sparse" => Some(GateMode::Sparse),
            _ => None,
        }
    }
}

impl GateNoise {
    pub fn name(self) -> &'static str {
        match self {
            GateNoise::Gaussian => "gaussian",
            GateNoise::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(GateNoise::Gaussian),
            "literal" => Some(GateNoise::Literal),
            _ => None,
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gating {
    /// `[d_in, N]`
    pub w_g: Param,
    /// `[d_in, N]`
    pub w_noise: Param,
    k: usize,
    mode: GateMode,
    noise: GateNoise,
    /// Forced expert selection, `[rows, k]` row-major.
    frozen: Option<Vec<usize>>,
    version: u64,
}

/// Routing outcome for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// `[rows, N]`, each row sums to one.
    pub weights: Tensor,
    /// Selected experts per row in descending logit order, `[rows, k]`
    /// row-major. In softmax mode every expert is selected.
    pub topk: Vec<usize>,
    pub k: usize,
    /// Column sums of `weights`, `[N]`.
    pub loads: Tensor,
}

impl GateDecision {
    pub fn rows(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn n_experts(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn selected(&self, row: usize) -> &[usize] {
        &self.topk[row * self.k..(row + 1) * self.k]
    }

    /// Expert with the largest weight for `row`.
    pub fn top1(&self, row: usize) -> usize {
        self.selected(row)[0]
    }
}

#[derive(Clone, Debug)]
struct GateCache {
    x: Tensor,
    weights: Tensor,
    /// `x·w_noise` when the noise path was active.
    pre_noise: Option<Tensor>,
    /// Gaussian draws (Gaussian noise) or the standardised softplus values
    /// (literal noise).
    noise: Option<Tensor>,
    /// Per-row standard deviation of the softplus values (literal noise).
    noise_std: Option<Vec<f64>>,
    version: u64,
}

impl Gating {
    /// Zero-initialised gate.
    pub fn new(d_in: usize, n_experts: usize, k: usize, mode: GateMode, noise: GateNoise) -> Result<Self> {
        Self::from_params(
            Tensor::zeros(&[d_in, n_experts]),
            Tensor::zeros(&[d_in, n_experts]),
            k,
            mode,
            noise,
        )
    }

    pub fn from_params(w_g: Tensor, w_noise: Tensor, k: usize, mode: GateMode, noise: GateNoise) -> Result<Self> {
        let (_, n) = w_g.dims2()?;
        w_noise.expect_shape(w_g.shape())?;
        if n == 0 {
            return Err(Error::config("a gate needs at least one expert"));
        }
        if k == 0 || k > n {
            return Err(Error::config(format!("top-k must be in 1..={n}, got {k}")));
        }
        Ok(Self {
            w_g: Param::new(w_g),
            w_noise: Param::new(w_noise),
            k,
            mode,
            noise,
            frozen: None,
            version: next_version(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_g.value.dim(0)
    }

    pub fn n_experts(&self) -> usize {
        self.w_g.value.dim(1)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn noise(&self) -> GateNoise {
        self.noise
    }

    /// Number of experts selected per row.
    pub fn active_k(&self) -> usize {
        match self.mode {
            GateMode::Softmax => self.n_experts(),
            GateMode::Sparse => self.k,
        }
    }

    /// Forces the expert selection to `topk` (`[rows, active_k]`) for
    /// subsequent forwards, e.g. to hold routing fixed under perturbation.
    pub fn freeze(&mut self, topk: Vec<usize>) {
        self.frozen = Some(topk);
    }

    pub fn unfreeze(&mut self) {
        self.frozen = None;
    }

    fn forward(&self, x: &Tensor, mode: Mode, rng: Option<&mut SeededRng>) -> Result<(GateDecision, GateCache)> {
        let (rows, d_in) = x.dims2()?;
        if d_in != self.d_in() {
            return Err(Error::dim(format!("gate expects {} inputs, got {d_in}", self.d_in())));
        }
        let n = self.n_experts();
        let mut logits = Tensor::zeros(&[rows, n]);
        gemm(x, Trans::No, &self.w_g.value, Trans::No, &mut logits, false)?;
        let (mut pre_noise, mut noise, mut noise_std) = (None, None, None);
        if self.mode == GateMode::Sparse {
            match (self.noise, mode) {
                (GateNoise::Gaussian, Mode::Train) => {
                    let rng = rng.ok_or_else(|| Error::config("noisy gate in train mode needs a random stream"))?;
                    let mut pre = Tensor::zeros(&[rows, n]);
                    gemm(x, Trans::No, &self.w_noise.value, Trans::No, &mut pre, false)?;
                    let eps = rng.normal_tensor(&[rows, n], 0.0, 1.0)?;
                    for ((h, &p), &e) in logits.data_mut().iter_mut().zip(pre.data()).zip(eps.data()) {
                        *h += e * softplus(p);
                    }
                    pre_noise = Some(pre);
                    noise = Some(eps);
                }
                (GateNoise::Gaussian, Mode::Eval) => {}
                (GateNoise::Literal, _) => {
                    let mut pre = Tensor::zeros(&[rows, n]);
                    gemm(x, Trans::No, &self.w_noise.value, Trans::No, &mut pre, false)?;
                    let mut z = pre.map(softplus);
                    let mut stds = Vec::with_capacity(rows);
                    for r in 0..rows {
                        let row = z.row_mut(r);
                        let m = row.iter().sum::<f64>() / n as f64;
                        let v = row.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / n as f64;
                        let sd = (v + GATE_NORM_EPS).sqrt();
                        row.iter_mut().for_each(|s| *s = (*s - m) / sd);
                        stds.push(sd);
                    }
                    for (h, zv) in logits.data_mut().iter_mut().zip(z.data()) {
                        *h += zv;
                    }
                    pre_noise = Some(pre);
                    noise = Some(z);
                    noise_std = Some(stds);
                }
            }
        }

        let k = self.active_k();
        if let Some(f) = &self.frozen {
            if f.len() != rows * k {
                return Err(Error::contract(format!(
                    "frozen routing has {} entries, batch needs {}",
                    f.len(),
                    rows * k
                )));
            }
        }
        let mut topk = Vec::with_capacity(rows * k);
        let mut weights = Tensor::zeros(&[rows, n]);
        let mut order: Vec<usize> = (0..n).collect();
        for r in 0..rows {
            let h = logits.row(r);
            let chosen: &[usize] = match &self.frozen {
                Some(f) => &f[r * k..(r + 1) * k],
                None => {
                    order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
                    // stable sort keeps the lower index first on ties
                    order.sort_by(|&a, &b| h[b].partial_cmp(&h[a]).unwrap_or(std::cmp::Ordering::Equal));
                    &order[..k]
                }
            };
            let wrow = weights.row_mut(r);
            wrow.fill(f64::NEG_INFINITY);
            for &e in chosen {
                wrow[e] = h[e];
            }
            softmax_in_place(wrow);
            topk.extend_from_slice(chosen);
        }
        weights.ensure_finite("gate weights")?;
        let mut loads = Tensor::zeros(&[n]);
        for r in 0..rows {
            for (l, w) in loads.data_mut().iter_mut().zip(weights.row(r)) {
                *l += w;
            }
        }
        let decision = GateDecision {
            weights: weights.clone(),
            topk,
            k,
            loads,
        };
        let cache = GateCache {
            x: x.clone(),
            weights,
            pre_noise,
            noise,
            noise_std,
            version: self.version,
        };
        Ok((decision, cache))
    }

    /// Returns `(d_x, d_w_g, d_w_noise)` for a cotangent on the weights.
    fn backward(&self, cache: &GateCache, d_weights: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        if cache.version != self.version {
            return Err(Error::contract("gate backward called with a stale cache"));
        }
        let (rows, n) = cache.weights.dims2()?;
        d_weights.expect_shape(&[rows, n])?;
        // softmax over the surviving logits; masked entries have zero weight
        // and therefore receive zero gradient
        let mut d_h = Tensor::zeros(&[rows, n]);
        for r in 0..rows {
            let w = cache.weights.row(r);
            let g = d_weights.row(r);
            let dot: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
            for (e, dh) in d_h.row_mut(r).iter_mut().enumerate() {
                *dh = w[e] * (g[e] - dot);
            }
        }
        let mut d_wg = Tensor::zeros(self.w_g.value.shape());
        gemm(&cache.x, Trans::Yes, &d_h, Trans::No, &mut d_wg, false)?;
        let mut d_x = Tensor::zeros(cache.x.shape());
        gemm(&d_h, Trans::No, &self.w_g.value, Trans::Yes, &mut d_x, false)?;
        let mut d_wn = Tensor::zeros(self.w_noise.value.shape());
        if let (Some(pre), Some(noise)) = (&cache.pre_noise, &cache.noise) {
            let mut d_pre = Tensor::zeros(&[rows, n]);
            match &cache.noise_std {
                None => {
                    for (((dp, &dh), &e), &p) in d_pre
                        .data_mut()
                        .iter_mut()
                        .zip(d_h.data())
                        .zip(noise.data())
                        .zip(pre.data())
                    {
                        *dp = dh * e * sigmoid(p);
                    }
                }
                Some(stds) => {
                    for r in 0..rows {
                        let dz = d_h.row(r);
                        let z = noise.row(r);
                        let mean_g = dz.iter().sum::<f64>() / n as f64;
                        let mean_gz = dz.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for e in 0..n {
                            let d_sp = (dz[e] - mean_g - z[e] * mean_gz) / stds[r];
                            d_pre.data_mut()[r * n + e] = d_sp * sigmoid(pre.data()[r * n + e]);
                        }
                    }
                }
            }
            gemm(&cache.x, Trans::Yes, &d_pre, Trans::No, &mut d_wn, false)?;
            gemm(&d_pre, Trans::No, &self.w_noise.value, Trans::Yes, &mut d_x, true)?;
        }
        Ok((d_x, d_wg, d_wn))
    }
}

impl Parameters for Gating {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "w_g"), &self.w_g));
        out.push((join(prefix, "w_noise"), &self.w_noise));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.version = next_version();
        out.push((join(prefix, "w_g"), &mut self.w_g));
        out.push((join(prefix, "w_noise"), &mut self.w_noise));
    }
}

/// Expert family selectable in a mixture layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertKind {
    Kan(KanVariant),
    Linear,
}

impl ExpertKind {
    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Kan(v) => v.name(),
            ExpertKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "linear" {
            return Some(ExpertKind::Linear);
        }
        KanVariant::parse(s).map(ExpertKind::Kan)
    }

    /// Parses a comma-separated roster such as `bspline,jacobi,taylor,wavelet`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let list: Vec<Self> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| Self::parse(t).ok_or_else(|| Error::config(format!("unknown expert kind `{t}`"))))
            .collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(Error::config("expert roster is empty"));
        }
        Ok(list)
    }

    /// One expert of each KAN family used by the default roster.
    pub fn default_roster() -> Vec<Self> {
        vec![
            ExpertKind::Kan(KanVariant::BSpline),
            ExpertKind::Kan(KanVariant::Jacobi),
            ExpertKind::Kan(KanVariant::Taylor),
            ExpertKind::Kan(KanVariant::Wavelet),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expert {
    Kan(KanLayer),
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub enum ExpertCache {
    Kan(KanCache),
    Linear(LinearCache),
}

impl Expert {
    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::Kan(k) => ExpertKind::Kan(k.variant()),
            Expert::Linear(_) => ExpertKind::Linear,
        }
    }

    pub fn n_in(&self) -> usize {
        match self {
            Expert::Kan(k) => k.n_in(),
            Expert::Linear(l) => l.n_in(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Expert::Kan(k) => k.n_out(),
            Expert::Linear(l) => l.n_out(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ExpertCache)> {
        Ok(match self {
            Expert::Kan(k) => {
                let (y, c) = k.forward(x)?;
                (y, ExpertCache::Kan(c))
            }
            Expert::Linear(l) => {
                let (y, c) = l.forward(x)?;
                (y, ExpertCache::Linear(c))
            }
        })
    }

    pub fn backward(&self, cache: &ExpertCache, d_y: &Tensor) -> Result<LayerGrads> {
        match (self, cache) {
            (Expert::Kan(k), ExpertCache::Kan(c)) => k.backward(c, d_y),
            (Expert::Linear(l), ExpertCache::Linear(c)) => l.backward(c, d_y),
            _ => Err(Error::contract("expert cache belongs to a different expert type")),
        }
    }

    pub fn accumulate(&mut self, grads: &LayerGrads) -> Result<()> {
        match self {
            Expert::Kan(k) => k.accumulate(grads),
            Expert::Linear(l) => l.accumulate(grads),
        }
    }

    pub fn as_kan(&self) -> Option<&KanLayer> {
        match self {
            Expert::Kan(k) => Some(k),
            Expert::Linear(_) => None,
        }
    }

    pub fn as_kan_mut(&mut self) -> Option<&mut KanLayer> {
        match self {
            Expert::Kan(k) => Some(k),
            Expert::Linear(_) => None,
        }
    }
}

impl Parameters for Expert {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Expert::Kan(k) => k.params(prefix, out),
            Expert::Linear(l) => l.params(prefix, out),
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Expert::Kan(k) => k.params_mut(prefix, out),
            Expert::Linear(l) => l.params_mut(prefix, out),
        }
    }
}

/// Mixture-of-experts layer: `y = Σ_e G(x)_e · K_e(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MokLayer {
    pub gate: Gating,
    pub experts: Vec<Expert>,
}

/// Per-expert dispatch record: which rows went to the expert, what it
/// returned and its own cache.
#[derive(Clone, Debug)]
struct Dispatch {
    rows: Vec<usize>,
    out: Tensor,
    cache: ExpertCache,
}

#[derive(Clone, Debug)]
pub struct MokCache {
    gate: GateCache,
    dispatch: Vec<Option<Dispatch>>,
}

impl MokLayer {
    pub fn new(gate: Gating, experts: Vec<Expert>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::config("a MoK layer needs at least one expert"))?;
        let (d_in, d_out) = (first.n_in(), first.n_out());
        for (i, e) in experts.iter().enumerate() {
            if e.n_in() != d_in || e.n_out() != d_out {
                return Err(Error::config(format!(
                    "expert {i} maps {}->{} but expert 0 maps {d_in}->{d_out}",
                    e.n_in(),
                    e.n_out()
                )));
            }
        }
        if gate.d_in() != d_in || gate.n_experts() != experts.len() {
            return Err(Error::config(format!(
                "gate is [{}, {}] for {} experts with {d_in} inputs",
                gate.d_in(),
                gate.n_experts(),
                experts.len()
            )));
        }
        Ok(Self { gate, experts })
    }

    pub fn d_in(&self) -> usize {
        self.experts[0].n_in()
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].n_out()
    }

    /// Routes `x`, runs each expert on its rows only, and mixes the results.
    pub fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: Option<&mut SeededRng>,
    ) -> Result<(Tensor, GateDecision, MokCache)> {
        let (decision, gate_cache) = self.gate.forward(x, mode, rng)?;
        let rows = x.dim(0);
        let n = self.experts.len();
        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
        for r in 0..rows {
            for &e in decision.selected(r) {
                if decision.weights.get2(r, e) > 0.0 {
                    routed[e].push(r);
                }
            }
        }
        let d_out = self.d_out();
        let mut y = Tensor::zeros(&[rows, d_out]);
        let mut dispatch = Vec::with_capacity(n);
        for (e, rows_e) in routed.into_iter().enumerate() {
            if rows_e.is_empty() {
                dispatch.push(None);
                continue;
            }
            let xe = x.gather_rows(&rows_e);
            let (out, cache) = self.experts[e].forward(&xe)?;
            for (k, &r) in rows_e.iter().enumerate() {
                let w = decision.weights.get2(r, e);
                for (acc, v) in y.row_mut(r).iter_mut().zip(out.row(k)) {
                    *acc += w * v;
                }
            }
            dispatch.push(Some(Dispatch {
                rows: rows_e,
                out,
                cache,
            }));
        }
        Ok((
            y,
            decision,
            MokCache {
                gate: gate_cache,
                dispatch,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input cotangent.
    /// `d_loads` is the cotangent of the per-expert loads (from the
    /// load-balancing term), if any.
    pub fn backward(&mut self, cache: &MokCache, d_y: &Tensor, d_loads: Option<&Tensor>) -> Result<Tensor> {
        let rows = cache.gate.x.dim(0);
        let n = self.experts.len();
        d_y.expect_shape(&[rows, self.d_out()])?;
        let mut d_w = Tensor::zeros(&[rows, n]);
        if let Some(dl) = d_loads {
            dl.expect_shape(&[n])?;
            for r in 0..rows {
                d_w.row_mut(r).copy_from_slice(dl.data());
            }
        }
        let mut d_x = Tensor::zeros(&[rows, self.d_in()]);
        for (e, slot) in cache.dispatch.iter().enumerate() {
            let Some(dispatch) = slot else { continue };
            let mut d_out = Tensor::zeros(dispatch.out.shape());
            for (k, &r) in dispatch.rows.iter().enumerate() {
                let w = cache.gate.weights.get2(r, e);
                let g = d_y.row(r);
                let dot: f64 = g.iter().zip(dispatch.out.row(k)).map(|(a, b)| a * b).sum();
                d_w.data_mut()[r * n + e] += dot;
                for (o, gv) in d_out.row_mut(k).iter_mut().zip(g) {
                    *o = w * gv;
                }
            }
            let grads = self.experts[e].backward(&dispatch.cache, &d_out)?;
            for (k, &r) in dispatch.rows.iter().enumerate() {
                for (acc, v) in d_x.row_mut(r).iter_mut().zip(grads.d_input.row(k)) {
                    *acc += v;
                }
            }
            self.experts[e].accumulate(&grads)?;
        }
        let (d_x_gate, d_wg, d_wn) = self.gate.backward(&cache.gate, &d_w)?;
        d_x.add_assign(&d_x_gate)?;
        self.gate.w_g.grad.add_assign(&d_wg)?;
        self.gate.w_noise.grad.add_assign(&d_wn)?;
        Ok(d_x)
    }

    pub fn project(&mut self) {
        for e in &mut self.experts {
            if let Expert::Kan(k) = e {
                k.project();
            }
        }
    }
}

impl Parameters for MokLayer {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.gate.params(&join(prefix, "gate"), out);
        for (i, e) in self.experts.iter().enumerate() {
            e.params(&join(prefix, &format!("expert{i}.{}", e.kind().name())), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.gate.params_mut(&join(prefix, "gate"), out);
        for (i, e) in self.experts.iter_mut().enumerate() {
            let name = join(prefix, &format!("expert{i}.{}", e.kind().name()));
            e.params_mut(&name, out);
        }
    }
}

/// Squared coefficient of variation of the loads, `var/mean²` with the
/// population variance, and its gradient.
pub fn load_balance_loss(loads: &Tensor) -> Result<(f64, Tensor)> {
    let n = loads.len();
    if n == 0 {
        return Err(Error::domain("no loads to balance"));
    }
    let nf = n as f64;
    let mean = loads.sum() / nf;
    if !(mean > 0.0) {
        return Err(Error::domain(format!(
            "load balancing needs a positive mean load, got {mean}"
        )));
    }
    let var = loads.data().iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / nf;
    let loss = var / (mean * mean);
    let grad = loads.map(|l| 2.0 * (l - mean) / (nf * mean * mean) - 2.0 * var / (nf * mean * mean * mean));
    Ok((loss, grad))
}
