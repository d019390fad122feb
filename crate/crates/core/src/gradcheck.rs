//! Central finite-difference verification of analytic gradients.
//!
//! A subject maps an input tensor to a scalar loss and can produce the
//! analytic gradient of that loss with respect to its input and all of its
//! parameters. For single layers the loss is `Σ r ⊙ y` with a fixed random
//! cotangent `r`.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::batchnorm::BatchNormCache;
use crate::layers::{BatchNorm1d, KanLayer, Linear, Mode, Param, Parameters, RevIn};
use crate::moe::MokLayer;
use crate::rng::SeededRng;
use crate::tensor::{gemm, Tensor, Trans};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for the relative error. Below it the comparison is in
/// effect absolute (`|a - fd| < tol * floor`), which keeps gradients that are
/// tiny next to the loss from failing on finite-difference round-off.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Something whose gradients can be checked.
pub trait GradSubject {
    /// Loss at `x` with the current parameters.
    fn loss(&mut self, x: &Tensor) -> Result<f64>;
    /// Zeroes, then fills every parameter gradient and returns the input
    /// gradient (`None` when the input is not differentiable).
    fn loss_and_grads(&mut self, x: &Tensor) -> Result<(f64, Option<Tensor>)>;
    fn named_params(&mut self) -> Vec<(String, &mut Param)>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries: Option<usize>,
    /// Parameter whose analytic gradient is deliberately perturbed; used to
    /// confirm the harness can fail.
    pub corrupt: Option<String>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(tolerance: f64) -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance,
            max_entries: None,
            corrupt: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !(t.max_rel_err < self.tolerance))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(
            f,
            "{verdict} {} max_rel_err={:.3e} tol={:.0e}",
            self.label,
            self.max_rel_err(),
            self.tolerance
        )?;
        for t in &self.tensors {
            let mark = if t.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            write!(
                f,
                "  {mark:<4} {:<40} n={:<5} max_rel_err={:.3e}",
                t.name, t.checked, t.max_rel_err
            )?;
            if let (Some((i, a, n)), "FAIL") = (t.worst, mark) {
                write!(f, " at [{i}] analytic={a:.6e} numeric={n:.6e}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn pick(len: usize, max: Option<usize>, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(m) = max {
        if m < len {
            rng.shuffle(&mut idx);
            idx.truncate(m);
            idx.sort_unstable();
        }
    }
    idx
}

fn record(name: String, entries: &[(usize, f64, f64)]) -> TensorCheck {
    let mut out = TensorCheck {
        name,
        checked: entries.len(),
        max_rel_err: 0.0,
        worst: None,
    };
    for &(i, a, n) in entries {
        let e = rel_err(a, n);
        if !(e <= out.max_rel_err) || out.worst.is_none() {
            out.max_rel_err = if e.is_nan() {
                f64::INFINITY
            } else {
                e.max(out.max_rel_err)
            };
            out.worst = Some((i, a, n));
        }
    }
    out
}

/// Compares analytic and central-difference gradients for the input and
/// every parameter of `subject` at `x`.
pub fn check_subject<S: GradSubject + ?Sized>(
    subject: &mut S,
    x: &Tensor,
    label: &str,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut pick_rng = SeededRng::new(opts.seed ^ 0x5eed_cafe);
    let (_, d_x) = subject.loss_and_grads(x)?;
    let mut analytic: Vec<(String, Tensor)> = subject
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();
    if let Some(target) = &opts.corrupt {
        let hit = analytic.iter_mut().find(|(n, _)| n == target);
        let (_, g) = hit.ok_or_else(|| Error::config(format!("no parameter named `{target}` to corrupt")))?;
        *g = g.map(|v| v * 1.5 + 1e-2);
    }
    let h = opts.step;
    let mut tensors = Vec::new();

    if let Some(d_x) = d_x {
        let mut xp = x.clone();
        let mut entries = Vec::new();
        for i in pick(x.len(), opts.max_entries, &mut pick_rng) {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let up = subject.loss(&xp)?;
            xp.data_mut()[i] = orig - h;
            let dn = subject.loss(&xp)?;
            xp.data_mut()[i] = orig;
            entries.push((i, d_x.data()[i], (up - dn) / (2.0 * h)));
        }
        tensors.push(record("input".to_string(), &entries));
    }

    for (k, (name, grad)) in analytic.iter().enumerate() {
        let mut entries = Vec::new();
        for i in pick(grad.len(), opts.max_entries, &mut pick_rng) {
            let orig = subject.named_params()[k].1.value.data()[i];
            subject.named_params()[k].1.value.data_mut()[i] = orig + h;
            let up = subject.loss(x)?;
            subject.named_params()[k].1.value.data_mut()[i] = orig - h;
            let dn = subject.loss(x)?;
            subject.named_params()[k].1.value.data_mut()[i] = orig;
            entries.push((i, grad.data()[i], (up - dn) / (2.0 * h)));
        }
        tensors.push(record(name.clone(), &entries));
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        tolerance: opts.tolerance,
        tensors,
    })
}

/// Layers with a ready-made subject.
#[derive(Clone, Debug)]
pub enum LayerUnderTest {
    Linear(Linear),
    Kan(KanLayer),
    /// `normalize`, a fixed random `[T, horizon]` time map, `denormalize`.
    RevInPair {
        revin: RevIn,
        horizon: usize,
    },
    BatchNorm {
        bn: BatchNorm1d,
        mode: Mode,
    },
    /// Routing is frozen at the selection made for the unperturbed input.
    Mok {
        layer: MokLayer,
        mode: Mode,
    },
}

impl LayerUnderTest {
    pub fn label(&self) -> String {
        match self {
            LayerUnderTest::Linear(_) => "linear".into(),
            LayerUnderTest::Kan(k) => format!("kan/{}", k.variant().name()),
            LayerUnderTest::RevInPair { .. } => "revin-pair".into(),
            LayerUnderTest::BatchNorm { mode, .. } => {
                format!("batchnorm/{}", if *mode == Mode::Train { "train" } else { "eval" })
            }
            LayerUnderTest::Mok { layer, .. } => format!("mok/{}", layer.gate.mode().name()),
        }
    }
}

struct LayerSubject {
    layer: LayerUnderTest,
    cot_seed: u64,
    cotangent: Option<Tensor>,
    time_map: Option<Tensor>,
}

impl LayerSubject {
    fn cotangent(&mut self, shape: &[usize]) -> Result<Tensor> {
        match &self.cotangent {
            Some(r) if r.shape() == shape => Ok(r.clone()),
            _ => {
                let r = SeededRng::new(self.cot_seed).normal_tensor(shape, 0.0, 1.0)?;
                self.cotangent = Some(r.clone());
                Ok(r)
            }
        }
    }

    fn time_map(&mut self, t: usize, p: usize) -> Result<Tensor> {
        if self.time_map.is_none() {
            let scale = 1.0 / (t as f64).sqrt();
            self.time_map = Some(SeededRng::new(self.cot_seed.wrapping_add(1)).normal_tensor(&[t, p], 0.0, scale)?);
        }
        Ok(self.time_map.clone().unwrap())
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Applies `map [T, P]` along the time axis of `[B, T, C]`.
    fn apply_time_map(x: &Tensor, map: &Tensor, transpose: bool) -> Result<Tensor> {
        let (b, t, c) = (x.dim(0), x.dim(1), x.dim(2));
        let (rows, cols) = map.dims2()?;
        let out_t = if transpose { rows } else { cols };
        let mut out = Tensor::zeros(&[b, out_t, c]);
        let tr = if transpose { Trans::No } else { Trans::Yes };
        for s in 0..b {
            let xs = Tensor::new(&[t, c], x.data()[s * t * c..(s + 1) * t * c].to_vec())?;
            let mut ys = Tensor::zeros(&[out_t, c]);
            gemm(map, tr, &xs, Trans::No, &mut ys, false)?;
            out.data_mut()[s * out_t * c..(s + 1) * out_t * c].copy_from_slice(ys.data());
        }
        Ok(out)
    }

    fn run(&mut self, x: &Tensor, grads: bool) -> Result<(f64, Option<Tensor>)> {
        match &mut self.layer {
            LayerUnderTest::Linear(l) => {
                if grads {
                    l.zero_grad();
                }
                let LayerUnderTest::Linear(l) = &self.layer else {
                    unreachable!()
                };
                let (y, cache) = l.forward(x)?;
                let r = self.cotangent(y.shape())?;
                let loss = Self::dot(&r, &y);
                if !grads {
                    return Ok((loss, None));
                }
                let LayerUnderTest::Linear(l) = &mut self.layer else {
                    unreachable!()
                };
                let g = l.backward(&cache, &r)?;
                l.accumulate(&g)?;
                Ok((loss, Some(g.d_input)))
            }
            LayerUnderTest::Kan(k) => {
                if grads {
                    k.zero_grad();
                }
                let LayerUnderTest::Kan(k) = &self.layer else {
                    unreachable!()
                };
                let (y, cache) = k.forward(x)?;
                let r = self.cotangent(y.shape())?;
                let loss = Self::dot(&r, &y);
                if !grads {
                    return Ok((loss, None));
                }
                let LayerUnderTest::Kan(k) = &mut self.layer else {
                    unreachable!()
                };
                let g = k.backward(&cache, &r)?;
                k.accumulate(&g)?;
                Ok((loss, Some(g.d_input)))
            }
            LayerUnderTest::RevInPair { horizon, .. } => {
                let p = *horizon;
                let map = self.time_map(x.dim(1), p)?;
                let LayerUnderTest::RevInPair { revin, .. } = &self.layer else {
                    unreachable!()
                };
                let (xn, stats) = revin.normalize(x)?;
                let mapped = Self::apply_time_map(&xn, &map, false)?;
                let out = revin.denormalize(&mapped, &stats)?;
                let r = self.cotangent(out.shape())?;
                let loss = Self::dot(&r, &out);
                if !grads {
                    return Ok((loss, None));
                }
                let LayerUnderTest::RevInPair { revin, .. } = &mut self.layer else {
                    unreachable!()
                };
                revin.zero_grad();
                let (d_mapped, sg) = revin.denormalize_backward(&mapped, &stats, &r)?;
                let d_xn = Self::apply_time_map(&d_mapped, &map, true)?;
                let d_x = revin.normalize_backward(x, &stats, &d_xn, Some(&sg))?;
                Ok((loss, Some(d_x)))
            }
            LayerUnderTest::BatchNorm { bn, mode } => {
                let mode = *mode;
                // running statistics must not drift between perturbations
                let (rm, rv) = (bn.running_mean.clone(), bn.running_var.clone());
                let (y, cache): (Tensor, BatchNormCache) = bn.forward(x, mode)?;
                bn.running_mean = rm;
                bn.running_var = rv;
                let r = self.cotangent(y.shape())?;
                let loss = Self::dot(&r, &y);
                if !grads {
                    return Ok((loss, None));
                }
                let LayerUnderTest::BatchNorm { bn, .. } = &mut self.layer else {
                    unreachable!()
                };
                bn.zero_grad();
                let g = bn.backward(&cache, &r)?;
                bn.accumulate(&g)?;
                Ok((loss, Some(g.d_input)))
            }
            LayerUnderTest::Mok { mode, .. } => {
                let mode = *mode;
                let LayerUnderTest::Mok { layer, .. } = &mut self.layer else {
                    unreachable!()
                };
                if grads {
                    layer.zero_grad();
                }
                let (y, _, cache) = layer.forward(x, mode, None)?;
                let r = self.cotangent(y.shape())?;
                let loss = Self::dot(&r, &y);
                if !grads {
                    return Ok((loss, None));
                }
                let LayerUnderTest::Mok { layer, .. } = &mut self.layer else {
                    unreachable!()
                };
                let d_x = layer.backward(&cache, &r, None)?;
                Ok((loss, Some(d_x)))
            }
        }
    }
}

impl GradSubject for LayerSubject {
    fn loss(&mut self, x: &Tensor) -> Result<f64> {
        Ok(self.run(x, false)?.0)
    }

    fn loss_and_grads(&mut self, x: &Tensor) -> Result<(f64, Option<Tensor>)> {
        self.run(x, true)
    }

    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        match &mut self.layer {
            LayerUnderTest::Linear(l) => l.params_mut("", &mut out),
            LayerUnderTest::Kan(k) => k.params_mut("", &mut out),
            LayerUnderTest::RevInPair { revin, .. } => revin.params_mut("", &mut out),
            LayerUnderTest::BatchNorm { bn, .. } => bn.params_mut("", &mut out),
            LayerUnderTest::Mok { layer, .. } => layer.params_mut("", &mut out),
        }
        out
    }
}

/// Gradient check of a single layer at `x` with a cotangent drawn from
/// `seed`.
pub fn check_layer(layer: LayerUnderTest, x: Tensor, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut opts = GradCheckOptions::new(tolerance);
    opts.seed = seed;
    check_layer_with(layer, x, &opts)
}

pub fn check_layer_with(mut layer: LayerUnderTest, x: Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if let LayerUnderTest::Mok { layer: mok, mode } = &mut layer {
        mok.gate.unfreeze();
        let (_, decision, _) = mok.forward(&x, *mode, None)?;
        mok.gate.freeze(decision.topk);
    }
    let label = layer.label();
    let mut subject = LayerSubject {
        layer,
        cot_seed: opts.seed,
        cotangent: None,
        time_map: None,
    };
    check_subject(&mut subject, &x, &label, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::kan::KanOptions;
    use crate::layers::KanVariant;
    use crate::moe::{Expert, ExpertKind, GateMode, GateNoise, Gating};

    #[test]
    fn linear_is_exact() {
        let mut rng = SeededRng::new(1);
        let l = Linear::new(4, 3, &mut rng);
        let x = rng.normal_tensor(&[5, 4], 0.0, 1.0).unwrap();
        let report = check_layer(LayerUnderTest::Linear(l), x, 2, 1e-7).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_fails_and_names_the_parameter() {
        let mut rng = SeededRng::new(1);
        let l = Linear::new(4, 3, &mut rng);
        let x = rng.normal_tensor(&[5, 4], 0.0, 1.0).unwrap();
        let mut opts = GradCheckOptions::new(1e-7);
        opts.corrupt = Some("bias".into());
        let report = check_layer_with(LayerUnderTest::Linear(l), x, &opts).unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, ["bias"]);
        assert!(report.to_string().contains("FAIL bias") || report.to_string().contains("bias"));
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((rel_err(1e-7, 2e-7) - 1e-3).abs() < 1e-15);
    }

    fn mok(mode: GateMode, noise: GateNoise, k: usize, rng: &mut SeededRng) -> MokLayer {
        let experts = ExpertKind::default_roster()
            .into_iter()
            .map(|kind| match kind {
                ExpertKind::Kan(v) => Expert::Kan(KanLayer::new(v, 3, 2, &KanOptions::default(), rng).unwrap()),
                ExpertKind::Linear => unreachable!(),
            })
            .collect();
        let gate = Gating::from_params(
            rng.normal_tensor(&[3, 4], 0.0, 1.0).unwrap(),
            rng.normal_tensor(&[3, 4], 0.0, 1.0).unwrap(),
            k,
            mode,
            noise,
        )
        .unwrap();
        MokLayer::new(gate, experts).unwrap()
    }

    #[test]
    fn mok_dense_gradient() {
        let mut rng = SeededRng::new(3);
        let layer = mok(GateMode::Softmax, GateNoise::Gaussian, 4, &mut rng);
        let x = rng.normal_tensor(&[5, 3], 0.0, 1.0).unwrap();
        let report = check_layer(
            LayerUnderTest::Mok {
                layer,
                mode: Mode::Eval,
            },
            x,
            4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn mok_sparse_frozen_gradient() {
        let mut rng = SeededRng::new(4);
        for noise in [GateNoise::Gaussian, GateNoise::Literal] {
            let layer = mok(GateMode::Sparse, noise, 2, &mut rng);
            let x = rng.normal_tensor(&[6, 3], 0.0, 1.0).unwrap();
            let report = check_layer(
                LayerUnderTest::Mok {
                    layer,
                    mode: Mode::Eval,
                },
                x,
                5,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{noise:?}\n{report}");
        }
    }

    #[test]
    fn max_entries_limits_work() {
        let mut rng = SeededRng::new(5);
        let k = KanLayer::new(KanVariant::BSpline, 3, 2, &KanOptions::default(), &mut rng).unwrap();
        let x = rng.normal_tensor(&[4, 3], 0.0, 1.0).unwrap();
        let mut opts = GradCheckOptions::new(1e-5);
        opts.max_entries = Some(3);
        let report = check_layer_with(LayerUnderTest::Kan(k), x, &opts).unwrap();
        assert!(report.tensors.iter().all(|t| t.checked <= 3));
        assert!(report.passed(), "{report}");
    }
}
