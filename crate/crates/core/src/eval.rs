//! Test-set metrics and the interpretability exports: per-variable expert
//! loads and per-lookback-position feature weights.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::layers::{KanLayer, Mode};
use crate::model::MmkModel;
use crate::moe::Expert;
use crate::tensor::Tensor;

/// Windows scored per forward call. Eval-mode rows are independent, so the
/// chunk size does not change any window's prediction.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Squared and absolute error sums of one window.
fn window_errors(pred: &[f64], target: &[f64]) -> (f64, f64) {
    pred.iter().zip(target).fold((0.0, 0.0), |(s, a), (p, t)| {
        let d = p - t;
        (s + d * d, a + d.abs())
    })
}

/// MSE and MAE of `pred` against `target`, both `[B, P, C]`.
pub fn metrics(pred: &Tensor, target: &Tensor) -> Result<Metrics> {
    pred.expect_shape(target.shape())?;
    if pred.is_empty() {
        return Err(Error::domain("no predictions to score"));
    }
    let (s, a) = window_errors(pred.data(), target.data());
    let n = pred.len() as f64;
    Ok(Metrics {
        mse: s / n,
        mae: a / n,
        windows: pred.dim(0),
    })
}

/// Scores every window at `origins` in eval mode. Errors are accumulated
/// window by window in origin order.
pub fn evaluate(model: &mut MmkModel, ds: &TimeSeriesDataset, origins: &[usize]) -> Result<Metrics> {
    if origins.is_empty() {
        return Err(Error::domain("evaluation split has no windows"));
    }
    let (t, p) = (model.config.lookback, model.config.horizon);
    let per_window = p * ds.n_vars();
    let (mut se, mut ae) = (0.0, 0.0);
    for chunk in origins.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(chunk, t, p)?;
        let pred = model.predict(&x)?;
        pred.ensure_finite("predictions")?;
        for w in 0..chunk.len() {
            let r = w * per_window..(w + 1) * per_window;
            let (s, a) = window_errors(&pred.data()[r.clone()], &y.data()[r]);
            se += s;
            ae += a;
        }
    }
    let n = (origins.len() * per_window) as f64;
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
        windows: origins.len(),
    })
}

/// Fraction of windows in which each variable's top-1 expert at one MoK
/// layer is each expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLoadMatrix {
    /// `[N, C]`, every column sums to one.
    pub fractions: Tensor,
    pub experts: Vec<String>,
    pub variables: Vec<String>,
}

impl ExpertLoadMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("expert");
        for v in &self.variables {
            s.push(',');
            s.push_str(v);
        }
        s.push('\n');
        for (e, label) in self.experts.iter().enumerate() {
            s.push_str(label);
            for v in self.fractions.row(e) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Majority expert of each variable.
    pub fn argmax(&self) -> Vec<usize> {
        let (n, c) = (self.fractions.dim(0), self.fractions.dim(1));
        (0..c)
            .map(|v| {
                (0..n).fold(0, |best, e| {
                    if self.fractions.get2(e, v) > self.fractions.get2(best, v) {
                        e
                    } else {
                        best
                    }
                })
            })
            .collect()
    }
}

pub fn expert_labels(model: &MmkModel, layer: usize) -> Vec<String> {
    model.mok_layers()[layer]
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{i}:{}", e.kind().name()))
        .collect()
}

/// Top-1 routing counts at MoK layer `layer` (0 is the embedding layer).
pub fn export_expert_loads(
    model: &mut MmkModel,
    ds: &TimeSeriesDataset,
    origins: &[usize],
    layer: usize,
) -> Result<ExpertLoadMatrix> {
    if origins.is_empty() {
        return Err(Error::domain("no windows to route"));
    }
    if layer >= model.n_mok_layers() {
        return Err(Error::config(format!(
            "layer {layer} requested, the model has {} MoK layers",
            model.n_mok_layers()
        )));
    }
    let (t, p) = (model.config.lookback, model.config.horizon);
    let c = ds.n_vars();
    let n = model.mok_layers()[layer].experts.len();
    let mut counts = Tensor::zeros(&[n, c]);
    for chunk in origins.chunks(EVAL_CHUNK) {
        let (x, _) = ds.batch(chunk, t, p)?;
        let (_, decisions, _) = model.forward(&x, Mode::Eval, None)?;
        let d = &decisions[layer];
        for s in 0..chunk.len() {
            for v in 0..c {
                let e = d.top1(s * c + v);
                let cur = counts.get2(e, v);
                counts.set2(e, v, cur + 1.0);
            }
        }
    }
    let total = origins.len() as f64;
    Ok(ExpertLoadMatrix {
        fractions: counts.map(|x| x / total),
        experts: expert_labels(model, layer),
        variables: ds.names.clone(),
    })
}

/// Mean over rows of `Σ_j |φ_{j,i}(x_i)|` for each input position `i`.
pub fn kan_feature_weights(layer: &KanLayer, rows: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = rows.dims2()?;
    if d != layer.n_in() {
        return Err(Error::dim(format!(
            "layer takes {} inputs, rows have {d}",
            layer.n_in()
        )));
    }
    let mut w = vec![0.0; d];
    for r in 0..n {
        for (i, wi) in w.iter_mut().enumerate() {
            let x = rows.get2(r, i);
            *wi += (0..layer.n_out()).map(|j| layer.edge_value(j, i, x).abs()).sum::<f64>();
        }
    }
    w.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    Ok(w)
}

fn expert_edge_magnitudes(expert: &Expert, row: &[f64], out: &mut [f64]) {
    match expert {
        Expert::Kan(k) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..k.n_out()).map(|j| k.edge_value(j, i, row[i]).abs()).sum();
            }
        }
        Expert::Linear(l) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = l.weight.value.row(i).iter().map(|w| (w * row[i]).abs()).sum();
            }
        }
    }
}

/// Importance of each lookback position at the embedding layer: the mean
/// absolute edge output, weighted by the gate, over every variable row of
/// the windows at `origins`.
pub fn export_feature_weights(model: &mut MmkModel, ds: &TimeSeriesDataset, origins: &[usize]) -> Result<Vec<f64>> {
    if origins.is_empty() {
        return Err(Error::domain("no windows to attribute"));
    }
    let (t, p) = (model.config.lookback, model.config.horizon);
    let mut total = vec![0.0; t];
    let mut buf = vec![0.0; t];
    let mut rows_seen = 0usize;
    for chunk in origins.chunks(EVAL_CHUNK) {
        let (x, _) = ds.batch(chunk, t, p)?;
        let rows = model.input_rows(&x)?;
        let (_, decisions, _) = model.forward(&x, Mode::Eval, None)?;
        let weights = &decisions[0].weights;
        for r in 0..rows.dim(0) {
            for (e, expert) in model.embed.experts.iter().enumerate() {
                let g = weights.get2(r, e);
                if g == 0.0 {
                    continue;
                }
                expert_edge_magnitudes(expert, rows.row(r), &mut buf);
                for (acc, v) in total.iter_mut().zip(&buf) {
                    *acc += g * v;
                }
            }
        }
        rows_seen += rows.dim(0);
    }
    total.iter_mut().for_each(|v| *v /= rows_seen as f64);
    Ok(total)
}

pub fn feature_weights_csv(weights: &[f64]) -> String {
    let mut s = String::from("index,weight\n");
    for (i, w) in weights.iter().enumerate() {
        let _ = writeln!(s, "{i},{w}");
    }
    s
}

/// Indices of strict local maxima (endpoints compare with their single
/// neighbour), largest first.
pub fn local_maxima(v: &[f64]) -> Vec<usize> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = i == 0 || v[i] > v[i - 1];
            let right = i + 1 == n || v[i] > v[i + 1];
            n > 1 && left && right
        })
        .collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Plot helper written next to the CSV exports.
/// Positions that hold the maximum of the window `[i - radius, i + radius]`
/// (clipped at the ends), largest first. A plateau keeps its first index.
pub fn peaks(v: &[f64], radius: usize) -> Vec<usize> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n)
        .filter(|&i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(n);
            (lo..hi).all(|j| v[j] < v[i] || (v[j] == v[i] && j >= i))
        })
        .collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

pub const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
# Renders expert_loads.csv as a heatmap and feature_weights.csv as a line plot.
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

run = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(".")

with open(run / "expert_loads.csv") as f:
    rows = list(csv.reader(f))
variables = rows[0][1:]
experts = [r[0] for r in rows[1:]]
grid = [[float(x) for x in r[1:]] for r in rows[1:]]
fig, ax = plt.subplots(figsize=(max(4, len(variables) * 0.5), 3))
im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto")
ax.set_xticks(range(len(variables)), variables, rotation=90)
ax.set_yticks(range(len(experts)), experts)
fig.colorbar(im)
fig.tight_layout()
fig.savefig(run / "expert_loads.png", dpi=150)

with open(run / "feature_weights.csv") as f:
    rows = list(csv.DictReader(f))
fig, ax = plt.subplots(figsize=(6, 3))
ax.plot([int(r["index"]) for r in rows], [float(r["weight"]) for r in rows])
ax.set_xlabel("lookback position")
ax.set_ylabel("weight")
fig.tight_layout()
fig.savefig(run / "feature_weights.png", dpi=150)
"#;

/// Writes `expert_loads.csv`, `feature_weights.csv` and `plot_exports.py`
/// into `dir`.
pub fn write_exports(dir: &Path, loads: &ExpertLoadMatrix, weights: &[f64]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("expert_loads.csv"), loads.to_csv())?;
    std::fs::write(dir.join("feature_weights.csv"), feature_weights_csv(weights))?;
    std::fs::write(dir.join("plot_exports.py"), PLOT_SCRIPT)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{window_origins, SplitRange};
    use crate::layers::kan::KanOptions;
    use crate::layers::KanVariant;
    use crate::model::MmkConfig;
    use crate::moe::ExpertKind;
    use crate::rng::SeededRng;

    #[test]
    fn metric_closed_forms() {
        let y = SeededRng::new(1).normal_tensor(&[2, 3, 2], 0.0, 1.0).unwrap();
        let m = metrics(&y, &y).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let m = metrics(&y.map(|v| v + 1.0), &y).unwrap();
        assert!((m.mse - 1.0).abs() < 1e-15 && (m.mae - 1.0).abs() < 1e-15);
    }

    fn toy() -> (MmkModel, TimeSeriesDataset) {
        let cfg = MmkConfig {
            lookback: 8,
            horizon: 4,
            n_vars: 2,
            hidden_dim: 6,
            n_blocks: 1,
            ..MmkConfig::default()
        };
        let values = SeededRng::new(2).normal_tensor(&[40, 2], 0.0, 1.0).unwrap();
        let ds = TimeSeriesDataset::new(values, vec!["a".into(), "b".into()]).unwrap();
        (MmkModel::new(cfg).unwrap(), ds)
    }

    #[test]
    fn evaluation_decomposes_over_windows() {
        let (mut m, ds) = toy();
        let all = evaluate(&mut m, &ds, &[3, 10]).unwrap();
        let a = evaluate(&mut m, &ds, &[3]).unwrap();
        let b = evaluate(&mut m, &ds, &[10]).unwrap();
        assert!((all.mse - (a.mse + b.mse) / 2.0).abs() < 1e-12);
        assert!((all.mae - (a.mae + b.mae) / 2.0).abs() < 1e-12);
        assert!(matches!(evaluate(&mut m, &ds, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn evaluation_counts_every_window() {
        let (mut m, ds) = toy();
        let r = SplitRange {
            start: 0,
            target_start: 8,
            end: 40,
        };
        let o = window_origins(r, 8, 4).unwrap();
        assert_eq!(evaluate(&mut m, &ds, &o).unwrap().windows, 40 - 8 - 4 + 1);
    }

    #[test]
    fn chunking_does_not_change_predictions() {
        let (mut m, ds) = toy();
        let o: Vec<usize> = (0..20).collect();
        let (x, _) = ds.batch(&o, 8, 4).unwrap();
        let all = m.predict(&x).unwrap();
        for (k, &origin) in o.iter().enumerate() {
            let (x1, _) = ds.batch(&[origin], 8, 4).unwrap();
            let one = m.predict(&x1).unwrap();
            assert_eq!(one.data(), &all.data()[k * 8..(k + 1) * 8]);
        }
    }

    #[test]
    fn load_matrix_columns_sum_to_one() {
        let (mut m, ds) = toy();
        m.embed.gate.w_g.value = SeededRng::new(3).normal_tensor(&[8, 4], 0.0, 1.0).unwrap();
        let o: Vec<usize> = (0..25).collect();
        let lm = export_expert_loads(&mut m, &ds, &o, 0).unwrap();
        assert_eq!(lm.fractions.shape(), [4, 2]);
        for v in 0..2 {
            let s: f64 = (0..4).map(|e| lm.fractions.get2(e, v)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(lm, export_expert_loads(&mut m, &ds, &o, 0).unwrap());
        assert!(lm.to_csv().starts_with("expert,a,b\n0:bspline,"));
    }

    #[test]
    fn single_expert_routes_everything() {
        let (_, ds) = toy();
        let cfg = MmkConfig {
            lookback: 8,
            horizon: 4,
            n_vars: 2,
            single_layer: true,
            experts: vec![ExpertKind::Kan(KanVariant::Taylor)],
            top_k: 1,
            ..MmkConfig::default()
        };
        let mut m = MmkModel::new(cfg).unwrap();
        let lm = export_expert_loads(&mut m, &ds, &[0, 1, 2], 0).unwrap();
        assert_eq!(lm.fractions, Tensor::full(&[1, 2], 1.0));
    }

    #[test]
    fn zero_weights_give_zero_importance() {
        let mut rng = SeededRng::new(4);
        let mut k = KanLayer::new(KanVariant::BSpline, 6, 2, &KanOptions::default(), &mut rng).unwrap();
        k.w_a.value.fill(0.0);
        k.set_w_b(Tensor::zeros(&[2, 6])).unwrap();
        let rows = rng.normal_tensor(&[5, 6], 0.0, 1.0).unwrap();
        assert_eq!(kan_feature_weights(&k, &rows).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn model_feature_weights_have_lookback_length() {
        let (mut m, ds) = toy();
        let w = export_feature_weights(&mut m, &ds, &[0, 5, 9]).unwrap();
        assert_eq!(w.len(), 8);
        assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn single_kan_model_matches_layer_weights() {
        let (_, ds) = toy();
        let cfg = MmkConfig {
            lookback: 8,
            horizon: 1,
            n_vars: 2,
            single_layer: true,
            experts: vec![ExpertKind::Kan(KanVariant::BSpline)],
            top_k: 1,
            ..MmkConfig::default()
        };
        let mut m = MmkModel::new(cfg).unwrap();
        let o = [0usize, 4, 7];
        let from_model = export_feature_weights(&mut m, &ds, &o).unwrap();
        let (x, _) = ds.batch(&o, 8, 1).unwrap();
        let rows = m.input_rows(&x).unwrap();
        let direct = kan_feature_weights(m.embed.experts[0].as_kan().unwrap(), &rows).unwrap();
        for (a, b) in from_model.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_maxima_order() {
        let v = [3.0, 1.0, 2.0, 1.0, 5.0, 4.0, 4.5];
        assert_eq!(local_maxima(&v), [4, 6, 0, 2]);
    }

    #[test]
    fn peaks_merge_nearby_maxima() {
        let v = [5.0, 1.0, 4.9, 0.0, 0.0, 0.0, 0.0, 3.0, 1.0, 3.5];
        assert_eq!(local_maxima(&v), [0, 2, 9, 7]);
        assert_eq!(peaks(&v, 2), [0, 9]);
        assert_eq!(peaks(&v, 0).len(), v.len());
        assert_eq!(peaks(&[1.0, 1.0, 0.0], 1), [0]);
    }
}
