//! Reversible instance normalisation.
//!
//! `normalize` standardises every `(sample, variable)` series over the time
//! axis and applies a per-variable affine map; `denormalize` undoes the
//! affine map and the standardisation with the statistics captured by the
//! paired `normalize` call. Gradients flow through the statistics as well,
//! so the input cotangent is exact.

use super::{join, Param, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const REVIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RevIn {
    /// `[C]`
    pub weight: Param,
    /// `[C]`
    pub bias: Param,
    pub eps: f64,
}

/// Statistics captured by `normalize`, `[B, C]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct RevInStats {
    pub mean: Tensor,
    pub std: Tensor,
}

/// Cotangents of the cached statistics accumulated by
/// [`RevIn::denormalize_backward`].
#[derive(Clone, Debug)]
pub struct StatGrads {
    d_mean: Tensor,
    d_std: Tensor,
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [b, t, c] => Ok((b, t, c)),
        _ => Err(Error::dim(format!("expected [B, T, C], got {:?}", x.shape()))),
    }
}

impl RevIn {
    pub fn new(n_vars: usize) -> Self {
        Self {
            weight: Param::new(Tensor::full(&[n_vars], 1.0)),
            bias: Param::new(Tensor::zeros(&[n_vars])),
            eps: REVIN_EPS,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.weight.value.len()
    }

    pub fn normalize(&self, x: &Tensor) -> Result<(Tensor, RevInStats)> {
        let (b, t, c) = dims3(x)?;
        if c != self.n_vars() {
            return Err(Error::dim(format!(
                "RevIN built for {} variables, got {c}",
                self.n_vars()
            )));
        }
        if t < 2 {
            return Err(Error::domain(format!("RevIN needs at least 2 time steps, got {t}")));
        }
        let mut mean = Tensor::zeros(&[b, c]);
        let mut std = Tensor::zeros(&[b, c]);
        let mut out = Tensor::zeros(x.shape());
        let xd = x.data();
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        for s in 0..b {
            for v in 0..c {
                let at = |k: usize| xd[(s * t + k) * c + v];
                let mu = (0..t).map(at).sum::<f64>() / t as f64;
                let var = (0..t).map(|k| (at(k) - mu).powi(2)).sum::<f64>() / t as f64;
                let sd = (var + self.eps).sqrt();
                mean.data_mut()[s * c + v] = mu;
                std.data_mut()[s * c + v] = sd;
                for k in 0..t {
                    out.data_mut()[(s * t + k) * c + v] = (at(k) - mu) / sd * w[v] + bias[v];
                }
            }
        }
        Ok((out, RevInStats { mean, std }))
    }

    pub fn denormalize(&self, y: &Tensor, stats: &RevInStats) -> Result<Tensor> {
        let (b, p, c) = dims3(y)?;
        self.check_stats(stats, b, c)?;
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = Tensor::zeros(y.shape());
        for s in 0..b {
            for v in 0..c {
                let mu = stats.mean.data()[s * c + v];
                let sd = stats.std.data()[s * c + v];
                for k in 0..p {
                    let at = (s * p + k) * c + v;
                    out.data_mut()[at] = (y.data()[at] - bias[v]) / w[v] * sd + mu;
                }
            }
        }
        Ok(out)
    }

    fn check_stats(&self, stats: &RevInStats, b: usize, c: usize) -> Result<()> {
        if stats.mean.shape() != [b, c] || stats.std.shape() != [b, c] {
            return Err(Error::contract(format!(
                "RevIN statistics are {:?} but the batch is [{b}, {c}]",
                stats.mean.shape()
            )));
        }
        Ok(())
    }

    /// Backward of `denormalize`: accumulates weight/bias grads and returns
    /// the cotangent of its input plus the statistics' cotangents.
    pub fn denormalize_backward(
        &mut self,
        y: &Tensor,
        stats: &RevInStats,
        d_out: &Tensor,
    ) -> Result<(Tensor, StatGrads)> {
        let (b, p, c) = dims3(y)?;
        self.check_stats(stats, b, c)?;
        d_out.expect_shape(y.shape())?;
        let mut d_y = Tensor::zeros(y.shape());
        let mut d_mean = Tensor::zeros(&[b, c]);
        let mut d_std = Tensor::zeros(&[b, c]);
        for s in 0..b {
            for v in 0..c {
                let w = self.weight.value.data()[v];
                let bias = self.bias.value.data()[v];
                let sd = stats.std.data()[s * c + v];
                let (mut gw, mut gb, mut gm, mut gs) = (0.0, 0.0, 0.0, 0.0);
                for k in 0..p {
                    let at = (s * p + k) * c + v;
                    let g = d_out.data()[at];
                    let centred = (y.data()[at] - bias) / w;
                    d_y.data_mut()[at] = g * sd / w;
                    gw -= g * centred * sd / w;
                    gb -= g * sd / w;
                    gm += g;
                    gs += g * centred;
                }
                self.weight.grad.data_mut()[v] += gw;
                self.bias.grad.data_mut()[v] += gb;
                d_mean.data_mut()[s * c + v] = gm;
                d_std.data_mut()[s * c + v] = gs;
            }
        }
        Ok((d_y, StatGrads { d_mean, d_std }))
    }

    /// Backward of `normalize`, folding in the statistics' cotangents from
    /// the paired denormalisation (pass `None` if there was none).
    pub fn normalize_backward(
        &mut self,
        x: &Tensor,
        stats: &RevInStats,
        d_out: &Tensor,
        from_denorm: Option<&StatGrads>,
    ) -> Result<Tensor> {
        let (b, t, c) = dims3(x)?;
        self.check_stats(stats, b, c)?;
        d_out.expect_shape(x.shape())?;
        let mut d_x = Tensor::zeros(x.shape());
        let tf = t as f64;
        for s in 0..b {
            for v in 0..c {
                let w = self.weight.value.data()[v];
                let mu = stats.mean.data()[s * c + v];
                let sd = stats.std.data()[s * c + v];
                let xhat = |k: usize| (x.data()[(s * t + k) * c + v] - mu) / sd;
                let (mut gw, mut gb, mut mean_g, mut mean_gx) = (0.0, 0.0, 0.0, 0.0);
                for k in 0..t {
                    let g = d_out.data()[(s * t + k) * c + v];
                    gw += g * xhat(k);
                    gb += g;
                    mean_g += g * w;
                    mean_gx += g * w * xhat(k);
                }
                mean_g /= tf;
                mean_gx /= tf;
                self.weight.grad.data_mut()[v] += gw;
                self.bias.grad.data_mut()[v] += gb;
                let (ext_m, ext_s) = from_denorm
                    .map(|sg| (sg.d_mean.data()[s * c + v], sg.d_std.data()[s * c + v]))
                    .unwrap_or((0.0, 0.0));
                for k in 0..t {
                    let at = (s * t + k) * c + v;
                    let g = d_out.data()[at] * w;
                    let xh = xhat(k);
                    d_x.data_mut()[at] = (g - mean_g - xh * mean_gx) / sd + ext_m / tf + ext_s * xh / tf;
                }
            }
        }
        Ok(d_x)
    }
}

impl Parameters for RevIn {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_layer, LayerUnderTest};
    use crate::rng::SeededRng;

    #[test]
    fn constant_series_normalizes_to_zero() {
        let revin = RevIn::new(2);
        let x = Tensor::full(&[3, 5, 2], 4.2);
        let (y, _) = revin.normalize(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_series_are_centred() {
        let revin = RevIn::new(3);
        let x = SeededRng::new(1).normal_tensor(&[4, 10, 3], 5.0, 3.0).unwrap();
        let (y, _) = revin.normalize(&x).unwrap();
        for s in 0..4 {
            for v in 0..3 {
                let m: f64 = (0..10).map(|k| y.data()[(s * 10 + k) * 3 + v]).sum::<f64>() / 10.0;
                assert!(m.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let mut rng = SeededRng::new(2);
        let mut revin = RevIn::new(3);
        revin.weight.value = rng.uniform_tensor(&[3], 0.5, 2.0);
        revin.bias.value = rng.normal_tensor(&[3], 0.0, 1.0).unwrap();
        let x = rng.normal_tensor(&[4, 12, 3], 10.0, 5.0).unwrap();
        let (y, stats) = revin.normalize(&x).unwrap();
        let back = revin.denormalize(&y, &stats).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zeros_denormalize_to_cached_means() {
        let revin = RevIn::new(2);
        let x = SeededRng::new(3).normal_tensor(&[2, 6, 2], 1.0, 2.0).unwrap();
        let (_, stats) = revin.normalize(&x).unwrap();
        let out = revin.denormalize(&Tensor::zeros(&[2, 4, 2]), &stats).unwrap();
        for s in 0..2 {
            for k in 0..4 {
                for v in 0..2 {
                    assert_eq!(out.data()[(s * 4 + k) * 2 + v], stats.mean.data()[s * 2 + v]);
                }
            }
        }
    }

    #[test]
    fn short_series_and_mismatched_stats_are_errors() {
        let revin = RevIn::new(1);
        assert!(matches!(
            revin.normalize(&Tensor::zeros(&[1, 1, 1])),
            Err(Error::Domain(_))
        ));
        let (_, stats) = revin.normalize(&Tensor::zeros(&[2, 3, 1])).unwrap();
        assert!(matches!(
            revin.denormalize(&Tensor::zeros(&[3, 2, 1]), &stats),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pair_passes_gradient_check() {
        let mut rng = SeededRng::new(4);
        let mut revin = RevIn::new(2);
        revin.weight.value = rng.uniform_tensor(&[2], 0.5, 2.0);
        revin.bias.value = rng.normal_tensor(&[2], 0.0, 1.0).unwrap();
        let x = rng.normal_tensor(&[3, 6, 2], 2.0, 1.5).unwrap();
        let report = check_layer(LayerUnderTest::RevInPair { revin, horizon: 4 }, x, 5, 1e-5).unwrap();
        assert!(report.passed(), "{report}");
    }
}
