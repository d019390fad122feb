//! Batch normalisation over the feature axis of a `[rows, features]` matrix.

use super::{join, LayerGrads, Mode, Param, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    mode: Mode,
    x_hat: Tensor,
    inv_std: Tensor,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[features], 1.0)),
            beta: Param::new(Tensor::zeros(&[features])),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.len()
    }

    /// Train mode normalises with the batch moments (population variance)
    /// and updates the running statistics, using the unbiased batch variance
    /// for the running variance. Eval mode uses the running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        let (rows, d) = x.dims2()?;
        if d != self.features() {
            return Err(Error::dim(format!(
                "BatchNorm expects {} features, got {d}",
                self.features()
            )));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::domain(format!(
                        "BatchNorm in train mode needs at least 2 rows, got {rows}"
                    )));
                }
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let unbias = rows as f64 / (rows as f64 - 1.0);
                for f in 0..d {
                    let rm = &mut self.running_mean.data_mut()[f];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[f];
                    let rv = &mut self.running_var.data_mut()[f];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * var[f] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(&[rows, d]);
        let mut y = Tensor::zeros(&[rows, d]);
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        for r in 0..rows {
            for f in 0..d {
                let xh = (x.get2(r, f) - mean[f]) * inv_std[f];
                x_hat.set2(r, f, xh);
                y.set2(r, f, g[f] * xh + b[f]);
            }
        }
        Ok((
            y,
            BatchNormCache {
                mode,
                x_hat,
                inv_std: Tensor::new(&[d], inv_std)?,
            },
        ))
    }

    /// Gradients for `[gamma, beta]` and the input.
    pub fn backward(&self, cache: &BatchNormCache, d_y: &Tensor) -> Result<LayerGrads> {
        d_y.expect_shape(cache.x_hat.shape())?;
        let (rows, d) = d_y.dims2()?;
        let mut d_gamma = Tensor::zeros(&[d]);
        let mut d_beta = Tensor::zeros(&[d]);
        for r in 0..rows {
            for f in 0..d {
                let g = d_y.get2(r, f);
                d_gamma.data_mut()[f] += g * cache.x_hat.get2(r, f);
                d_beta.data_mut()[f] += g;
            }
        }
        let gamma = self.gamma.value.data();
        let inv_std = cache.inv_std.data();
        let mut d_x = Tensor::zeros(&[rows, d]);
        match cache.mode {
            Mode::Eval => {
                for r in 0..rows {
                    for f in 0..d {
                        d_x.set2(r, f, d_y.get2(r, f) * gamma[f] * inv_std[f]);
                    }
                }
            }
            Mode::Train => {
                let n = rows as f64;
                for f in 0..d {
                    let mean_g = d_beta.data()[f] / n;
                    let mean_gx = d_gamma.data()[f] / n;
                    for r in 0..rows {
                        let v = gamma[f] * inv_std[f] * (d_y.get2(r, f) - mean_g - cache.x_hat.get2(r, f) * mean_gx);
                        d_x.set2(r, f, v);
                    }
                }
            }
        }
        Ok(LayerGrads {
            d_input: d_x,
            d_params: vec![d_gamma, d_beta],
        })
    }

    pub fn accumulate(&mut self, grads: &LayerGrads) -> Result<()> {
        grads.accumulate_into(vec![&mut self.gamma, &mut self.beta])
    }
}

impl Parameters for BatchNorm1d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_layer, LayerUnderTest};
    use crate::rng::SeededRng;

    fn column_moments(y: &Tensor, f: usize) -> (f64, f64) {
        let rows = y.dim(0);
        let m = (0..rows).map(|r| y.get2(r, f)).sum::<f64>() / rows as f64;
        let v = (0..rows).map(|r| (y.get2(r, f) - m).powi(2)).sum::<f64>() / rows as f64;
        (m, v)
    }

    #[test]
    fn train_output_is_standardized() {
        let x = SeededRng::new(1).normal_tensor(&[16, 3], 4.0, 2.0).unwrap();
        let mut bn = BatchNorm1d::new(3);
        bn.eps = 0.0;
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for f in 0..3 {
            let (m, v) = column_moments(&y, f);
            assert!(m.abs() < 1e-8);
            assert!((v - 1.0).abs() < 1e-8);
        }
        // with the default eps the variance is var / (var + eps) exactly
        let mut bn = BatchNorm1d::new(3);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for f in 0..3 {
            let (_, xv) = column_moments(&x, f);
            let (_, v) = column_moments(&y, f);
            assert!((v - xv / (xv + BN_EPS)).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let mut bn = BatchNorm1d::new(1);
        bn.forward(&x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_with_unit_running_stats_is_identity() {
        let mut bn = BatchNorm1d::new(2);
        bn.eps = 0.0;
        let x = SeededRng::new(2).normal_tensor(&[1, 2], 0.0, 1.0).unwrap();
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_row_train_is_an_error() {
        let mut bn = BatchNorm1d::new(2);
        assert!(matches!(
            bn.forward(&Tensor::zeros(&[1, 2]), Mode::Train),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gradient_check_both_modes() {
        let mut rng = SeededRng::new(3);
        let mut bn = BatchNorm1d::new(3);
        bn.gamma.value = rng.uniform_tensor(&[3], 0.5, 1.5);
        bn.beta.value = rng.normal_tensor(&[3], 0.0, 1.0).unwrap();
        bn.running_mean = rng.normal_tensor(&[3], 0.0, 1.0).unwrap();
        bn.running_var = rng.uniform_tensor(&[3], 0.5, 2.0);
        let x = rng.normal_tensor(&[6, 3], 1.0, 2.0).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let report = check_layer(LayerUnderTest::BatchNorm { bn: bn.clone(), mode }, x.clone(), 4, 1e-5).unwrap();
            assert!(report.passed(), "{mode:?}\n{report}");
        }
    }
}
