//! Affine layer `y = x·W + b`.

use super::{join, next_version, LayerGrads, Param, Parameters};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{gemm, matmul, Tensor, Trans};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    version: u64,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    x: Tensor,
    version: u64,
}

impl Linear {
    /// Uniform `±1/sqrt(n_in)` initialisation for weight and bias.
    pub fn new(n_in: usize, n_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        Self::from_params(
            rng.uniform_tensor(&[n_in, n_out], -bound, bound),
            rng.uniform_tensor(&[n_out], -bound, bound),
        )
        .expect("consistent shapes")
    }

    pub fn from_params(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, n_out) = weight.dims2()?;
        bias.expect_shape(&[n_out])?;
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            version: next_version(),
        })
    }

    pub fn n_in(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn n_out(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let (rows, n_in) = x.dims2()?;
        if n_in != self.n_in() {
            return Err(Error::dim(format!(
                "linear layer expects {} inputs, got {n_in}",
                self.n_in()
            )));
        }
        let mut y = matmul(x, &self.weight.value)?;
        let b = self.bias.value.data();
        for r in 0..rows {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok((
            y,
            LinearCache {
                x: x.clone(),
                version: self.version,
            },
        ))
    }

    /// Gradients for `[weight, bias]` and the input.
    pub fn backward(&self, cache: &LinearCache, d_y: &Tensor) -> Result<LayerGrads> {
        if cache.version != self.version {
            return Err(Error::contract("linear backward called with a stale cache"));
        }
        let rows = cache.x.dim(0);
        d_y.expect_shape(&[rows, self.n_out()])?;
        let mut d_w = Tensor::zeros(self.weight.value.shape());
        gemm(&cache.x, Trans::Yes, d_y, Trans::No, &mut d_w, false)?;
        let mut d_b = Tensor::zeros(&[self.n_out()]);
        for r in 0..rows {
            for (acc, g) in d_b.data_mut().iter_mut().zip(d_y.row(r)) {
                *acc += g;
            }
        }
        let mut d_x = Tensor::zeros(cache.x.shape());
        gemm(d_y, Trans::No, &self.weight.value, Trans::Yes, &mut d_x, false)?;
        Ok(LayerGrads {
            d_input: d_x,
            d_params: vec![d_w, d_b],
        })
    }

    pub fn accumulate(&mut self, grads: &LayerGrads) -> Result<()> {
        grads.accumulate_into(vec![&mut self.weight, &mut self.bias])
    }
}

impl Parameters for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.version = next_version();
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_and_zero_input() {
        let lin = Linear::from_params(Tensor::eye(3), Tensor::zeros(&[3])).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 4.0]]).unwrap();
        assert_eq!(lin.forward(&x).unwrap().0, x);

        let lin = Linear::from_params(Tensor::eye(2), Tensor::new(&[2], vec![0.3, -0.7]).unwrap()).unwrap();
        let (y, _) = lin.forward(&Tensor::zeros(&[4, 2])).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.3, -0.7]);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let lin = Linear::new(3, 2, &mut SeededRng::new(0));
        assert!(matches!(lin.forward(&Tensor::zeros(&[2, 4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut lin = Linear::new(3, 2, &mut SeededRng::new(0));
        let (_, cache) = lin.forward(&Tensor::zeros(&[1, 3])).unwrap();
        let mut ps = Vec::new();
        lin.params_mut("", &mut ps);
        drop(ps);
        assert!(matches!(
            lin.backward(&cache, &Tensor::zeros(&[1, 2])),
            Err(Error::Contract(_))
        ));
    }
}
