//! Inverted dropout.

use super::Mode;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dropout {
    p: f64,
}

/// Per-element multiplier applied in the forward pass (`0` or `1/(1-p)`);
/// `None` when the layer acted as the identity.
#[derive(Clone, Debug)]
pub struct DropoutCache {
    mask: Option<Tensor>,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout probability must be in [0, 1), got {p}")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: Option<&mut SeededRng>) -> Result<(Tensor, DropoutCache)> {
        let rng = match (mode, rng) {
            (Mode::Train, Some(rng)) if self.p > 0.0 => rng,
            (Mode::Train, None) if self.p > 0.0 => {
                return Err(Error::config("dropout in train mode needs a random stream"))
            }
            _ => return Ok((x.clone(), DropoutCache { mask: None })),
        };
        let keep = 1.0 / (1.0 - self.p);
        let draws: Vec<f64> = (0..x.len())
            .map(|_| if rng.uniform() < self.p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(x.shape(), draws)?;
        let y = x.mul(&mask)?;
        Ok((y, DropoutCache { mask: Some(mask) }))
    }

    pub fn backward(&self, cache: &DropoutCache, d_y: &Tensor) -> Result<Tensor> {
        match &cache.mask {
            None => Ok(d_y.clone()),
            Some(m) => d_y.mul(m),
        }
    }
}
