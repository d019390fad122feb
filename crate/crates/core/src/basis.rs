//! Univariate base-function families for KAN edges and the SiLU residual.
//!
//! Each family maps a scalar input to `n_basis` values and their derivatives
//! with respect to the input. Families that reshape their input first (clamp
//! or tanh squash) fold that chain factor into the returned derivative.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GRID_SIZE: usize = 5;
pub const DEFAULT_SPLINE_DEGREE: usize = 3;
pub const DEFAULT_GRID_RANGE: (f64, f64) = (-2.0, 2.0);
pub const DEFAULT_POLY_ORDER: usize = 3;
pub const DEFAULT_WAVELET_COUNT: usize = 8;
/// Inputs to the Taylor family are clamped to `[-TAYLOR_CLAMP, TAYLOR_CLAMP]`.
pub const TAYLOR_CLAMP: f64 = 3.0;

/// Extended knot vector for a uniform B-spline grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    knots: Vec<f64>,
    degree: usize,
    lo: f64,
    hi: f64,
}

impl SplineGrid {
    /// Uniform grid with `grid_size` cells on `[lo, hi]`, extended by
    /// `degree` cells on each side.
    pub fn uniform(grid_size: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::config("spline grid needs at least one cell"));
        }
        if !(hi > lo) {
            return Err(Error::config(format!("spline domain [{lo}, {hi}] is empty")));
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..=grid_size + 2 * degree)
            .map(|i| lo + (i as f64 - degree as f64) * h)
            .collect();
        Self::from_knots(knots, degree, lo, hi)
    }

    /// Grid from an explicit extended knot vector. Knots must be strictly
    /// increasing and leave `degree` knots outside `[lo, hi]` on each side.
    pub fn from_knots(knots: Vec<f64>, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        if degree == 0 {
            return Err(Error::config("spline degree must be at least 1"));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("spline knots must be strictly increasing"));
        }
        if knots.len() < 2 * degree + 2 {
            return Err(Error::config(format!(
                "{} knots cannot carry a degree-{degree} spline",
                knots.len()
            )));
        }
        let inner_lo = knots[degree];
        let inner_hi = knots[knots.len() - 1 - degree];
        if (inner_lo - lo).abs() > 1e-12 * (1.0 + lo.abs()) || (inner_hi - hi).abs() > 1e-12 * (1.0 + hi.abs()) {
            return Err(Error::config(format!(
                "knots [{inner_lo}, {inner_hi}] do not match domain [{lo}, {hi}]"
            )));
        }
        Ok(Self { knots, degree, lo, hi })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn grid_size(&self) -> usize {
        self.knots.len() - 1 - 2 * self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.grid_size() + self.degree
    }

    /// Writes the `n_basis` values and input-derivatives at `x` (clamped to
    /// the domain; the derivative is zero outside it).
    pub fn eval_into(&self, x: f64, values: &mut [f64], d_values: &mut [f64]) {
        let inside = x >= self.lo && x <= self.hi;
        let xc = x.clamp(self.lo, self.hi);
        let k = self.degree;
        let lower = cox_de_boor(xc, &self.knots, k - 1);
        let t = &self.knots;
        let n = self.n_basis();
        let kf = k as f64;
        for i in 0..n {
            let left = lower[i] * (xc - t[i]) / (t[i + k] - t[i]);
            let right = lower[i + 1] * (t[i + k + 1] - xc) / (t[i + k + 1] - t[i + 1]);
            values[i] = left + right;
            d_values[i] = if inside {
                kf * lower[i] / (t[i + k] - t[i]) - kf * lower[i + 1] / (t[i + k + 1] - t[i + 1])
            } else {
                0.0
            };
        }
    }
}

/// All degree-`degree` B-spline values at `x` over `knots`
/// (`knots.len() - 1 - degree` functions), by Cox–de Boor recursion.
/// Degree-0 cells are half-open `[t_i, t_{i+1})`.
pub fn cox_de_boor(x: f64, knots: &[f64], degree: usize) -> Vec<f64> {
    let cells = knots.len() - 1;
    let mut b: Vec<f64> = (0..cells)
        .map(|i| if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 })
        .collect();
    for p in 1..=degree {
        for i in 0..cells - p {
            let left = (x - knots[i]) / (knots[i + p] - knots[i]) * b[i];
            let right = (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1]) * b[i + 1];
            b[i] = left + right;
        }
        b.truncate(cells - p);
    }
    b
}

/// Basis values and their input-derivatives for a batch of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisEval {
    /// `[batch, n_basis]`
    pub values: Tensor,
    /// `[batch, n_basis]`, derivative of each basis w.r.t. the raw input.
    pub d_values: Tensor,
}

pub fn bspline_basis(x: &[f64], grid: &SplineGrid) -> BasisEval {
    let nb = grid.n_basis();
    let mut values = Tensor::zeros(&[x.len(), nb]);
    let mut d_values = Tensor::zeros(&[x.len(), nb]);
    for (r, &xi) in x.iter().enumerate() {
        let (v, d) = (
            &mut values.data_mut()[r * nb..(r + 1) * nb],
            &mut d_values.data_mut()[r * nb..(r + 1) * nb],
        );
        grid.eval_into(xi, v, d);
    }
    BasisEval { values, d_values }
}

/// Polynomial families. `order` is the highest degree, so each family yields
/// `order + 1` functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolyFamily {
    /// Chebyshev polynomials of the first kind on `tanh(x)`.
    Chebyshev,
    /// Jacobi polynomials `P^(a,b)` on `tanh(x)`.
    Jacobi { a: f64, b: f64 },
    /// Raw monomials on `clamp(x, -3, 3)`.
    Taylor,
}

impl PolyFamily {
    pub fn eval_into(&self, order: usize, x: f64, values: &mut [f64], d_values: &mut [f64]) {
        match *self {
            PolyFamily::Chebyshev => {
                let u = x.tanh();
                let du = 1.0 - u * u;
                values[0] = 1.0;
                d_values[0] = 0.0;
                if order >= 1 {
                    values[1] = u;
                    d_values[1] = 1.0;
                }
                for d in 2..=order {
                    values[d] = 2.0 * u * values[d - 1] - values[d - 2];
                    d_values[d] = 2.0 * values[d - 1] + 2.0 * u * d_values[d - 1] - d_values[d - 2];
                }
                d_values[..=order].iter_mut().for_each(|v| *v *= du);
            }
            PolyFamily::Jacobi { a, b } => {
                let u = x.tanh();
                let du = 1.0 - u * u;
                values[0] = 1.0;
                d_values[0] = 0.0;
                if order >= 1 {
                    values[1] = 0.5 * ((a + b + 2.0) * u + (a - b));
                    d_values[1] = 0.5 * (a + b + 2.0);
                }
                for n in 2..=order {
                    let nf = n as f64;
                    let s = 2.0 * nf + a + b;
                    let c0 = 2.0 * nf * (nf + a + b) * (s - 2.0);
                    let c1 = s - 1.0;
                    let c2 = s * (s - 2.0);
                    let c3 = a * a - b * b;
                    let c4 = 2.0 * (nf + a - 1.0) * (nf + b - 1.0) * s;
                    values[n] = (c1 * (c2 * u + c3) * values[n - 1] - c4 * values[n - 2]) / c0;
                    d_values[n] =
                        (c1 * (c2 * u + c3) * d_values[n - 1] + c1 * c2 * values[n - 1] - c4 * d_values[n - 2]) / c0;
                }
                d_values[..=order].iter_mut().for_each(|v| *v *= du);
            }
            PolyFamily::Taylor => {
                let inside = x.abs() <= TAYLOR_CLAMP;
                let xc = x.clamp(-TAYLOR_CLAMP, TAYLOR_CLAMP);
                values[0] = 1.0;
                d_values[0] = 0.0;
                for d in 1..=order {
                    values[d] = values[d - 1] * xc;
                    d_values[d] = if inside { d as f64 * values[d - 1] } else { 0.0 };
                }
            }
        }
    }
}

pub fn poly_basis(x: &[f64], family: PolyFamily, order: usize) -> BasisEval {
    let nb = order + 1;
    let mut values = Tensor::zeros(&[x.len(), nb]);
    let mut d_values = Tensor::zeros(&[x.len(), nb]);
    for (r, &xi) in x.iter().enumerate() {
        family.eval_into(
            order,
            xi,
            &mut values.data_mut()[r * nb..(r + 1) * nb],
            &mut d_values.data_mut()[r * nb..(r + 1) * nb],
        );
    }
    BasisEval { values, d_values }
}

/// Normalisation constant of the Mexican-hat wavelet, `2 / (√3 · π^¼)`.
pub fn mexican_hat_norm() -> f64 {
    2.0 / (3f64.sqrt() * std::f64::consts::PI.powf(0.25))
}

/// Mexican-hat wavelet `ψ(z)` and `ψ'(z)`.
#[inline]
pub fn mexican_hat(z: f64) -> (f64, f64) {
    let c = mexican_hat_norm();
    let g = (-0.5 * z * z).exp();
    (c * (1.0 - z * z) * g, c * g * z * (z * z - 3.0))
}

/// Wavelet basis values with partials w.r.t. input, translation and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletEval {
    pub basis: BasisEval,
    pub d_translations: Tensor,
    pub d_scales: Tensor,
}

pub fn wavelet_basis(x: &[f64], translations: &[f64], scales: &[f64]) -> Result<WaveletEval> {
    if translations.len() != scales.len() {
        return Err(Error::dim("translations and scales differ in length"));
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::domain(format!("wavelet scale must be positive, got {s}")));
    }
    let nb = scales.len();
    let shape = [x.len(), nb];
    let mut values = Tensor::zeros(&shape);
    let mut dx = Tensor::zeros(&shape);
    let mut dt = Tensor::zeros(&shape);
    let mut ds = Tensor::zeros(&shape);
    for (r, &xi) in x.iter().enumerate() {
        for m in 0..nb {
            let z = (xi - translations[m]) / scales[m];
            let (psi, dpsi) = mexican_hat(z);
            let at = r * nb + m;
            values.data_mut()[at] = psi;
            dx.data_mut()[at] = dpsi / scales[m];
            dt.data_mut()[at] = -dpsi / scales[m];
            ds.data_mut()[at] = -dpsi * z / scales[m];
        }
    }
    Ok(WaveletEval {
        basis: BasisEval { values, d_values: dx },
        d_translations: dt,
        d_scales: ds,
    })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `SiLU(x) = x·σ(x)` and its derivative.
#[inline]
pub fn silu_scalar(x: f64) -> (f64, f64) {
    let s = sigmoid(x);
    (x * s, s * (1.0 + x * (1.0 - s)))
}

/// Elementwise SiLU returning `(y, dy/dx)`.
pub fn silu(x: &Tensor) -> (Tensor, Tensor) {
    let mut y = x.clone();
    let mut dy = x.clone();
    for ((yv, dv), &xv) in y.data_mut().iter_mut().zip(dy.data_mut()).zip(x.data()) {
        let (a, b) = silu_scalar(xv);
        *yv = a;
        *dv = b;
    }
    (y, dy)
}
