//! Kolmogorov–Arnold layer with a pluggable base-function family.
//!
//! Every edge `(j, i)` carries `φ_{j,i}(x) = w_a[j,i]·SiLU(x) + w_b[j,i]·Σ_m c[j,i,m]·F_m(x)`
//! and output `j` sums its incoming edges.
//!
//! For the grid and polynomial families `F_m` depends only on the input
//! coordinate, so the forward pass evaluates the basis once per
//! `(row, input)` and contracts it against the folded weight
//! `w_b[j,i]·c[j,i,m]` with a single matrix product. The wavelet family has
//! per-edge translations and scales and is evaluated edge by edge.

use super::{join, next_version, LayerGrads, Param, Parameters};
use crate::basis::{
    mexican_hat, silu_scalar, PolyFamily, SplineGrid, DEFAULT_GRID_RANGE, DEFAULT_GRID_SIZE, DEFAULT_POLY_ORDER,
    DEFAULT_SPLINE_DEGREE, DEFAULT_WAVELET_COUNT,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stats::Moments;
use crate::tensor::{gemm, Tensor, Trans};

/// Lower bound applied to wavelet scales after each optimizer update.
pub const MIN_WAVELET_SCALE: f64 = 1e-3;

/// Standard deviation of the initial base-function coefficients.
pub const COEFF_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KanVariant {
    BSpline,
    Chebyshev,
    Jacobi,
    Taylor,
    Wavelet,
}

impl KanVariant {
    pub const ALL: [KanVariant; 5] = [
        KanVariant::BSpline,
        KanVariant::Chebyshev,
        KanVariant::Jacobi,
        KanVariant::Taylor,
        KanVariant::Wavelet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KanVariant::BSpline => "bspline",
            KanVariant::Chebyshev => "chebyshev",
            KanVariant::Jacobi => "jacobi",
            KanVariant::Taylor => "taylor",
            KanVariant::Wavelet => "wavelet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "bspline" | "kan" | "spline" => KanVariant::BSpline,
            "chebyshev" | "cheby" => KanVariant::Chebyshev,
            "jacobi" => KanVariant::Jacobi,
            "taylor" => KanVariant::Taylor,
            "wavelet" | "wav" => KanVariant::Wavelet,
            _ => return None,
        })
    }
}

/// Hyperparameters of the base-function families.
#[derive(Clone, Debug, PartialEq)]
pub struct KanOptions {
    pub grid_size: usize,
    pub spline_degree: usize,
    pub grid_range: (f64, f64),
    pub poly_order: usize,
    pub jacobi_a: f64,
    pub jacobi_b: f64,
    pub wavelet_count: usize,
}

impl Default for KanOptions {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            spline_degree: DEFAULT_SPLINE_DEGREE,
            grid_range: DEFAULT_GRID_RANGE,
            poly_order: DEFAULT_POLY_ORDER,
            jacobi_a: 1.0,
            jacobi_b: 1.0,
            wavelet_count: DEFAULT_WAVELET_COUNT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Base {
    Spline(SplineGrid),
    Poly(PolyFamily, usize),
    Wavelet(usize),
}

impl Base {
    fn new(variant: KanVariant, opts: &KanOptions) -> Result<Self> {
        Ok(match variant {
            KanVariant::BSpline => Base::Spline(SplineGrid::uniform(
                opts.grid_size,
                opts.spline_degree,
                opts.grid_range.0,
                opts.grid_range.1,
            )?),
            KanVariant::Chebyshev => Base::Poly(PolyFamily::Chebyshev, opts.poly_order),
            KanVariant::Jacobi => Base::Poly(
                PolyFamily::Jacobi {
                    a: opts.jacobi_a,
                    b: opts.jacobi_b,
                },
                opts.poly_order,
            ),
            KanVariant::Taylor => Base::Poly(PolyFamily::Taylor, opts.poly_order),
            KanVariant::Wavelet => {
                if opts.wavelet_count == 0 {
                    return Err(Error::config("wavelet count must be positive"));
                }
                Base::Wavelet(opts.wavelet_count)
            }
        })
    }

    fn n_basis(&self) -> usize {
        match self {
            Base::Spline(g) => g.n_basis(),
            Base::Poly(_, order) => order + 1,
            Base::Wavelet(n) => *n,
        }
    }

    /// Input-only basis values; not valid for wavelets.
    fn eval_into(&self, x: f64, v: &mut [f64], d: &mut [f64]) {
        match self {
            Base::Spline(g) => g.eval_into(x, v, d),
            Base::Poly(fam, order) => fam.eval_into(*order, x, v, d),
            Base::Wavelet(_) => unreachable!("wavelet basis depends on the edge"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    variant: KanVariant,
    options: KanOptions,
    base: Base,
    n_in: usize,
    n_out: usize,
    /// `[n_out, n_in]`
    pub w_a: Param,
    /// `[n_out, n_in]`
    pub w_b: Param,
    /// `[n_out, n_in, n_basis]`
    pub coeffs: Param,
    /// Wavelet only, `[n_out, n_in, n_basis]`.
    pub translations: Option<Param>,
    /// Wavelet only, `[n_out, n_in, n_basis]`, strictly positive.
    pub scales: Option<Param>,
    version: u64,
}

/// Activations retained by [`KanLayer::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct KanCache {
    x: Tensor,
    silu: Tensor,
    d_silu: Tensor,
    /// `[rows, n_in * n_basis]`; empty for wavelets.
    basis: Tensor,
    d_basis: Tensor,
    version: u64,
}

impl KanLayer {
    /// Fresh layer: Xavier-uniform `w_a`, `w_b = 1`, `c ~ N(0, 0.1²)`.
    /// Wavelet translations start evenly spread over the grid range with
    /// scales equal to their spacing.
    pub fn new(variant: KanVariant, n_in: usize, n_out: usize, opts: &KanOptions, rng: &mut SeededRng) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::config("KAN layer dimensions must be positive"));
        }
        let base = Base::new(variant, opts)?;
        let nb = base.n_basis();
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let w_a = rng.uniform_tensor(&[n_out, n_in], -bound, bound);
        let w_b = Tensor::full(&[n_out, n_in], 1.0);
        let coeffs = rng.normal_tensor(&[n_out, n_in, nb], 0.0, COEFF_INIT_STD)?;
        let wavelet = if variant == KanVariant::Wavelet {
            let (lo, hi) = opts.grid_range;
            let step = if nb > 1 { (hi - lo) / (nb - 1) as f64 } else { 1.0 };
            let centers: Vec<f64> = (0..nb)
                .map(|m| if nb > 1 { lo + step * m as f64 } else { 0.5 * (lo + hi) })
                .collect();
            let t: Vec<f64> = (0..n_out * n_in).flat_map(|_| centers.iter().copied()).collect();
            Some((
                Tensor::new(&[n_out, n_in, nb], t)?,
                Tensor::full(&[n_out, n_in, nb], step),
            ))
        } else {
            None
        };
        Self::from_params(variant, opts.clone(), w_a, w_b, coeffs, wavelet)
    }

    pub fn from_params(
        variant: KanVariant,
        options: KanOptions,
        w_a: Tensor,
        w_b: Tensor,
        coeffs: Tensor,
        wavelet: Option<(Tensor, Tensor)>,
    ) -> Result<Self> {
        let base = Base::new(variant, &options)?;
        let (n_out, n_in) = w_a.dims2()?;
        let nb = base.n_basis();
        w_b.expect_shape(&[n_out, n_in])?;
        coeffs.expect_shape(&[n_out, n_in, nb])?;
        let (translations, scales) = match (variant, wavelet) {
            (KanVariant::Wavelet, Some((t, s))) => {
                t.expect_shape(&[n_out, n_in, nb])?;
                s.expect_shape(&[n_out, n_in, nb])?;
                if s.data().iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::domain("wavelet scales must be strictly positive"));
                }
                (Some(Param::new(t)), Some(Param::new(s)))
            }
            (KanVariant::Wavelet, None) => return Err(Error::config("wavelet layer needs translations and scales")),
            (_, Some(_)) => return Err(Error::config("only wavelet layers take translations and scales")),
            (_, None) => (None, None),
        };
        Ok(Self {
            variant,
            options,
            base,
            n_in,
            n_out,
            w_a: Param::new(w_a),
            w_b: Param::new(w_b),
            coeffs: Param::new(coeffs),
            translations,
            scales,
            version: next_version(),
        })
    }

    pub fn variant(&self) -> KanVariant {
        self.variant
    }

    pub fn options(&self) -> &KanOptions {
        &self.options
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_basis(&self) -> usize {
        self.base.n_basis()
    }

    /// Replaces `w_b`, e.g. after pre-sampling statistics are known.
    pub fn set_w_b(&mut self, w_b: Tensor) -> Result<()> {
        w_b.expect_shape(&[self.n_out, self.n_in])?;
        self.w_b.value = w_b;
        self.version = next_version();
        Ok(())
    }

    /// Restores parameter constraints after an unconstrained update.
    pub fn project(&mut self) {
        if let Some(s) = self.scales.as_mut() {
            for v in s.value.data_mut() {
                if !(*v >= MIN_WAVELET_SCALE) {
                    *v = MIN_WAVELET_SCALE;
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (rows, n_in) = x.dims2()?;
        if n_in != self.n_in {
            return Err(Error::dim(format!(
                "KAN layer expects {} inputs, got {n_in}",
                self.n_in
            )));
        }
        Ok(rows)
    }

    fn silu_of(x: &Tensor) -> (Tensor, Tensor) {
        crate::basis::silu(x)
    }

    /// `w_b[j,i]·c[j,i,m]` laid out as `[n_out, n_in * n_basis]`.
    fn folded_weight(&self) -> Tensor {
        let nb = self.n_basis();
        let mut w = self.coeffs.value.clone();
        let wb = self.w_b.value.data();
        for (e, chunk) in w.data_mut().chunks_mut(nb).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= wb[e]);
        }
        w.reshape(&[self.n_out, self.n_in * nb]).expect("same length")
    }

    fn basis_matrix(&self, x: &Tensor) -> (Tensor, Tensor) {
        let nb = self.n_basis();
        let rows = x.dim(0);
        let mut f = Tensor::zeros(&[rows, self.n_in * nb]);
        let mut df = Tensor::zeros(&[rows, self.n_in * nb]);
        for (e, &xv) in x.data().iter().enumerate() {
            let span = e * nb..(e + 1) * nb;
            self.base
                .eval_into(xv, &mut f.data_mut()[span.clone()], &mut df.data_mut()[span]);
        }
        (f, df)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, KanCache)> {
        let rows = self.check_input(x)?;
        let (s, ds) = Self::silu_of(x);
        let mut y = Tensor::zeros(&[rows, self.n_out]);
        gemm(&s, Trans::No, &self.w_a.value, Trans::Yes, &mut y, false)?;
        let (basis, d_basis) = match self.base {
            Base::Wavelet(_) => {
                self.wavelet_forward(x, &mut y);
                (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
            }
            _ => {
                let (f, df) = self.basis_matrix(x);
                gemm(&f, Trans::No, &self.folded_weight(), Trans::Yes, &mut y, true)?;
                (f, df)
            }
        };
        y.ensure_finite("KAN forward")?;
        Ok((
            y,
            KanCache {
                x: x.clone(),
                silu: s,
                d_silu: ds,
                basis,
                d_basis,
                version: self.version,
            },
        ))
    }

    fn wavelet_forward(&self, x: &Tensor, y: &mut Tensor) {
        let nb = self.n_basis();
        let t = self.translations.as_ref().expect("wavelet").value.data();
        let s = self.scales.as_ref().expect("wavelet").value.data();
        let c = self.coeffs.value.data();
        let wb = self.w_b.value.data();
        let rows = x.dim(0);
        for r in 0..rows {
            let xr = x.row(r);
            for j in 0..self.n_out {
                let mut acc = 0.0;
                for (i, &xv) in xr.iter().enumerate() {
                    let e = j * self.n_in + i;
                    let mut edge = 0.0;
                    for m in e * nb..(e + 1) * nb {
                        let (psi, _) = mexican_hat((xv - t[m]) / s[m]);
                        edge += c[m] * psi;
                    }
                    acc += wb[e] * edge;
                }
                y.data_mut()[r * self.n_out + j] += acc;
            }
        }
    }

    /// Analytic gradients in parameter order
    /// `[w_a, w_b, coeffs, (translations, scales)]`.
    pub fn backward(&self, cache: &KanCache, d_y: &Tensor) -> Result<LayerGrads> {
        if cache.version != self.version {
            return Err(Error::contract("KAN backward called with a stale cache"));
        }
        let rows = cache.x.dim(0);
        d_y.expect_shape(&[rows, self.n_out])?;
        let mut d_wa = Tensor::zeros(&[self.n_out, self.n_in]);
        gemm(d_y, Trans::Yes, &cache.silu, Trans::No, &mut d_wa, false)?;
        // cotangent reaching SiLU(x)
        let mut d_x = Tensor::zeros(&[rows, self.n_in]);
        gemm(d_y, Trans::No, &self.w_a.value, Trans::No, &mut d_x, false)?;
        for (g, ds) in d_x.data_mut().iter_mut().zip(cache.d_silu.data()) {
            *g *= ds;
        }

        if let Base::Wavelet(_) = self.base {
            let (d_wb, d_c, d_t, d_s) = self.wavelet_backward(&cache.x, d_y, &mut d_x);
            return Ok(LayerGrads {
                d_input: d_x,
                d_params: vec![d_wa, d_wb, d_c, d_t, d_s],
            });
        }

        let nb = self.n_basis();
        let mut d_folded = Tensor::zeros(&[self.n_out, self.n_in * nb]);
        gemm(d_y, Trans::Yes, &cache.basis, Trans::No, &mut d_folded, false)?;
        let mut d_wb = Tensor::zeros(&[self.n_out, self.n_in]);
        let mut d_c = Tensor::zeros(&[self.n_out, self.n_in, nb]);
        let c = self.coeffs.value.data();
        let wb = self.w_b.value.data();
        for e in 0..self.n_out * self.n_in {
            let span = e * nb..(e + 1) * nb;
            let g = &d_folded.data()[span.clone()];
            d_wb.data_mut()[e] = g.iter().zip(&c[span.clone()]).map(|(a, b)| a * b).sum();
            for (dc, gv) in d_c.data_mut()[span].iter_mut().zip(g) {
                *dc = gv * wb[e];
            }
        }
        let mut d_f = Tensor::zeros(&[rows, self.n_in * nb]);
        gemm(d_y, Trans::No, &self.folded_weight(), Trans::No, &mut d_f, false)?;
        for r in 0..rows {
            for i in 0..self.n_in {
                let span = (r * self.n_in + i) * nb..(r * self.n_in + i + 1) * nb;
                let s: f64 = d_f.data()[span.clone()]
                    .iter()
                    .zip(&cache.d_basis.data()[span])
                    .map(|(a, b)| a * b)
                    .sum();
                d_x.data_mut()[r * self.n_in + i] += s;
            }
        }
        Ok(LayerGrads {
            d_input: d_x,
            d_params: vec![d_wa, d_wb, d_c],
        })
    }

    fn wavelet_backward(&self, x: &Tensor, d_y: &Tensor, d_x: &mut Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
        let nb = self.n_basis();
        let shape3 = [self.n_out, self.n_in, nb];
        let mut d_wb = Tensor::zeros(&[self.n_out, self.n_in]);
        let mut d_c = Tensor::zeros(&shape3);
        let mut d_t = Tensor::zeros(&shape3);
        let mut d_s = Tensor::zeros(&shape3);
        let t = self.translations.as_ref().expect("wavelet").value.data();
        let s = self.scales.as_ref().expect("wavelet").value.data();
        let c = self.coeffs.value.data();
        let wb = self.w_b.value.data();
        let rows = x.dim(0);
        for r in 0..rows {
            for j in 0..self.n_out {
                let g = d_y.data()[r * self.n_out + j];
                if g == 0.0 {
                    continue;
                }
                for i in 0..self.n_in {
                    let xv = x.data()[r * self.n_in + i];
                    let e = j * self.n_in + i;
                    let gw = g * wb[e];
                    let mut edge = 0.0;
                    let mut dx = 0.0;
                    for m in e * nb..(e + 1) * nb {
                        let inv_s = 1.0 / s[m];
                        let z = (xv - t[m]) * inv_s;
                        let (psi, dpsi) = mexican_hat(z);
                        edge += c[m] * psi;
                        d_c.data_mut()[m] += gw * psi;
                        let k = gw * c[m] * dpsi * inv_s;
                        dx += k;
                        d_t.data_mut()[m] -= k;
                        d_s.data_mut()[m] -= k * z;
                    }
                    d_wb.data_mut()[e] += g * edge;
                    d_x.data_mut()[r * self.n_in + i] += dx;
                }
            }
        }
        (d_wb, d_c, d_t, d_s)
    }

    pub fn accumulate(&mut self, grads: &LayerGrads) -> Result<()> {
        let mut slots = vec![&mut self.w_a, &mut self.w_b, &mut self.coeffs];
        if let (Some(t), Some(s)) = (self.translations.as_mut(), self.scales.as_mut()) {
            slots.push(t);
            slots.push(s);
        }
        grads.accumulate_into(slots)
    }

    /// Value of the base-function part `Σ_m c[j,i,m]·F_m(x)` of edge `(j, i)`.
    pub fn edge_base(&self, j: usize, i: usize, x: f64) -> f64 {
        let nb = self.n_basis();
        let e = j * self.n_in + i;
        let c = &self.coeffs.value.data()[e * nb..(e + 1) * nb];
        match &self.base {
            Base::Wavelet(_) => {
                let t = &self.translations.as_ref().expect("wavelet").value.data()[e * nb..(e + 1) * nb];
                let s = &self.scales.as_ref().expect("wavelet").value.data()[e * nb..(e + 1) * nb];
                (0..nb).map(|m| c[m] * mexican_hat((x - t[m]) / s[m]).0).sum()
            }
            base => {
                let mut v = vec![0.0; nb];
                let mut d = vec![0.0; nb];
                base.eval_into(x, &mut v, &mut d);
                v.iter().zip(c).map(|(a, b)| a * b).sum()
            }
        }
    }

    /// Full edge function `φ_{j,i}(x)`.
    pub fn edge_value(&self, j: usize, i: usize, x: f64) -> f64 {
        let e = j * self.n_in + i;
        self.w_a.value.data()[e] * silu_scalar(x).0 + self.w_b.value.data()[e] * self.edge_base(j, i, x)
    }

    /// Moments of the base-function output `Σ_m c[j,i,m]·F_m(x[r,i])` over
    /// every `(row, output, input)` triple.
    pub fn base_output_moments(&self, x: &Tensor) -> Result<Moments> {
        let rows = self.check_input(x)?;
        let nb = self.n_basis();
        let mut acc = Moments::default();
        let mut buf = Vec::with_capacity(self.n_out * self.n_in);
        match self.base {
            Base::Wavelet(_) => {
                for r in 0..rows {
                    buf.clear();
                    for j in 0..self.n_out {
                        for i in 0..self.n_in {
                            buf.push(self.edge_base(j, i, x.get2(r, i)));
                        }
                    }
                    acc.merge(&Moments::from_slice(&buf));
                }
            }
            _ => {
                let (f, _) = self.basis_matrix(x);
                let c = self.coeffs.value.data();
                for r in 0..rows {
                    buf.clear();
                    for j in 0..self.n_out {
                        for i in 0..self.n_in {
                            let e = j * self.n_in + i;
                            let fr = &f.data()[(r * self.n_in + i) * nb..(r * self.n_in + i + 1) * nb];
                            buf.push(fr.iter().zip(&c[e * nb..(e + 1) * nb]).map(|(a, b)| a * b).sum());
                        }
                    }
                    acc.merge(&Moments::from_slice(&buf));
                }
            }
        }
        Ok(acc)
    }
}

impl Parameters for KanLayer {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "w_a"), &self.w_a));
        out.push((join(prefix, "w_b"), &self.w_b));
        out.push((join(prefix, "coeffs"), &self.coeffs));
        if let (Some(t), Some(s)) = (&self.translations, &self.scales) {
            out.push((join(prefix, "translations"), t));
            out.push((join(prefix, "scales"), s));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.version = next_version();
        out.push((join(prefix, "w_a"), &mut self.w_a));
        out.push((join(prefix, "w_b"), &mut self.w_b));
        out.push((join(prefix, "coeffs"), &mut self.coeffs));
        if let (Some(t), Some(s)) = (self.translations.as_mut(), self.scales.as_mut()) {
            out.push((join(prefix, "translations"), t));
            out.push((join(prefix, "scales"), s));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{cox_de_boor, mexican_hat_norm};
    use crate::gradcheck::{check_layer, LayerUnderTest};

    const ALL: [KanVariant; 5] = KanVariant::ALL;

    /// Edge-by-edge evaluation of the layer written directly from the edge
    /// formula, with its own basis code paths.
    fn edge_loop_oracle(layer: &KanLayer, x: &Tensor) -> Tensor {
        let opts = layer.options();
        let nb = layer.n_basis();
        let (rows, n_in) = x.dims2().unwrap();
        let n_out = layer.n_out();
        let mut y = Tensor::zeros(&[rows, n_out]);
        let basis_at = |e: usize, xv: f64| -> Vec<f64> {
            match layer.variant() {
                KanVariant::BSpline => {
                    let g =
                        SplineGrid::uniform(opts.grid_size, opts.spline_degree, opts.grid_range.0, opts.grid_range.1)
                            .unwrap();
                    let xc = xv.clamp(opts.grid_range.0, opts.grid_range.1);
                    cox_de_boor(xc, g.knots(), opts.spline_degree)
                }
                KanVariant::Chebyshev => {
                    let u = xv.tanh();
                    (0..nb).map(|d| (d as f64 * u.acos()).cos()).collect()
                }
                KanVariant::Jacobi => {
                    // a = b = 1 closed forms up to degree 3
                    let u = xv.tanh();
                    let all = [1.0, 2.0 * u, 3.75 * u * u - 0.75, 7.0 * u * u * u - 3.0 * u];
                    all[..nb].to_vec()
                }
                KanVariant::Taylor => {
                    let xc = xv.clamp(-3.0, 3.0);
                    (0..nb).map(|d| xc.powi(d as i32)).collect()
                }
                KanVariant::Wavelet => {
                    let t = &layer.translations.as_ref().unwrap().value.data()[e * nb..(e + 1) * nb];
                    let s = &layer.scales.as_ref().unwrap().value.data()[e * nb..(e + 1) * nb];
                    (0..nb)
                        .map(|m| {
                            let z = (xv - t[m]) / s[m];
                            mexican_hat_norm() * (1.0 - z * z) * (-z * z / 2.0).exp()
                        })
                        .collect()
                }
            }
        };
        for r in 0..rows {
            for j in 0..n_out {
                let mut acc = 0.0;
                for i in 0..n_in {
                    let xv = x.get2(r, i);
                    let e = j * n_in + i;
                    let silu = xv / (1.0 + (-xv).exp());
                    let b = basis_at(e, xv);
                    let c = &layer.coeffs.value.data()[e * nb..(e + 1) * nb];
                    let spline: f64 = b.iter().zip(c).map(|(p, q)| p * q).sum();
                    acc += layer.w_a.value.data()[e] * silu + layer.w_b.value.data()[e] * spline;
                }
                y.set2(r, j, acc);
            }
        }
        y
    }

    fn random_layer(variant: KanVariant, n_in: usize, n_out: usize, seed: u64) -> KanLayer {
        let mut rng = SeededRng::new(seed);
        let mut layer = KanLayer::new(variant, n_in, n_out, &KanOptions::default(), &mut rng).unwrap();
        // move away from the w_b = 1 init so w_b gradients are exercised
        let w_b = rng.normal_tensor(&[n_out, n_in], 1.0, 0.5).unwrap();
        layer.set_w_b(w_b).unwrap();
        if let Some(s) = layer.scales.as_mut() {
            s.value = rng.uniform_tensor(s.value.shape(), 0.4, 1.5);
        }
        if let Some(t) = layer.translations.as_mut() {
            t.value = rng.normal_tensor(t.value.shape(), 0.0, 1.0).unwrap();
        }
        layer
    }

    #[test]
    fn zero_weights_give_zero_output() {
        for v in ALL {
            let mut layer = random_layer(v, 3, 2, 1);
            layer.w_a.value.fill(0.0);
            layer.set_w_b(Tensor::zeros(&[2, 3])).unwrap();
            let x = SeededRng::new(2).normal_tensor(&[5, 3], 0.0, 2.0).unwrap();
            let (y, _) = layer.forward(&x).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn residual_only_path_is_silu() {
        let mut layer = random_layer(KanVariant::BSpline, 1, 1, 3);
        layer.w_a.value = Tensor::full(&[1, 1], 1.0);
        layer.coeffs.value.fill(0.0);
        let x = Tensor::new(&[4, 1], vec![-3.0, -0.5, 0.0, 2.5]).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        for (yv, &xv) in y.data().iter().zip(x.data()) {
            assert!((yv - silu_scalar(xv).0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_edge_loop_oracle() {
        for v in ALL {
            let layer = random_layer(v, 3, 2, 4);
            let x = SeededRng::new(5).normal_tensor(&[4, 3], 0.0, 1.5).unwrap();
            let (y, _) = layer.forward(&x).unwrap();
            let oracle = edge_loop_oracle(&layer, &x);
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12, "{v:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn input_dimension_mismatch() {
        let layer = random_layer(KanVariant::Taylor, 3, 2, 6);
        assert!(matches!(
            layer.forward(&Tensor::zeros(&[2, 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        for v in ALL {
            let layer = random_layer(v, 3, 2, 7);
            let x = SeededRng::new(8).normal_tensor(&[4, 3], 0.0, 1.0).unwrap();
            let (_, cache) = layer.forward(&x).unwrap();
            let g = layer.backward(&cache, &Tensor::zeros(&[4, 2])).unwrap();
            assert!(g.d_input.data().iter().all(|&v| v == 0.0));
            for t in &g.d_params {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn stale_cache_is_a_contract_error() {
        let mut layer = random_layer(KanVariant::Jacobi, 2, 2, 9);
        let x = Tensor::zeros(&[1, 2]);
        let (_, cache) = layer.forward(&x).unwrap();
        layer.set_w_b(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            layer.backward(&cache, &Tensor::zeros(&[1, 2])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batch_rows_are_independent() {
        for v in ALL {
            let layer = random_layer(v, 3, 2, 10);
            let mut rng = SeededRng::new(11);
            let x = rng.normal_tensor(&[2, 3], 0.0, 1.0).unwrap();
            let dy = rng.normal_tensor(&[2, 2], 0.0, 1.0).unwrap();
            let (_, c1) = layer.forward(&x).unwrap();
            let g1 = layer.backward(&c1, &dy).unwrap();
            let mut x2 = x.clone();
            for v in x2.row_mut(0) {
                *v += 0.37;
            }
            let (_, c2) = layer.forward(&x2).unwrap();
            let g2 = layer.backward(&c2, &dy).unwrap();
            assert_eq!(g1.d_input.row(1), g2.d_input.row(1));
        }
    }

    #[test]
    fn every_variant_passes_gradient_check() {
        for v in ALL {
            let layer = random_layer(v, 3, 2, 12);
            let x = SeededRng::new(13).normal_tensor(&[4, 3], 0.0, 1.0).unwrap();
            let report = check_layer(LayerUnderTest::Kan(layer), x, 14, 1e-5).unwrap();
            assert!(report.passed(), "{v:?}\n{report}");
        }
    }
}
