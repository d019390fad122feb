//! Dense row-major `f64` tensors and the handful of kernels the network needs.
//!
//! Every kernel here is single-threaded and sums in a fixed order, so two
//! runs on the same inputs produce bitwise-equal results.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::dim(format!("row {i} has {} columns, expected {n}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let n = self.shape[1];
        self.data[i * n + j] = v;
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.shape[1];
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Gathers the listed rows of a matrix into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Self {
        let n = self.shape[1];
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            shape: vec![rows.len(), n],
            data,
        }
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(&[n, m], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!("expected shape {:?}, got {:?}", shape, self.shape)));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns an error naming `what` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }
}

/// Which operand of a product is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = op(a) · op(b)` (when `accumulate` is false) or `c += op(a) · op(b)`.
///
/// Rank-2 only. Transposition is expressed through strides, no copies.
pub fn gemm(a: &Tensor, ta: Trans, b: &Tensor, tb: Trans, c: &mut Tensor, accumulate: bool) -> Result<()> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k, rsa, csa) = match ta {
        Trans::No => (ar, ac, ac as isize, 1isize),
        Trans::Yes => (ac, ar, 1isize, ac as isize),
    };
    let (k2, n, rsb, csb) = match tb {
        Trans::No => (br, bc, bc as isize, 1isize),
        Trans::Yes => (bc, br, 1isize, bc as isize),
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    c.expect_shape(&[m, n])?;
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return Ok(());
    }
    // SAFETY: dimensions and strides were derived from the tensors' own
    // shapes above, so every index the kernel touches is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// Dense product of `a[m,k]` and `b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, Trans::No, b, Trans::No)
}

/// Dense product with optional transposition of either side.
pub fn matmul_t(a: &Tensor, ta: Trans, b: &Tensor, tb: Trans) -> Result<Tensor> {
    let m = match ta {
        Trans::No => a.dims2()?.0,
        Trans::Yes => a.dims2()?.1,
    };
    let n = match tb {
        Trans::No => b.dims2()?.1,
        Trans::Yes => b.dims2()?.0,
    };
    let mut c = Tensor::zeros(&[m, n]);
    gemm(a, ta, b, tb, &mut c, false)?;
    c.ensure_finite("matmul")?;
    Ok(c)
}

/// Population mean and variance along `axis`.
///
/// The reduced axis is dropped from both output shapes. Uses two passes
/// (mean first, then centred squares).
pub fn reduce_moments(x: &Tensor, axis: usize) -> Result<(Tensor, Tensor)> {
    if axis >= x.ndim() {
        return Err(Error::domain(format!(
            "axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let n = x.shape[axis];
    if n == 0 {
        return Err(Error::domain("cannot take moments over an empty axis"));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out_shape = x.shape.clone();
    out_shape.remove(axis);
    let mut mean = vec![0.0; outer * inner];
    let mut var = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| x.data[(o * n + j) * inner + i];
            let mu = (0..n).map(at).sum::<f64>() / n as f64;
            let v = (0..n).map(|j| (at(j) - mu).powi(2)).sum::<f64>() / n as f64;
            mean[o * inner + i] = mu;
            var[o * inner + i] = v;
        }
    }
    Ok((Tensor::new(&out_shape, mean)?, Tensor::new(&out_shape, var)?))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = x.clone();
    for i in 0..m {
        softmax_in_place(&mut out.data[i * n..(i + 1) * n]);
    }
    Ok(out)
}

/// Softmax of one row in place. Entries equal to `-inf` receive zero weight.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                c.set2(i, j, s);
            }
        }
        c
    }

    #[test]
    fn identity_and_zero_products() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(7);
        let a = rng.normal_tensor(&[5, 4], 0.0, 1.0).unwrap();
        let b = rng.normal_tensor(&[4, 3], 0.0, 1.0).unwrap();
        let c = matmul(&a, &b).unwrap();
        let oracle = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(oracle.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = SeededRng::new(3);
        let a = rng.normal_tensor(&[6, 4], 0.0, 1.0).unwrap();
        let b = rng.normal_tensor(&[6, 5], 0.0, 1.0).unwrap();
        let c = matmul_t(&a, Trans::Yes, &b, Trans::No).unwrap();
        let oracle = naive_matmul(&a.transpose2().unwrap(), &b);
        for (x, y) in c.data().iter().zip(oracle.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let d = matmul_t(&b, Trans::Yes, &a, Trans::No).unwrap();
        let e = matmul_t(
            &a.transpose2().unwrap(),
            Trans::No,
            &b.transpose2().unwrap(),
            Trans::Yes,
        )
        .unwrap();
        assert_eq!(d.transpose2().unwrap().shape(), e.shape());
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn moments_small_cases() {
        let (m, v) = reduce_moments(&Tensor::new(&[3], vec![3.0; 3]).unwrap(), 0).unwrap();
        assert_eq!((m.data()[0], v.data()[0]), (3.0, 0.0));
        let (m, v) = reduce_moments(&Tensor::new(&[2], vec![1.0, 3.0]).unwrap(), 0).unwrap();
        assert_eq!((m.data()[0], v.data()[0]), (2.0, 1.0));
        assert!(reduce_moments(&Tensor::zeros(&[0]), 0).is_err());
        assert!(reduce_moments(&Tensor::zeros(&[2]), 1).is_err());
    }

    #[test]
    fn moments_match_two_pass_oracle_and_drop_axis() {
        let mut rng = SeededRng::new(11);
        let x = rng.normal_tensor(&[100], 2.0, 3.0).unwrap();
        let (m, v) = reduce_moments(&x, 0).unwrap();
        let mu: f64 = x.data().iter().sum::<f64>() / 100.0;
        let var: f64 = x.data().iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / 100.0;
        assert!((m.data()[0] - mu).abs() <= 1e-12 * mu.abs());
        assert!((v.data()[0] - var).abs() <= 1e-12 * var);

        let y = rng.normal_tensor(&[2, 3, 4], 0.0, 1.0).unwrap();
        let (m, v) = reduce_moments(&y, 1).unwrap();
        assert_eq!(m.shape(), &[2, 4]);
        assert_eq!(v.shape(), &[2, 4]);
        let col: Vec<f64> = (0..3).map(|j| y.data()[(1 * 3 + j) * 4 + 2]).collect();
        let mu = col.iter().sum::<f64>() / 3.0;
        assert!((m.data()[1 * 4 + 2] - mu).abs() < 1e-14);
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_rows(&Tensor::new(&[1, 3], vec![0.0; 3]).unwrap()).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::new(&[1, 2], vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(
                row in proptest::collection::vec(-50.0f64..50.0, 1..12),
                shift in -100.0f64..100.0,
            ) {
                let n = row.len();
                let x = Tensor::new(&[1, n], row.clone()).unwrap();
                let s = softmax_rows(&x).unwrap();
                prop_assert!((s.sum() - 1.0).abs() < 1e-12);
                let shifted = Tensor::new(&[1, n], row.iter().map(|v| v + shift).collect()).unwrap();
                let t = softmax_rows(&shifted).unwrap();
                for (a, b) in s.data().iter().zip(t.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn identity_product_is_exact(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
                let a = Tensor::new(&[3, 4], vals).unwrap();
                prop_assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
            }
        }
    }
}
