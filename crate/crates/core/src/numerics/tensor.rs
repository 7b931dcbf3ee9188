use crate::error::{Error, Result};

use super::Scalar;

/// Dense row-major tensor with finite entries.
///
/// Matrices are rank 2. Biases and normalization parameters are rank 1 and
/// broadcast over rows where an operation says so.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn ensure_finite<T: Scalar>(data: &[T], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Self { shape, data })
    }

    /// Skips validation; callers guarantee shape consistency and finiteness.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    fn checked(shape: Vec<usize>, data: Vec<T>, op: &str) -> Result<Self> {
        ensure_finite(&data, op)?;
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Overwrites one entry; rejects non-finite values.
    pub fn set_flat(&mut self, index: usize, value: T) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite("set_flat".into()));
        }
        self.data[index] = value;
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::checked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect(), "map")
    }

    fn expect_matrix(&self, op: &str) -> Result<(usize, usize)> {
        if self.is_matrix() {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::shape(format!("{op} needs a matrix, got shape {:?}", self.shape)))
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::checked(vec![m, n], out, "matmul")
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op} shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::checked(self.shape.clone(), data, op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|v| v * s)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (_, n) = self.expect_matrix("add_row")?;
        if bias.numel() != n {
            return Err(Error::shape(format!(
                "add_row bias of length {} against {} columns",
                bias.numel(),
                n
            )));
        }
        let data = self
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias.data).map(|(&a, &b)| a + b))
            .collect();
        Self::checked(self.shape.clone(), data, "add_row")
    }

    pub fn relu(&self) -> Self {
        let data = self.data.iter().map(|&v| v.max(T::zero())).collect();
        Self::from_parts(self.shape.clone(), data)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        self.softmax_impl(false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&self) -> Result<Self> {
        self.softmax_impl(true)
    }

    fn softmax_impl(&self, causal: bool) -> Result<Self> {
        let (m, n) = self.expect_matrix("softmax")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let visible = if causal { (i + 1).min(n) } else { n };
            let row = &self.data[i * n..i * n + visible];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[i * n..i * n + visible];
            let mut total = T::zero();
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = (v - max).exp();
                total += *dst;
            }
            for dst in o.iter_mut() {
                *dst = *dst / total;
            }
        }
        Self::checked(vec![m, n], out, "softmax")
    }

    /// Per-row normalization with population variance, then `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        Ok(self.layer_norm_parts(gamma, beta, eps)?.0)
    }

    /// Returns the output, the normalized rows and per-row inverse standard deviations.
    pub(crate) fn layer_norm_parts(
        &self,
        gamma: &Self,
        beta: &Self,
        eps: T,
    ) -> Result<(Self, Self, Vec<T>)> {
        let (m, d) = self.expect_matrix("layer_norm")?;
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::shape(format!(
                "layer_norm parameters must have length {d}, got {} and {}",
                gamma.numel(),
                beta.numel()
            )));
        }
        let dn = T::of(d as f64);
        let mut out = vec![T::zero(); m * d];
        let mut xhat = vec![T::zero(); m * d];
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.data[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gamma.data[j] + beta.data[j];
            }
        }
        let out = Self::checked(vec![m, d], out, "layer_norm")?;
        Ok((out, Self::from_parts(vec![m, d], xhat), inv))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.expect_matrix("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape(format!(
                "column slice {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let data = (0..m)
            .flat_map(|i| self.data[i * n + start..i * n + start + len].iter().copied())
            .collect();
        Ok(Self::from_parts(vec![m, len], data))
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let m = first.expect_matrix("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.expect_matrix("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols row counts differ"));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_parts(vec![m, total], data))
    }

    /// Stacks the listed rows of a matrix.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        let (m, n) = self.expect_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::shape(format!("row {id} out of range for {m} rows")));
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Self::from_parts(vec![ids.len(), n], data))
    }
}

/// Cosine similarity of two equal-length vectors; `None` when either has zero norm.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Numerically stable softmax of one vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(v)))` with max subtraction.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&m(&[&[0.0], &[1.0]])).unwrap(), m(&[&[2.0], &[4.0]]));
        let z = Tensor::<f64>::zeros(&[3, 2]);
        assert_eq!(z.matmul(&a).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
        let v = Tensor::<f64>::zeros(&[3]);
        assert!(a.matmul(&v).is_err());
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let a = m(&[&[1e200]]);
        assert!(matches!(a.matmul(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = m(&[&[0.0, 0.0]]).softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = m(&[&[1f64.ln(), 3f64.ln()]]).softmax_rows().unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-15);
        let s = m(&[&[1000.0, 0.0]]).softmax_rows().unwrap();
        assert_abs_diff_eq!(s.data()[0], 1.0, epsilon = 1e-15);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = m(&[&[1.0, 5.0, 9.0], &[0.0, 0.0, 9.0], &[0.0, 0.0, 0.0]])
            .causal_softmax()
            .unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(s.row(1), &[0.5, 0.5, 0.0]);
        for v in s.row(2) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let x = m(&[&[1.0, 3.0]]);
        let one = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let zero = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let y = x.layer_norm(&one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        // A constant row normalizes to zero, so beta alone reproduces it.
        let c = m(&[&[2.5, 2.5, 2.5]]);
        let g0 = Tensor::vector(vec![0.0; 3]).unwrap();
        let b = Tensor::vector(vec![2.5; 3]).unwrap();
        assert_eq!(c.layer_norm(&g0, &b, 1e-5).unwrap(), c);
    }

    #[test]
    fn cosine_handles_zero_norm() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_abs_diff_eq!(cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn slicing_and_gathering() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let s = a.slice_cols(1, 2).unwrap();
        assert_eq!(s, m(&[&[2.0, 3.0], &[5.0, 6.0]]));
        let l = a.slice_cols(0, 1).unwrap();
        assert_eq!(Tensor::concat_cols(&[&l, &s]).unwrap(), a);
        assert_eq!(a.gather_rows(&[1, 1, 0]).unwrap().row(1), &[4.0, 5.0, 6.0]);
        assert!(a.slice_cols(2, 2).is_err());
        assert!(a.gather_rows(&[2]).is_err());
    }
}
