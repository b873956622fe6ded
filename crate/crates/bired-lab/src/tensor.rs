//! Dense row-major f64 tensors.
//!
//! Values are immutable once constructed; `data` is reference-counted so
//! clones are cheap and safe to share across threads. Everything downstream
//! (model weights, keys, values, covariance, gradients) lives in this type.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when viewed as 2-D (matrices) or 1 for vectors.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Trailing dimension (row width).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank-0 tensor")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    /// Mutable access to the underlying buffer; copies only if shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::new(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::new(self.shape.clone(), data))
    }

    /// In-place `self += other`. Shapes must already agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += c * s;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.numel(), other.numel());
        dot(&self.data, &other.data)
    }

    pub fn norm2(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Standard matrix product `self[m,k] @ other[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::matrix(m, n, out))
    }

    /// `self[m,k] @ other[n,k]^T` — the natural product against `[out, in]`
    /// weight matrices.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul_nt")?;
        let (n, k2) = dims2(other, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_kernel(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::matrix(m, n, out))
    }

    /// `self[m,k]^T @ other[m,n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul_tn")?;
        let (m2, n) = dims2(other, "matmul_tn")?;
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; k * n];
        matmul_tn_kernel(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::matrix(k, n, out))
    }

    /// Matrix-vector product `self[m,n] @ v[n]`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(self, "matvec")?;
        if v.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let out = (0..m).map(|i| dot(self.row(i), &v.data)).collect();
        Ok(Tensor::vector(out))
    }

    /// Rank-one outer product `col[m] * row[n]^T` as an `[m,n]` matrix.
    pub fn outer(col: &Tensor, row: &Tensor) -> Tensor {
        let m = col.numel();
        let n = row.numel();
        let mut out = Vec::with_capacity(m * n);
        for &c in col.data() {
            out.extend(row.data().iter().map(|&r| c * r));
        }
        Tensor::matrix(m, n, out)
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (av, bv) in (&mut ac).zip(&mut bc) {
        for l in 0..8 {
            acc[l] = av[l].mul_add(bv[l], acc[l]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        tail = x.mul_add(*y, tail);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy_slice(dst: &mut [f64], c: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = s.mul_add(c, *d);
    }
}

/// Four simultaneous dot products of `a` against consecutive rows of `b`,
/// 8-lane accumulators so each load of `a` feeds four FMA chains.
#[inline]
fn dot4(a: &[f64], b: &[f64], k: usize) -> [f64; 4] {
    let (b0, rest) = b.split_at(k);
    let (b1, rest) = rest.split_at(k);
    let (b2, b3) = rest.split_at(k);
    let mut acc0 = [0.0f64; 8];
    let mut acc1 = [0.0f64; 8];
    let mut acc2 = [0.0f64; 8];
    let mut acc3 = [0.0f64; 8];
    let mut ac = a.chunks_exact(8);
    let mut c0 = b0.chunks_exact(8);
    let mut c1 = b1.chunks_exact(8);
    let mut c2 = b2.chunks_exact(8);
    let mut c3 = b3.chunks_exact(8);
    while let (Some(av), Some(x0), Some(x1), Some(x2), Some(x3)) =
        (ac.next(), c0.next(), c1.next(), c2.next(), c3.next())
    {
        for l in 0..8 {
            acc0[l] = av[l].mul_add(x0[l], acc0[l]);
            acc1[l] = av[l].mul_add(x1[l], acc1[l]);
            acc2[l] = av[l].mul_add(x2[l], acc2[l]);
            acc3[l] = av[l].mul_add(x3[l], acc3[l]);
        }
    }
    let mut s = [
        acc0.iter().sum::<f64>(),
        acc1.iter().sum::<f64>(),
        acc2.iter().sum::<f64>(),
        acc3.iter().sum::<f64>(),
    ];
    let rem = ac.remainder();
    let off = a.len() - rem.len();
    for (i, &av) in rem.iter().enumerate() {
        s[0] = av.mul_add(b0[off + i], s[0]);
        s[1] = av.mul_add(b1[off + i], s[1]);
        s[2] = av.mul_add(b2[off + i], s[2]);
        s[3] = av.mul_add(b3[off + i], s[3]);
    }
    s
}

/// `out[m,n] += a[m,k] @ b[k,n]`, ikj order with paired source rows.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 2 <= k {
            let c0 = a_row[p];
            let c1 = a_row[p + 1];
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            for j in 0..n {
                out_row[j] = b1[j].mul_add(c1, b0[j].mul_add(c0, out_row[j]));
            }
            p += 2;
        }
        if p < k {
            axpy_slice(out_row, a_row[p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[m,n] += a[m,k] @ b[n,k]^T`, blocked dot products. The b-row block
/// is the outer loop so it stays cache-hot across all rows of a.
pub(crate) fn matmul_nt_kernel(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    let mut j = 0;
    while j + 4 <= n {
        let b_block = &b[j * k..(j + 4) * k];
        for i in 0..m {
            let s = dot4(&a[i * k..(i + 1) * k], b_block, k);
            let out_row = &mut out[i * n + j..i * n + j + 4];
            out_row[0] += s[0];
            out_row[1] += s[1];
            out_row[2] += s[2];
            out_row[3] += s[3];
        }
        j += 4;
    }
    while j < n {
        for i in 0..m {
            out[i * n + j] += dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
        j += 1;
    }
}

/// `out[k,n] += a[m,k]^T @ b[m,n]`, accumulated as paired rank-one updates.
pub(crate) fn matmul_tn_kernel(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    let mut p = 0;
    while p + 2 <= m {
        let a0 = &a[p * k..(p + 1) * k];
        let a1 = &a[(p + 1) * k..(p + 2) * k];
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        for i in 0..k {
            let c0 = a0[i];
            let c1 = a1[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = b1[j].mul_add(c1, b0[j].mul_add(c0, out_row[j]));
            }
        }
        p += 2;
    }
    if p < m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            axpy_slice(&mut out[i * n..(i + 1) * n], a_pi, b_row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let v = Tensor::matrix(2, 1, vec![5.0, 7.0]);
        let out = p.matmul(&v).unwrap();
        assert_eq!(out.data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let c = a.matmul(&b).unwrap();
        // independent element-by-element oracle
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]);
        let b = Tensor::matrix(2, 3, vec![0.0; 6]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let nt = a.matmul_nt(&b).unwrap();
        // oracle: transpose b explicitly
        let mut bt = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                bt[j * 4 + i] = b.data()[i * 3 + j];
            }
        }
        let plain = a.matmul(&Tensor::matrix(3, 4, bt)).unwrap();
        for (x, y) in nt.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let c = random_matrix(&mut rng, 5, 2);
        let tn = a.matmul_tn(&c).unwrap();
        let mut at = vec![0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                at[j * 5 + i] = a.data()[i * 3 + j];
            }
        }
        let plain = Tensor::matrix(3, 5, at).matmul(&c).unwrap();
        for (x, y) in tn.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 6);
            let b = random_matrix(&mut rng, 6, 5);
            let c = random_matrix(&mut rng, 5, 3);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let denom = left.norm2().max(1e-30);
            let diff = left.sub(&right).unwrap().norm2();
            assert!(diff / denom < 1e-9, "associativity violated: {}", diff / denom);
        }
    }
}
