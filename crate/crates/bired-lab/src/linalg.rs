//! Symmetric positive definite solves via Cholesky factorization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Solve `A x = b` for symmetric positive definite `A`.
///
/// The caller is responsible for ridge-regularizing near-singular systems
/// before calling. Fails with a decomposition error on a non-positive pivot.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = match a.shape() {
        [r, c] if r == c => *r,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "solve_spd",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    };
    if b.numel() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_spd",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }

    let l = cholesky(a, n)?;

    // forward substitution: L y = b
    let mut y = b.data().to_vec();
    for i in 0..n {
        let mut acc = y[i];
        for j in 0..i {
            acc -= l[i * n + j] * y[j];
        }
        y[i] = acc / l[i * n + i];
    }
    // back substitution: L^T x = y
    let mut x = y;
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in i + 1..n {
            acc -= l[j * n + i] * x[j];
        }
        x[i] = acc / l[i * n + i];
    }
    Ok(Tensor::vector(x))
}

/// Lower-triangular Cholesky factor of `a`; reads the lower triangle only.
fn cholesky(a: &Tensor, n: usize) -> Result<Vec<f64>> {
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = src[i * n + j];
            for p in 0..j {
                acc -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return Err(Error::DecompositionFailure { pivot: i, value: acc });
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_system() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::vector(vec![2.0, 5.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert_eq!(x.data(), &[2.0, 5.0]);
    }

    #[test]
    fn diagonal_system() {
        let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]);
        let b = Tensor::vector(vec![2.0, 8.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-14);
        assert!((x.data()[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn random_spd_multiply_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let n = 8;
            let m = Tensor::matrix(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            // A = M^T M + I is SPD
            let mut a = m.matmul_tn(&m).unwrap();
            {
                let d = a.data_mut();
                for i in 0..n {
                    d[i * n + i] += 1.0;
                }
            }
            let b = Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let x = solve_spd(&a, &b).unwrap();
            let back = a.matvec(&x).unwrap();
            let rel = back.sub(&b).unwrap().norm2() / b.norm2();
            assert!(rel < 1e-8, "residual {rel}");
        }
    }

    #[test]
    fn non_spd_is_rejected() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]); // indefinite
        let b = Tensor::vector(vec![1.0, 1.0]);
        match solve_spd(&a, &b) {
            Err(Error::DecompositionFailure { .. }) => {}
            other => panic!("expected decomposition failure, got {other:?}"),
        }
    }
}
