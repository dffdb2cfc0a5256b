use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
///
/// The i-k-j order keeps the inner loop a contiguous axpy so the compiler
/// can vectorize it; summation order per output element is fixed.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

pub(crate) fn transpose_into<T: Scalar>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    };
    if k != k2 {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Transposed copy of a matrix.
pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let &[rows, cols] = a.shape() else {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "transpose needs a matrix".into(),
        });
    };
    let mut out = vec![T::zero(); rows * cols];
    transpose_into(rows, cols, a.data(), &mut out);
    Ok(Tensor::from_parts(vec![cols, rows], out))
}
