//! 2-D cross-correlation via im2col, with the matching backward pass.
//!
//! Samples in a batch are processed independently (in parallel when a rayon
//! pool with more than one thread is active). Per-sample weight gradients
//! are summed in sample order, so results do not depend on thread count.

use rayon::prelude::*;

use super::linalg::{gemm_acc, transpose_into};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeometry { stride, pad }
    }
}

/// `floor((extent + 2·pad − kernel) / stride) + 1`.
pub fn conv_output_extent(extent: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    if geom.stride == 0 {
        return Err(Error::ConvGeometry("stride must be at least 1".into()));
    }
    let padded = extent + 2 * geom.pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::ConvGeometry(format!(
            "kernel extent {kernel} does not fit padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / geom.stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    r: usize,
    s: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl Dims {
    fn resolve(input: &[usize], kernel: &[usize], geom: ConvGeometry) -> Result<(usize, Dims)> {
        let (&[n, c, h, w], &[k, kc, r, s]) = (input, kernel) else {
            return Err(Error::ConvGeometry(format!(
                "expected input [N,C,H,W] and kernel [K,C,R,S], got {input:?} and {kernel:?}"
            )));
        };
        if kc != c {
            return Err(Error::ShapeMismatch {
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        let oh = conv_output_extent(h, r, geom)?;
        let ow = conv_output_extent(w, s, geom)?;
        Ok((
            n,
            Dims {
                c,
                h,
                w,
                k,
                r,
                s,
                oh,
                ow,
                geom,
            },
        ))
    }

    fn patch(&self) -> usize {
        self.c * self.r * self.s
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_plane(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Input coordinate for output index `o` and kernel offset `q`, if inside
    /// the unpadded input.
    #[inline]
    fn source(&self, o: usize, q: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.geom.stride + q).checked_sub(self.geom.pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Unfold one sample into a `[C·R·S, OH·OW]` column matrix.
fn im2col<T: Scalar>(x: &[T], d: &Dims, col: &mut [T]) {
    let plane = d.out_plane();
    for c in 0..d.c {
        for r in 0..d.r {
            for s in 0..d.s {
                let row = &mut col[((c * d.r + r) * d.s + s) * plane..][..plane];
                for oy in 0..d.oh {
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    match d.source(oy, r, d.h) {
                        Some(iy) => {
                            let src = &x[(c * d.h + iy) * d.w..][..d.w];
                            for (ox, v) in dst.iter_mut().enumerate() {
                                *v = match d.source(ox, s, d.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                        None => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back into an input-shaped buffer, accumulating.
fn col2im<T: Scalar>(col: &[T], d: &Dims, x: &mut [T]) {
    let plane = d.out_plane();
    for c in 0..d.c {
        for r in 0..d.r {
            for s in 0..d.s {
                let row = &col[((c * d.r + r) * d.s + s) * plane..][..plane];
                for oy in 0..d.oh {
                    let Some(iy) = d.source(oy, r, d.h) else {
                        continue;
                    };
                    let dst = &mut x[(c * d.h + iy) * d.w..][..d.w];
                    for ox in 0..d.ow {
                        if let Some(ix) = d.source(ox, s, d.w) {
                            dst[ix] += row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, d) = Dims::resolve(input.shape(), kernel.shape(), geom)?;
    let out_len = d.k * d.out_plane();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(d.in_plane()))
        .for_each_init(
            || vec![T::zero(); d.patch() * d.out_plane()],
            |col, (y, x)| {
                im2col(x, &d, col);
                gemm_acc(d.k, d.patch(), d.out_plane(), kernel.data(), col, y);
            },
        );
    Ok(Tensor::from_parts(vec![n, d.k, d.oh, d.ow], out))
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = Dims::resolve(input.shape(), kernel.shape(), geom)?;
    let expected = [n, d.k, d.oh, d.ow];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            left: grad_out.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    let (patch, plane) = (d.patch(), d.out_plane());
    let mut kernel_t = vec![T::zero(); d.k * patch];
    transpose_into(d.k, patch, kernel.data(), &mut kernel_t);

    let mut grad_in = vec![T::zero(); input.numel()];
    let per_sample: Vec<Vec<T>> = grad_in
        .par_chunks_mut(d.in_plane())
        .zip(input.data().par_chunks(d.in_plane()))
        .zip(grad_out.data().par_chunks(d.k * plane))
        .map(|((gx, x), gy)| {
            let mut col = vec![T::zero(); patch * plane];
            let mut col_t = vec![T::zero(); patch * plane];
            im2col(x, &d, &mut col);
            transpose_into(patch, plane, &col, &mut col_t);
            let mut gw = vec![T::zero(); d.k * patch];
            gemm_acc(d.k, plane, patch, gy, &col_t, &mut gw);

            col.fill(T::zero());
            gemm_acc(patch, d.k, plane, &kernel_t, gy, &mut col);
            col2im(&col, &d, gx);
            gw
        })
        .collect();

    let mut grad_kernel = vec![T::zero(); d.k * patch];
    for gw in &per_sample {
        for (acc, &v) in grad_kernel.iter_mut().zip(gw) {
            *acc += v;
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), grad_in),
        Tensor::from_parts(kernel.shape().to_vec(), grad_kernel),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct seven-loop cross-correlation.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let [k, _, r, s] = w.shape().try_into().unwrap();
        let oh = (h + 2 * pad - r) / stride + 1;
        let ow = (wd + 2 * pad - s) / stride + 1;
        let mut out = vec![0.0; n * k * oh * ow];
        for b in 0..n {
            for o in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for ky in 0..r {
                                for kx in 0..s {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * c + ch) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c + ch) * r + ky) * s + kx];
                                }
                            }
                        }
                        out[((b * k + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = random(&[1, 1, 3, 3], 4);
        let w = Tensor::full([1, 1, 1, 1], 1.0).unwrap();
        assert_eq!(conv2d(&x, &w, ConvGeometry::new(1, 0)).unwrap(), x);
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d(&x, &x, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn strided_padded_matches_naive() {
        let x = random(&[2, 3, 8, 8], 11);
        let w = random(&[4, 3, 3, 3], 12);
        let y = conv2d(&x, &w, ConvGeometry::new(2, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        for (got, want) in y.data().iter().zip(naive(&x, &w, 2, 1)) {
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-3));
        }
    }

    #[test]
    fn impulse_kernel_reproduces_input() {
        let x = random(&[2, 3, 5, 5], 3);
        // One impulse per channel pair (c -> c) at the kernel center.
        let mut w = Tensor::<f64>::zeros([3, 3, 3, 3]).unwrap();
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        assert_eq!(conv2d(&x, &w, ConvGeometry::new(1, 1)).unwrap(), x);
    }

    #[test]
    fn infeasible_geometry() {
        let x = random(&[1, 1, 2, 2], 1);
        let w = random(&[1, 1, 5, 5], 1);
        assert!(matches!(
            conv2d(&x, &w, ConvGeometry::new(1, 1)),
            Err(Error::ConvGeometry(_))
        ));
        assert!(conv2d(&x, &random(&[1, 1, 1, 1], 1), ConvGeometry::new(0, 0)).is_err());
        assert!(matches!(
            conv2d(&x, &random(&[1, 2, 1, 1], 1), ConvGeometry::new(1, 0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let geom = ConvGeometry::new(2, 1);
        let x = random(&[2, 2, 5, 5], 21);
        let w = random(&[3, 2, 3, 3], 22);
        let gy = random(&[2, 3, 3, 3], 23);
        let (gx, gw) = conv2d_backward(&x, &w, &gy, geom).unwrap();
        let objective = |x: &Tensor<f64>, w: &Tensor<f64>| conv2d(x, w, geom).unwrap().dot(&gy).unwrap();
        let h = 1e-5;
        for i in 0..x.numel() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-8, "input {i}: {fd} vs {}", gx.data()[i]);
        }
        for i in 0..w.numel() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * h);
            assert!((fd - gw.data()[i]).abs() < 1e-8, "kernel {i}: {fd} vs {}", gw.data()[i]);
        }
    }
}
