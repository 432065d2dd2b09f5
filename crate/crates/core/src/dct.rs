//! Orthonormal 2D DCT-II applied framewise.
//!
//! The transform is separable: `Y = B_h X B_w^T` with precomputed cosine
//! bases, numerically identical to the direct double sum but
//! O(HW(H+W)) instead of O(H^2 W^2). The bases are orthonormal, so the
//! inverse is the transpose and energy is preserved.

use std::sync::Arc;

use crate::graph::{EngineError, Graph, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, VideoBatch};

/// Precomputed cosine bases for one frame geometry. Immutable after
/// construction; safe to share across threads.
#[derive(Debug)]
pub struct DctPlan<T> {
    height: usize,
    width: usize,
    /// `basis_h[u * H + i] = alpha(u) * cos(pi (2i+1) u / 2H)`
    basis_h: Vec<T>,
    basis_w: Vec<T>,
}

fn basis<T: Scalar>(n: usize) -> Vec<T> {
    let mut b = vec![T::ZERO; n * n];
    let nf = n as f64;
    for u in 0..n {
        let alpha = if u == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            let angle = std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2.0 * nf);
            b[u * n + i] = T::from_f64(alpha * angle.cos());
        }
    }
    b
}

impl<T: Scalar> DctPlan<T> {
    pub fn new(height: usize, width: usize) -> Arc<Self> {
        assert!(height > 0 && width > 0, "frame extents must be positive");
        Arc::new(DctPlan { height, width, basis_h: basis(height), basis_w: basis(width) })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Max deviation of `B^T B` from the identity, for both bases.
    pub fn orthonormality_error(&self) -> f64 {
        let err = |b: &[T], n: usize| -> f64 {
            let mut worst = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0f64;
                    for u in 0..n {
                        s += b[u * n + i].to_f64() * b[u * n + j].to_f64();
                    }
                    let target = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((s - target).abs());
                }
            }
            worst
        };
        err(&self.basis_h, self.height).max(err(&self.basis_w, self.width))
    }

    /// One frame: `dst = B_h src B_w^T` (or the transpose pair when
    /// `inverse`). `src` and `dst` are row-major `H x W`.
    pub fn transform_frame(&self, src: &[T], dst: &mut [T], inverse: bool) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(src.len(), h * w);
        let mut tmp = vec![T::ZERO; h * w];
        // rows: tmp = M_h . src, with M_h = basis or its transpose
        for u in 0..h {
            for i in 0..h {
                let m = if inverse { self.basis_h[i * h + u] } else { self.basis_h[u * h + i] };
                let src_row = &src[i * w..(i + 1) * w];
                let tmp_row = &mut tmp[u * w..(u + 1) * w];
                for (t, &s) in tmp_row.iter_mut().zip(src_row.iter()) {
                    *t += m * s;
                }
            }
        }
        // cols: dst = tmp . M_w^T
        for u in 0..h {
            let tmp_row = &tmp[u * w..(u + 1) * w];
            let dst_row = &mut dst[u * w..(u + 1) * w];
            for (v, d) in dst_row.iter_mut().enumerate() {
                let mut s = T::ZERO;
                for j in 0..w {
                    let m =
                        if inverse { self.basis_w[j * w + v] } else { self.basis_w[v * w + j] };
                    s += tmp_row[j] * m;
                }
                *d = s;
            }
        }
    }

    /// Host-side 2D transform of one `H x W` frame.
    pub fn dct2(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        if frame.shape() != [self.height, self.width] {
            return Err(EngineError::ShapeMismatch {
                op: "dct2",
                details: format!(
                    "frame {:?} vs plan {}x{}",
                    frame.shape(),
                    self.height,
                    self.width
                ),
            });
        }
        let mut out = Tensor::zeros(frame.shape());
        self.transform_frame(frame.data(), out.data_mut(), false);
        Ok(out)
    }

    /// Transpose-basis transform; exact inverse of [`DctPlan::dct2`].
    pub fn idct2(&self, coeffs: &Tensor<T>) -> Result<Tensor<T>> {
        if coeffs.shape() != [self.height, self.width] {
            return Err(EngineError::ShapeMismatch {
                op: "idct2",
                details: format!(
                    "frame {:?} vs plan {}x{}",
                    coeffs.shape(),
                    self.height,
                    self.width
                ),
            });
        }
        let mut out = Tensor::zeros(coeffs.shape());
        self.transform_frame(coeffs.data(), out.data_mut(), true);
        Ok(out)
    }

    /// Host-side framewise transform of a whole `[B,T,C,H,W]` batch, applied
    /// independently per `(b, t, c)` slice.
    pub fn dct_frames(self: &Arc<Self>, x: &VideoBatch<T>) -> Result<VideoBatch<T>> {
        let mut g = Graph::new();
        let xn = g.constant(x.tensor().clone());
        let y = g.dct_frames(xn, self)?;
        Ok(VideoBatch::new(g.value(y).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dct2(frame: &Tensor<f64>) -> Tensor<f64> {
        // direct double-sum evaluation of the transform definition
        let h = frame.shape()[0];
        let w = frame.shape()[1];
        let mut out = Tensor::zeros(&[h, w]);
        for u in 0..h {
            for v in 0..w {
                let au = if u == 0 { (1.0 / h as f64).sqrt() } else { (2.0 / h as f64).sqrt() };
                let av = if v == 0 { (1.0 / w as f64).sqrt() } else { (2.0 / w as f64).sqrt() };
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += frame.data()[i * w + j]
                            * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64
                                / (2.0 * h as f64))
                                .cos()
                            * (std::f64::consts::PI * (2 * j + 1) as f64 * v as f64
                                / (2.0 * w as f64))
                                .cos();
                    }
                }
                out.data_mut()[u * w + v] = au * av * s;
            }
        }
        out
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::init::rng_for(seed, "dct-test");
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| crate::init::standard_normal(&mut rng)).collect())
    }

    #[test]
    fn constant_frame_concentrates_in_dc() {
        let plan = DctPlan::<f64>::new(2, 2);
        let out = plan.dct2(&Tensor::full(&[2, 2], 1.0)).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-12);
        for &v in &out.data()[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_frame_maps_to_zero() {
        let plan = DctPlan::<f64>::new(4, 4);
        let out = plan.dct2(&Tensor::zeros(&[4, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_double_sum_on_random_frames() {
        let plan = DctPlan::<f64>::new(8, 8);
        for seed in 0..5 {
            let frame = rand_tensor(&[8, 8], seed);
            let fast = plan.dct2(&frame).unwrap();
            let naive = naive_dct2(&frame);
            for (a, b) in fast.data().iter().zip(naive.data()) {
                assert!((a - b).abs() < 1e-10, "fast {a} vs naive {b}");
            }
        }
    }

    #[test]
    fn bases_are_orthonormal() {
        for (h, w) in [(2, 2), (4, 6), (8, 8), (5, 3)] {
            let plan = DctPlan::<f64>::new(h, w);
            assert!(plan.orthonormality_error() < 1e-10);
        }
    }

    #[test]
    fn transpose_basis_inverts_the_transform() {
        let plan = DctPlan::<f64>::new(6, 5);
        let frame = rand_tensor(&[6, 5], 11);
        let back = plan.idct2(&plan.dct2(&frame).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(frame.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_energy_is_preserved() {
        let plan = DctPlan::<f64>::new(8, 8);
        for seed in 0..8 {
            let frame = rand_tensor(&[8, 8], 100 + seed);
            let out = plan.dct2(&frame).unwrap();
            assert!((out.l2_norm() - frame.l2_norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn linearity() {
        let plan = DctPlan::<f64>::new(4, 4);
        let x = rand_tensor(&[4, 4], 1);
        let y = rand_tensor(&[4, 4], 2);
        let (a, b) = (0.7, -2.3);
        let combo = Tensor::from_vec(
            &[4, 4],
            x.data().iter().zip(y.data()).map(|(&xv, &yv)| a * xv + b * yv).collect(),
        );
        let lhs = plan.dct2(&combo).unwrap();
        let dx = plan.dct2(&x).unwrap();
        let dy = plan.dct2(&y).unwrap();
        for i in 0..16 {
            let rhs = a * dx.data()[i] + b * dy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn framewise_batch_equals_per_slice_transform() {
        let plan = DctPlan::<f64>::new(4, 4);
        let x = rand_tensor(&[2, 3, 2, 4, 4], 5);
        let batch = VideoBatch::new(x.clone());
        let out = plan.dct_frames(&batch).unwrap();
        for s in 0..(2 * 3 * 2) {
            let frame =
                Tensor::from_vec(&[4, 4], x.data()[s * 16..(s + 1) * 16].to_vec());
            let expect = plan.dct2(&frame).unwrap();
            for (a, b) in out.tensor().data()[s * 16..(s + 1) * 16].iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let plan = DctPlan::<f64>::new(4, 4);
        let err = plan.dct2(&Tensor::zeros(&[3, 4])).unwrap_err();
        assert!(err.to_string().contains("dct2"));
    }
}
