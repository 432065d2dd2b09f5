//! Dense row-major tensors.

use crate::scalar::Scalar;

/// A dense, contiguous, row-major array of real values.
///
/// Invariant: `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::ZERO; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single element of a rank-0 tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Self {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn l2_norm(&self) -> T {
        let mut s = T::ZERO;
        for &x in &self.data {
            s += x * x;
        }
        s.sqrt()
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::ZERO;
        for &x in &self.data {
            m = m.maximum(x.abs());
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Precision-converting copy.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

/// A rank-5 activation tensor laid out `[batch, time, channel, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> VideoBatch<T> {
    pub fn new(tensor: Tensor<T>) -> Self {
        assert_eq!(tensor.rank(), 5, "video batch must be rank 5, got shape {:?}", tensor.shape());
        VideoBatch { tensor }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_length_mismatch() {
        let _ = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    #[should_panic]
    fn video_batch_rejects_wrong_rank() {
        let _ = VideoBatch::new(Tensor::<f32>::zeros(&[2, 3, 4]));
    }
}
