//! Dense row-major f64 tensors.
//!
//! Everything in this crate is two-dimensional: vectors are `1×n`
//! matrices and scalars are `1×1`. A zero-sized leading dimension is
//! permitted so that empty prefixes flow through the same code paths
//! as non-empty ones.

use rand::Rng;

use crate::TensorError;

/// A dense matrix of 64-bit floats participating in reverse-mode
/// differentiation via [`crate::Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// Dimension sizes, `[rows, cols]`.
    pub shape: Vec<usize>,
    /// Flat row-major storage; `data.len() == rows * cols`.
    pub data: Vec<f64>,
    /// Whether gradients should be accumulated for this tensor.
    pub requires_grad: bool,
    /// Gradient with the same layout as `data`, populated by a
    /// backward pass that was pulled into this tensor.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "Tensor::new",
                expected: "a two-dimensional shape",
                shape,
            });
        }
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1×n` row vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![1, n], data).expect("vector shape always consistent")
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(vec![1, 1], vec![x]).expect("scalar shape always consistent")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(vec![rows, cols], vec![0.0; rows * cols]).expect("zeros shape consistent")
    }

    pub fn filled(rows: usize, cols: usize, x: f64) -> Self {
        Self::new(vec![rows, cols], vec![x; rows * cols]).expect("filled shape consistent")
    }

    /// Gaussian-initialized matrix, entries `N(0, std²)` via Box-Muller.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Self::new(vec![rows, cols], data).expect("randn shape consistent")
    }

    /// Builder-style marker for trainable parameters.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Numerically stable softmax of one slice (row max subtracted).
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|e| e / s).collect()
}

/// Plain (non-differentiable) cosine similarity between two slices.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, TensorError> {
    if u.len() != v.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![1, u.len()],
            rhs: vec![1, v.len()],
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(TensorError::Domain(
            "cosine similarity of a zero-norm vector is undefined".into(),
        ));
    }
    Ok(dot / (nu * nv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn zero_rows_allowed() {
        let t = Tensor::zeros(0, 4);
        assert_eq!(t.numel(), 0);
        assert_eq!(t.rows(), 0);
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let s = softmax_slice(&[0.0, 0.0]);
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
        // huge equal logits must not overflow
        let s = softmax_slice(&[1000.0, 1000.0]);
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_form() {
        // (0, ln 3) -> (1/4, 3/4)
        let s = softmax_slice(&[0.0, 3.0_f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15);
        assert!((s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cosine_hand_value() {
        // (1,2,3)·(3,2,1) = 10, both norms sqrt(14) -> 10/14
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((c - 10.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_identity_and_orthogonal() {
        let c = cosine_similarity(&[0.3, -0.7], &[0.3, -0.7]).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        let c = cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(c.abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_is_domain_error() {
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, TensorError::Domain(_)));
    }
}
