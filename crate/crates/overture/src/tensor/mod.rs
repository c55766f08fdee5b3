//! Minimal dense-tensor substrate.
//!
//! Row-major tensors over `f32` (training/inference) or `f64` (the
//! finite-difference verification suite), a fixed set of forward operations,
//! a reverse-mode [`tape`] for gradients, a named [`params::ParamStore`],
//! and the [`fdcheck`] gradient verifier.

pub mod fdcheck;
pub mod params;
pub mod tape;

use crate::{Error, Result};
use num_traits::Float;

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + num_traits::NumAssign + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Probabilities are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before any log.
pub const CLAMP_EPS: f64 = 1e-7;

/// Additive mask value for forbidden attention entries.
pub const MASK_NEG: f64 = -1e9;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows/cols of a rank-2 tensor; rank-1 is treated as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            1 => (1, self.shape[0]),
            0 => (1, 1),
            _ => panic!("rows_cols on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise in-place add; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, c: T) {
        for v in self.data.iter_mut() {
            *v *= c;
        }
    }

    pub fn fill(&mut self, v: T) {
        for x in self.data.iter_mut() {
            *x = v;
        }
    }

    /// Convert element precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// `a @ b` for rank-2 operands.
///
/// The inner loop runs over contiguous rows of `b` and `c` so the compiler
/// can vectorize it without reassociating sums.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.rows_cols();
    let (kb, n) = b.rows_cols();
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul: {:?} x {:?} (inner {} != {})",
            a.shape(),
            b.shape(),
            ka,
            kb
        )));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(&mut out, a.data(), b.data(), m, ka, n);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_into<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `a @ b^T`: rows of both operands are contiguous, which keeps attention
/// score computation cache-friendly.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.rows_cols();
    let (n, kb) = b.rows_cols();
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul_bt: {:?} x {:?}^T (inner {} != {})",
            a.shape(),
            b.shape(),
            ka,
            kb
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data()[i * ka..(i + 1) * ka];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b.data()[j * ka..(j + 1) * ka]);
        }
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators so the loop vectorizes.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let o = i * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Numerically-stable softmax of a vector (max subtraction applied).
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut max = x[0];
    for &v in &x[1..] {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &v in &out {
        sum += v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = x.rows_cols();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        data.extend_from_slice(&softmax(x.row(i)));
    }
    Tensor::new(vec![r, c], data).expect("softmax_rows shape")
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split on sign to avoid overflow in exp.
    if x >= T::zero() {
        let e = (-x).exp();
        T::one() / (T::one() + e)
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::from_f64(CLAMP_EPS);
    let hi = T::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Cross-entropy of a target distribution against predicted probabilities:
/// `-sum_i t_i ln p_i` with probability clamping.
///
/// Errors if the target does not sum to 1 within 1e-6.
pub fn cross_entropy<T: Scalar>(target: &[T], predicted: &[T]) -> Result<T> {
    if target.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "cross_entropy: target len {} != predicted len {}",
            target.len(),
            predicted.len()
        )));
    }
    let sum: f64 = target.iter().map(|t| t.as_f64()).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Label(format!(
            "target distribution sums to {sum}, expected 1"
        )));
    }
    let mut loss = T::zero();
    for (&t, &p) in target.iter().zip(predicted.iter()) {
        if t != T::zero() {
            loss -= t * clamp_prob(p).ln();
        }
    }
    Ok(loss)
}

/// Binary cross-entropy of a 0/1 label against a predicted probability.
pub fn binary_cross_entropy<T: Scalar>(label: T, predicted: T) -> T {
    let p = clamp_prob(predicted);
    -(label * p.ln() + (T::one() - label) * (T::one() - p).ln())
}

/// Scaled dot-product attention with an additive mask.
///
/// `mask` has shape (query_count, key_count); forbidden entries carry a large
/// negative value (see [`MASK_NEG`]) and receive weight below 1e-12.
pub fn attention<T: Scalar>(
    queries: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    additive_mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (nq, dq) = queries.rows_cols();
    let (nk, dk) = keys.rows_cols();
    let (nv, _dv) = values.rows_cols();
    if dq != dk {
        return Err(Error::Dimension(format!(
            "attention: query width {dq} != key width {dk}"
        )));
    }
    if nk != nv {
        return Err(Error::Dimension(format!(
            "attention: {nk} keys vs {nv} value rows"
        )));
    }
    if additive_mask.rows_cols() != (nq, nk) {
        return Err(Error::Dimension(format!(
            "attention: mask shape {:?}, expected ({nq}, {nk})",
            additive_mask.shape()
        )));
    }
    let scale = T::from_f64(1.0 / (dq as f64).sqrt());
    let mut scores = matmul_bt(queries, keys)?;
    scores.scale_assign(scale);
    scores.add_assign(additive_mask);
    let weights = softmax_rows(&scores);
    matmul(&weights, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tf64(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let a = tf64(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let id = tf64(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&id, &a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        // (2x3) x (3x1), multiplied out by hand.
        let a = tf64(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tf64(3, 1, vec![7.0, 8.0, 9.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[50.0, 122.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = tf64(2, 3, vec![0.0; 6]);
        let b = tf64(2, 3, vec![0.0; 6]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "error should name both shapes: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let s = softmax(&[0.0f64, 0.0]);
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);

        let big = softmax(&[1000.0f64, 1000.0, 1000.0]);
        for v in big {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let a = softmax(&[0.3f64, -1.2, 2.5]);
        let b = softmax(&[0.3f64 + 17.0, -1.2 + 17.0, 2.5 + 17.0]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Direct e^x_i / sum e^x_j oracle at f64 precision.
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
        let got = softmax(&x);
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
        let total: f64 = got.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_fixed_points() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        let x = 1.7f64;
        assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        // Independent high-precision evaluation of 1/(1+e^-2).
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((sigmoid_scalar(2.0f64) - expected).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_basics() {
        // Deterministic target, near-perfect prediction.
        let eps = CLAMP_EPS;
        let l = cross_entropy(&[1.0f64, 0.0], &[1.0 - eps, eps]).unwrap();
        assert!(l < 1e-6);

        // Binary label 1 at p = 0.5 is ln 2.
        let l2 = binary_cross_entropy(1.0f64, 0.5);
        assert!((l2 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_independent_sum() {
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let raw: Vec<f64> = (0..5).map(|_| next() + 0.01).collect();
            let ts: f64 = raw.iter().sum();
            let target: Vec<f64> = raw.iter().map(|v| v / ts).collect();
            let praw: Vec<f64> = (0..5).map(|_| next() + 0.01).collect();
            let ps: f64 = praw.iter().sum();
            let pred: Vec<f64> = praw.iter().map(|v| v / ps).collect();
            let expected: f64 = target
                .iter()
                .zip(pred.iter())
                .map(|(t, p)| -t * p.ln())
                .sum();
            let got = cross_entropy(&target, &pred).unwrap();
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_distribution() {
        let err = cross_entropy(&[0.5f64, 0.6], &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::Label(_)));
    }

    #[test]
    fn attention_single_pair_returns_value_row() {
        let q = tf64(1, 4, vec![0.3, -0.2, 0.8, 0.1]);
        let k = tf64(1, 4, vec![1.0, 0.0, -0.5, 0.2]);
        let v = tf64(1, 3, vec![5.0, -2.0, 7.0]);
        let mask = Tensor::zeros(vec![1, 1]);
        let out = attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_masked_key_is_inert() {
        let q = tf64(2, 4, vec![0.3, -0.2, 0.8, 0.1, -0.6, 0.4, 0.0, 0.9]);
        let k = tf64(
            3,
            4,
            vec![1.0, 0.0, -0.5, 0.2, 0.7, 0.7, 0.1, -0.3, -0.2, 0.5, 0.9, 0.4],
        );
        let mut v = tf64(
            3,
            3,
            vec![5.0, -2.0, 7.0, 1.0, 1.0, 1.0, 0.0, 3.0, -4.0],
        );
        let neg = MASK_NEG;
        // Key 1 is hidden from every query.
        let mask = tf64(2, 3, vec![0.0, neg, 0.0, 0.0, neg, 0.0]);
        let a = attention(&q, &k, &v, &mask).unwrap();
        // Changing the masked value row must not change the output.
        v.data_mut()[3] = 1e6;
        v.data_mut()[4] = -1e6;
        v.data_mut()[5] = 42.0;
        let b = attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn attention_matches_weighted_sum_oracle() {
        // 3 queries x 4 keys with a random-ish mask, against a direct
        // softmax-weighted-sum computed with scalar loops.
        let q = tf64(
            3,
            2,
            vec![0.1, -0.4, 0.9, 0.2, -0.7, 0.5],
        );
        let k = tf64(4, 2, vec![0.3, 0.3, -0.1, 0.8, 0.5, -0.5, 0.2, 0.0]);
        let v = tf64(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let neg = MASK_NEG;
        let mask = tf64(
            3,
            4,
            vec![0.0, neg, 0.0, 0.0, 0.0, 0.0, neg, 0.0, neg, 0.0, 0.0, 0.0],
        );
        let got = attention(&q, &k, &v, &mask).unwrap();

        let scale = 1.0 / (2.0f64).sqrt();
        for i in 0..3 {
            let mut logits = [0.0f64; 4];
            for j in 0..4 {
                let mut s = 0.0;
                for d in 0..2 {
                    s += q.data()[i * 2 + d] * k.data()[j * 2 + d];
                }
                logits[j] = s * scale + mask.data()[i * 4 + j];
            }
            let w = softmax(&logits);
            for d in 0..2 {
                let mut o = 0.0;
                for j in 0..4 {
                    o += w[j] * v.data()[j * 2 + d];
                }
                assert!((got.data()[i * 2 + d] - o).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_fully_masked_key_weight_below_1e12() {
        let q = tf64(1, 2, vec![0.4, -0.3]);
        let k = tf64(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let neg = MASK_NEG;
        let mask = tf64(1, 2, vec![0.0, neg]);
        let scale = 1.0 / (2.0f64).sqrt();
        let mut logits = [0.0f64; 2];
        for j in 0..2 {
            let mut s = 0.0;
            for d in 0..2 {
                s += q.data()[d] * k.data()[j * 2 + d];
            }
            logits[j] = s * scale + mask.data()[j];
        }
        let w = softmax(&logits);
        assert!(w[1] < 1e-12, "masked weight {} too large", w[1]);
    }

    #[test]
    fn softmax_sums_to_one_across_magnitudes() {
        let mut state = 1234567u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for round in 0..1000 {
            let scale = match round % 4 {
                0 => 1.0,
                1 => 100.0,
                2 => 1e4,
                _ => 0.01,
            };
            let x: Vec<f64> = (0..8).map(|_| (next() - 0.5) * 2.0 * scale).collect();
            let s = softmax(&x);
            let total: f64 = s.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "sum {total} at scale {scale}");
            assert!(s.iter().all(|&v| v > 0.0));
        }
    }
}
