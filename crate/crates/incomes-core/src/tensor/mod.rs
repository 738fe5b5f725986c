//! Flat tensors and reverse-mode differentiation.
//!
//! A [`Tensor`] is a shape plus row-major storage; it carries no graph.
//! Differentiable computation happens on a [`Tape`](tape::Tape): leaves are
//! copied in, ops append nodes, and [`Tape::backward`] fills gradients in
//! reverse creation order. [`gradcheck`] holds the central-difference oracle
//! the op tests compare against.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod scalar;
pub mod tape;

pub use scalar::Scalar;

use crate::error::{Error, Result};
use rand::Rng as _;

/// Dense row-major tensor. `grad`, when present, always matches `data` in
/// length; optimizer steps consume it and training accumulates into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; len],
            requires_grad: false,
            grad: None,
        }
    }

    /// Build from existing row-major data.
    ///
    /// # Errors
    /// Shape error if `data.len()` does not equal the shape's element count.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape {
                op: "from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Gaussian init with standard deviation `std` (Box-Muller over the
    /// crate's seeded stream, so identical across platforms).
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::Rng) -> Self {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        while data.len() < len {
            // Box-Muller: two uniforms -> two normals.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(T::from_f64(r * theta.cos() * std));
            if data.len() < len {
                data.push(T::from_f64(r * theta.sin() * std));
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark as learnable and allocate the gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::ZERO; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Accumulate `g` into the gradient buffer.
    ///
    /// # Errors
    /// Shape error on length mismatch; contract error if the tensor is not
    /// learnable.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        let grad = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::contract("accumulate_grad on a non-learnable tensor"))?;
        for (dst, &src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    /// Drop learnability and any gradient buffer; values stay.
    pub fn detach(&mut self) {
        self.requires_grad = false;
        self.grad = None;
    }

    /// Split borrow of the data and gradient buffers, for optimizer steps
    /// that update many tensors in one call. `None` when not learnable.
    pub fn data_and_grad_mut(&mut self) -> Option<(&mut [T], &[T])> {
        let Tensor { data, grad, .. } = self;
        grad.as_deref().map(|g| (data.as_mut_slice(), g))
    }

    /// Reset the gradient buffer to zero (no-op when not learnable).
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::ZERO);
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert element type (used to instantiate f64 twins for gradient
    /// checks). Gradient buffers are not carried over.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let mut t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        };
        if t.requires_grad {
            t.grad = Some(vec![U::ZERO; t.data.len()]);
        }
        t
    }
}

/// 2-D matrix product.
///
/// # Errors
/// Shape error unless `a` is `m x k` and `b` is `k x n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    kernels::matmul(&a.data, &b.data, &mut out.data, m, k, n);
    Ok(out)
}

/// Last-axis softmax at temperature `t`.
///
/// # Errors
/// Parameter error when `t <= 0` or not finite.
pub fn softmax_t<T: Scalar>(logits: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    if !(t > T::ZERO) || !t.is_finite() {
        return Err(Error::param("temperature", format!("must be finite and > 0, got {t}")));
    }
    let cols = *logits
        .shape
        .last()
        .ok_or_else(|| Error::contract("softmax_t on a rank-0 tensor"))?;
    let mut out = logits.clone();
    out.requires_grad = false;
    out.grad = None;
    let inv = T::ONE / t;
    for row in out.data.chunks_mut(cols) {
        kernels::softmax_row(row, inv);
    }
    Ok(out)
}

/// Cross entropy of a single logits row against `target`.
///
/// # Errors
/// Contract error unless `logits` is rank 1; index error when `target` is
/// out of range.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, target: usize) -> Result<T> {
    if logits.shape.len() != 1 {
        return Err(Error::contract(format!(
            "cross_entropy expects a rank-1 logits row, got shape {:?}",
            logits.shape
        )));
    }
    if target >= logits.data.len() {
        return Err(Error::Index {
            what: "cross_entropy target",
            got: target,
            limit: logits.data.len(),
        });
    }
    Ok(kernels::cross_entropy_row(&logits.data, target).0)
}

/// `KL(p || q)` where `q` is given as log-probabilities, with `0 ln 0 = 0`.
///
/// # Errors
/// Shape error on length mismatch; contract error unless `p` sums to 1
/// within 1e-6.
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q_logprobs: &Tensor<T>) -> Result<T> {
    if p.shape != q_logprobs.shape {
        return Err(Error::Shape {
            op: "kl_divergence",
            left: p.shape.clone(),
            right: q_logprobs.shape.clone(),
        });
    }
    let mut sum = T::ZERO;
    for &x in &p.data {
        sum += x;
    }
    if (sum - T::ONE).abs().to_f64() > 1e-6 {
        return Err(Error::contract(format!(
            "kl_divergence: p must sum to 1 within 1e-6, got {sum}"
        )));
    }
    let mut kl = T::ZERO;
    for (&pi, &qi) in p.data.iter().zip(&q_logprobs.data) {
        if pi > T::ZERO {
            kl += pi * (pi.ln() - qi);
        }
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_t_rejects_nonpositive_temperature() {
        let t = Tensor::<f64>::zeros(&[4]);
        assert!(softmax_t(&t, 0.0).is_err());
        assert!(softmax_t(&t, -1.0).is_err());
    }

    #[test]
    fn softmax_t_shift_invariance_across_temperatures() {
        let mut r = rng::stream(11, "softmax-prop");
        for _ in 0..200 {
            use rand::Rng as _;
            let n = r.gen_range(2..12);
            let t = (10.0f64).powf(r.gen_range(-3.0..1.0));
            let base: Vec<f64> = (0..n).map(|_| r.gen_range(-4.0..4.0)).collect();
            let shift = r.gen_range(-50.0..50.0);
            let a = Tensor::from_vec(&[n], base.clone()).unwrap();
            let b = Tensor::from_vec(&[n], base.iter().map(|x| x + shift).collect()).unwrap();
            let pa = softmax_t(&a, t).unwrap();
            let pb = softmax_t(&b, t).unwrap();
            let sum: f64 = pa.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert!((x - y).abs() < 1e-6, "T={t} n={n}");
            }
        }
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let t = Tensor::<f64>::zeros(&[8]);
        assert!(matches!(
            cross_entropy(&t, 8).unwrap_err(),
            Error::Index { .. }
        ));
    }

    #[test]
    fn kl_divergence_nonnegative_on_random_pairs() {
        let mut r = rng::stream(3, "kl-prop");
        use rand::Rng as _;
        for _ in 0..1000 {
            let n = r.gen_range(2..16);
            let mk = |r: &mut rng::Rng| -> Vec<f64> {
                let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            };
            let p = mk(&mut r);
            let q = mk(&mut r);
            let pt = Tensor::from_vec(&[n], p).unwrap();
            let qt = Tensor::from_vec(&[n], q.iter().map(|x| x.ln()).collect()).unwrap();
            let kl = kl_divergence(&pt, &qt).unwrap();
            assert!(kl >= -1e-9, "kl = {kl}");
        }
    }

    #[test]
    fn kl_divergence_zero_for_identical() {
        let p = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let q = Tensor::from_vec(&[4], p.data().iter().map(|x: &f64| x.ln()).collect()).unwrap();
        assert!(kl_divergence(&p, &q).unwrap().abs() < 1e-9);
    }

    #[test]
    fn kl_divergence_rejects_unnormalized_p() {
        let p = Tensor::from_vec(&[2], vec![0.7f64, 0.7]).unwrap();
        let q = Tensor::from_vec(&[2], vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::<f32>::randn(&[16], 0.5, &mut rng::stream(9, "w"));
        let b = Tensor::<f32>::randn(&[16], 0.5, &mut rng::stream(9, "w"));
        assert_eq!(a.data(), b.data());
    }
}
