//! A small, deterministic CPU neural-network stack: explicit
//! forward/backward layers over ndarray tensors, Adam, and the classifier,
//! generator and discriminator losses the experiments need.
//!
//! Nothing here is framework-grade; it is exactly the set of pieces the
//! training loops use, written so that a run with a fixed seed is
//! bit-reproducible.

pub mod conv;
pub mod layers;

use crate::scalar::{s, Scalar};
use ndarray::Array2;
use rand::Rng;

/// One trainable tensor: its value and the gradient accumulated for it.
/// Layers hand these out as flat slices in a fixed order, which is also the
/// order optimizer state and flattened parameter vectors use.
pub struct Param<'a, F> {
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
}

/// Anything owning trainable tensors.
pub trait Trainable<F: Scalar> {
    /// Parameters in a fixed traversal order.
    fn params(&mut self) -> Vec<Param<'_, F>>;

    fn zero_grads(&mut self) {
        for p in self.params() {
            p.grad.fill(F::zero());
        }
    }

    fn param_count(&mut self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Concatenation of all parameter values in traversal order.
    fn flatten(&mut self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.params() {
            out.extend_from_slice(p.value);
        }
        out
    }

    /// Overwrites all parameters from a flat vector (inverse of `flatten`).
    fn load_flat(&mut self, flat: &[F]) {
        let mut at = 0;
        for p in self.params() {
            p.value.copy_from_slice(&flat[at..at + p.value.len()]);
            at += p.value.len();
        }
        assert_eq!(at, flat.len(), "flat parameter vector length mismatch");
    }
}

/// Adam optimizer; state is kept per parameter tensor in traversal order.
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F, beta1: F, beta2: F) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: s(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Standard classifier setting (beta1 = 0.9).
    pub fn standard(lr: F) -> Self {
        Self::new(lr, s(0.9), s(0.999))
    }

    /// The usual GAN setting (beta1 = 0.5).
    pub fn for_gan(lr: F) -> Self {
        Self::new(lr, s(0.5), s(0.999))
    }

    pub fn step(&mut self, net: &mut impl Trainable<F>) {
        let mut params = net.params();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
            self.v = params.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
        }
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t);
        let bc2 = F::one() - self.beta2.powi(self.t);
        let one = F::one();
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.value[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Mean binary cross-entropy over logits against a constant target (the
/// real/fake label), in the numerically stable log-sum-exp form.
/// Returns the loss and d(loss)/d(logits).
pub fn bce_with_logits<F: Scalar>(logits: &Array2<F>, target: F) -> (F, Array2<F>) {
    let n = s::<F>(logits.len() as f64);
    let mut loss = F::zero();
    let grad = logits.mapv(|l| {
        let pos = if l > F::zero() { l } else { F::zero() };
        loss += pos - l * target + (F::one() + (-l.abs()).exp()).ln();
        (sigmoid(l) - target) / n
    });
    (loss / n, grad)
}

/// Mean softmax cross-entropy against integer labels.
/// Returns the loss and d(loss)/d(logits).
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
) -> (F, Array2<F>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len());
    let inv_n = F::one() / s::<F>(n as f64);
    let mut grad = logits.clone();
    let mut loss = F::zero();
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        loss += denom.ln() + max - logits[[i, labels[i]]];
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v / denom - if j == labels[i] { F::one() } else { F::zero() }) * inv_n;
        }
    }
    (loss * inv_n, grad)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> f64 {
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// He-normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal<F: Scalar, R: Rng, Sh>(shape: Sh, fan_in: usize, rng: &mut R) -> ndarray::Array<F, Sh::Dim>
where
    Sh: ndarray::ShapeBuilder,
{
    let std = s::<F>((2.0 / fan_in as f64).sqrt());
    ndarray::Array::from_shape_simple_fn(shape, || F::standard_normal(rng) * std)
}

/// N(0, std) initialization.
pub fn gaussian<F: Scalar, R: Rng, Sh>(shape: Sh, std: f64, rng: &mut R) -> ndarray::Array<F, Sh::Dim>
where
    Sh: ndarray::ShapeBuilder,
{
    let std = s::<F>(std);
    ndarray::Array::from_shape_simple_fn(shape, || F::standard_normal(rng) * std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn bce_matches_hand_values() {
        // logit 0 against target 1: loss ln 2, grad (0.5 - 1).
        let (l, g) = bce_with_logits(&array![[0.0f64]], 1.0);
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(g[[0, 0]], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let (l, _) = bce_with_logits(&array![[1000.0f64]], 1.0);
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-9);
        let (l, g) = bce_with_logits(&array![[-1000.0f64]], 1.0);
        assert_abs_diff_eq!(l, 1000.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g[[0, 0]], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = array![[0.3f64, -0.7, 1.1], [2.0, 0.0, -1.0]];
        let labels = [2usize, 0];
        let (_, g) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[[i, j]] += h;
                let mut lm = logits.clone();
                lm[[i, j]] -= h;
                let fd = (softmax_cross_entropy(&lp, &labels).0
                    - softmax_cross_entropy(&lm, &labels).0)
                    / (2.0 * h);
                assert_abs_diff_eq!(g[[i, j]], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        struct Quad {
            x: Vec<f64>,
            g: Vec<f64>,
        }
        impl Trainable<f64> for Quad {
            fn params(&mut self) -> Vec<Param<'_, f64>> {
                vec![Param {
                    value: &mut self.x,
                    grad: &mut self.g,
                }]
            }
        }
        let mut q = Quad {
            x: vec![5.0, -3.0],
            g: vec![0.0, 0.0],
        };
        let mut opt = Adam::standard(0.1);
        for _ in 0..500 {
            q.g = q.x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut q);
        }
        assert!(q.x.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn flatten_roundtrip() {
        struct Two {
            a: Vec<f64>,
            b: Vec<f64>,
            ga: Vec<f64>,
            gb: Vec<f64>,
        }
        impl Trainable<f64> for Two {
            fn params(&mut self) -> Vec<Param<'_, f64>> {
                vec![
                    Param {
                        value: &mut self.a,
                        grad: &mut self.ga,
                    },
                    Param {
                        value: &mut self.b,
                        grad: &mut self.gb,
                    },
                ]
            }
        }
        let mut t = Two {
            a: vec![1.0, 2.0],
            b: vec![3.0],
            ga: vec![0.0; 2],
            gb: vec![0.0],
        };
        let flat = t.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0]);
        t.load_flat(&[9.0, 8.0, 7.0]);
        assert_eq!(t.flatten(), vec![9.0, 8.0, 7.0]);
    }
}
