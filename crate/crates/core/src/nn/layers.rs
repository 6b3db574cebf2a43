//! Dense, embedding, batch-norm, pooling, and activation layers.

use super::Param;
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, Array4, Axis, Dimension, Zip};
use rand::Rng;

/// Fully connected layer, weight layout (out, in).
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub grad_weight: Array2<F>,
    pub grad_bias: Array1<F>,
    input: Option<Array2<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: super::he_normal((d_out, d_in), d_in, rng),
            bias: Array1::zeros(d_out),
            grad_weight: Array2::zeros((d_out, d_in)),
            grad_bias: Array1::zeros(d_out),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, train: bool) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        self.input = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, grad_y: &Array2<F>) -> Array2<F> {
        let x = self.input.take().expect("forward(train=true) must precede backward");
        self.grad_weight += &grad_y.t().dot(&x);
        self.grad_bias += &grad_y.sum_axis(Axis(0));
        grad_y.dot(&self.weight)
    }

    pub fn params(&mut self) -> Vec<Param<'_, F>> {
        vec![
            Param {
                value: self.weight.as_slice_mut().expect("contiguous"),
                grad: self.grad_weight.as_slice_mut().expect("contiguous"),
            },
            Param {
                value: self.bias.as_slice_mut().expect("contiguous"),
                grad: self.grad_bias.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

/// Lookup-table embedding for class labels.
pub struct Embedding<F> {
    pub table: Array2<F>,
    pub grad_table: Array2<F>,
    ids: Option<Vec<usize>>,
}

impl<F: Scalar> Embedding<F> {
    pub fn new<R: Rng>(num_classes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: super::gaussian((num_classes, dim), 1.0, rng),
            grad_table: Array2::zeros((num_classes, dim)),
            ids: None,
        }
    }

    pub fn forward(&mut self, ids: &[usize], train: bool) -> Array2<F> {
        let mut y = Array2::zeros((ids.len(), self.table.ncols()));
        for (mut row, &id) in y.rows_mut().into_iter().zip(ids) {
            row.assign(&self.table.row(id));
        }
        self.ids = train.then(|| ids.to_vec());
        y
    }

    pub fn backward(&mut self, grad_y: &Array2<F>) {
        let ids = self.ids.take().expect("forward(train=true) must precede backward");
        for (row, &id) in grad_y.rows().into_iter().zip(&ids) {
            let mut g = self.grad_table.row_mut(id);
            g += &row;
        }
    }

    pub fn params(&mut self) -> Vec<Param<'_, F>> {
        vec![Param {
            value: self.table.as_slice_mut().expect("contiguous"),
            grad: self.grad_table.as_slice_mut().expect("contiguous"),
        }]
    }
}

/// Per-channel batch normalization over (N, H, W), with running statistics
/// for inference.
pub struct BatchNorm2d<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub grad_gamma: Array1<F>,
    pub grad_beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
    cache: Option<(Array4<F>, Array1<F>)>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
            momentum: s(0.1),
            eps: s(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let m = s::<F>((n * h * w) as f64);
        let mut y = Array4::zeros((n, c, h, w));
        if train {
            let mut xhat = Array4::zeros((n, c, h, w));
            let mut invstds = Array1::zeros(c);
            for ch in 0..c {
                let xc = x.slice(ndarray::s![.., ch, .., ..]);
                let mean = xc.iter().copied().sum::<F>() / m;
                let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / m;
                let invstd = F::one() / (var + self.eps).sqrt();
                invstds[ch] = invstd;
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                Zip::from(xhat.slice_mut(ndarray::s![.., ch, .., ..]))
                    .and(y.slice_mut(ndarray::s![.., ch, .., ..]))
                    .and(&xc)
                    .for_each(|xh, yv, &xv| {
                        *xh = (xv - mean) * invstd;
                        *yv = g * *xh + b;
                    });
                self.running_mean[ch] =
                    (F::one() - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                self.running_var[ch] =
                    (F::one() - self.momentum) * self.running_var[ch] + self.momentum * var;
            }
            self.cache = Some((xhat, invstds));
        } else {
            for ch in 0..c {
                let invstd = F::one() / (self.running_var[ch] + self.eps).sqrt();
                let mean = self.running_mean[ch];
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                Zip::from(y.slice_mut(ndarray::s![.., ch, .., ..]))
                    .and(&x.slice(ndarray::s![.., ch, .., ..]))
                    .for_each(|yv, &xv| *yv = g * (xv - mean) * invstd + b);
            }
        }
        y
    }

    pub fn backward(&mut self, grad_y: &Array4<F>) -> Array4<F> {
        let (xhat, invstds) = self.cache.take().expect("forward(train=true) must precede backward");
        let (n, c, h, w) = grad_y.dim();
        let m = s::<F>((n * h * w) as f64);
        let mut grad_x = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let gy = grad_y.slice(ndarray::s![.., ch, .., ..]);
            let xh = xhat.slice(ndarray::s![.., ch, .., ..]);
            let dbeta = gy.iter().copied().sum::<F>();
            let dgamma = gy.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<F>();
            self.grad_beta[ch] += dbeta;
            self.grad_gamma[ch] += dgamma;
            let k = self.gamma[ch] * invstds[ch] / m;
            Zip::from(grad_x.slice_mut(ndarray::s![.., ch, .., ..]))
                .and(&gy)
                .and(&xh)
                .for_each(|gx, &g, &x| {
                    *gx = k * (m * g - dbeta - x * dgamma);
                });
        }
        grad_x
    }

    pub fn params(&mut self) -> Vec<Param<'_, F>> {
        vec![
            Param {
                value: self.gamma.as_slice_mut().expect("contiguous"),
                grad: self.grad_gamma.as_slice_mut().expect("contiguous"),
            },
            Param {
                value: self.beta.as_slice_mut().expect("contiguous"),
                grad: self.grad_beta.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

/// 2x2 max pooling with stride 2.
pub struct MaxPool2 {
    argmax: Option<Array4<u8>>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self { argmax: None }
    }

    pub fn forward<F: Scalar>(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::<u8>::zeros((n, c, oh, ow));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = x[[b, ch, 2 * i, 2 * j]];
                        let mut which = 0u8;
                        for (t, (di, dj)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let v = x[[b, ch, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                which = t as u8;
                            }
                        }
                        y[[b, ch, i, j]] = best;
                        arg[[b, ch, i, j]] = which;
                    }
                }
            }
        }
        self.argmax = train.then_some(arg);
        y
    }

    pub fn backward<F: Scalar>(&mut self, grad_y: &Array4<F>) -> Array4<F> {
        let arg = self.argmax.take().expect("forward(train=true) must precede backward");
        let (n, c, oh, ow) = grad_y.dim();
        let mut grad_x = Array4::zeros((n, c, oh * 2, ow * 2));
        let offsets = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let (di, dj) = offsets[arg[[b, ch, i, j]] as usize];
                        grad_x[[b, ch, 2 * i + di, 2 * j + dj]] += grad_y[[b, ch, i, j]];
                    }
                }
            }
        }
        grad_x
    }
}

impl Default for MaxPool2 {
    fn default() -> Self {
        Self::new()
    }
}

/// Elementwise activation with the cached-output backward rule.
pub struct Activation<F, D: Dimension> {
    kind: ActKind<F>,
    output: Option<ndarray::Array<F, D>>,
}

enum ActKind<F> {
    Relu,
    LeakyRelu(F),
    Tanh,
}

impl<F: Scalar, D: Dimension> Activation<F, D> {
    pub fn relu() -> Self {
        Self {
            kind: ActKind::Relu,
            output: None,
        }
    }

    pub fn leaky_relu(slope: F) -> Self {
        Self {
            kind: ActKind::LeakyRelu(slope),
            output: None,
        }
    }

    pub fn tanh() -> Self {
        Self {
            kind: ActKind::Tanh,
            output: None,
        }
    }

    pub fn forward(&mut self, x: &ndarray::Array<F, D>, train: bool) -> ndarray::Array<F, D> {
        let y = match &self.kind {
            ActKind::Relu => x.mapv(|v| v.max(F::zero())),
            ActKind::LeakyRelu(a) => x.mapv(|v| if v > F::zero() { v } else { *a * v }),
            ActKind::Tanh => x.mapv(|v| v.tanh()),
        };
        self.output = train.then(|| y.clone());
        y
    }

    pub fn backward(&mut self, grad_y: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        let y = self.output.take().expect("forward(train=true) must precede backward");
        match &self.kind {
            ActKind::Relu => {
                let mut g = grad_y.clone();
                Zip::from(&mut g).and(&y).for_each(|gv, &yv| {
                    if yv <= F::zero() {
                        *gv = F::zero();
                    }
                });
                g
            }
            ActKind::LeakyRelu(a) => {
                let mut g = grad_y.clone();
                Zip::from(&mut g).and(&y).for_each(|gv, &yv| {
                    if yv <= F::zero() {
                        *gv *= *a;
                    }
                });
                g
            }
            ActKind::Tanh => {
                let mut g = grad_y.clone();
                Zip::from(&mut g).and(&y).for_each(|gv, &yv| {
                    *gv *= F::one() - yv * yv;
                });
                g
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = crate::rng_from_seed(1);
        let mut d = Dense::<f64>::new(3, 2, &mut rng);
        let x = array![[0.5, -0.2, 0.8], [1.0, 0.0, -0.7]];
        let loss = |y: &Array2<f64>| y.iter().map(|v| 0.5 * v * v).sum::<f64>();

        let y = d.forward(&x, true);
        let gx = d.backward(&y.clone());

        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (0, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&d.forward(&xp, false)) - loss(&d.forward(&xm, false))) / (2.0 * h);
            assert_abs_diff_eq!(gx[idx], fd, epsilon = 1e-7);
        }
        for idx in [(0, 0), (1, 1)] {
            let orig = d.weight[idx];
            d.weight[idx] = orig + h;
            let lp = loss(&d.forward(&x, false));
            d.weight[idx] = orig - h;
            let lm = loss(&d.forward(&x, false));
            d.weight[idx] = orig;
            assert_abs_diff_eq!(d.grad_weight[idx], (lp - lm) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn embedding_scatters_gradients() {
        let mut rng = crate::rng_from_seed(2);
        let mut e = Embedding::<f64>::new(4, 3, &mut rng);
        let y = e.forward(&[1, 1, 3], true);
        assert_eq!(y.nrows(), 3);
        assert_eq!(y.row(0), e.table.row(1));
        let g = Array2::from_elem((3, 3), 1.0);
        e.backward(&g);
        assert_eq!(e.grad_table.row(1), array![2.0, 2.0, 2.0]);
        assert_eq!(e.grad_table.row(3), array![1.0, 1.0, 1.0]);
        assert_eq!(e.grad_table.row(0), array![0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let mut rng = crate::rng_from_seed(3);
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Array4::from_shape_simple_fn((4, 2, 3, 3), || {
            f64::standard_normal(&mut rng) * 3.0 + 1.0
        });
        let y = bn.forward(&x, true);
        for ch in 0..2 {
            let yc = y.slice(ndarray::s![.., ch, .., ..]);
            let m: f64 = yc.iter().sum::<f64>() / yc.len() as f64;
            let v: f64 = yc.iter().map(|&u| (u - m) * (u - m)).sum::<f64>() / yc.len() as f64;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = crate::rng_from_seed(4);
        let x = Array4::from_shape_simple_fn((3, 2, 2, 2), || f64::standard_normal(&mut rng));
        // Weighted loss so the gradient is not uniform.
        let wts = Array4::from_shape_simple_fn(x.raw_dim(), || f64::standard_normal(&mut rng));
        let loss = |bn: &mut BatchNorm2d<f64>, x: &Array4<f64>, wts: &Array4<f64>| {
            let y = bn.forward(x, true);
            (&y * wts).sum()
        };

        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma = array![1.3, 0.7];
        bn.beta = array![0.2, -0.1];
        let y = bn.forward(&x, true);
        let _ = y;
        let gx = bn.backward(&wts);

        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (2, 1, 1, 1), (1, 0, 1, 0)] {
            let mut fresh = BatchNorm2d::<f64>::new(2);
            fresh.gamma = array![1.3, 0.7];
            fresh.beta = array![0.2, -0.1];
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mut fresh, &xp, &wts) - loss(&mut fresh, &xm, &wts)) / (2.0 * h);
            assert_abs_diff_eq!(gx[idx], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn maxpool_selects_and_routes() {
        let mut p = MaxPool2::new();
        let x = Array4::from_shape_vec(
            (1, 1, 2, 2),
            vec![1.0f64, 5.0, 2.0, 3.0],
        )
        .unwrap();
        let y = p.forward(&x, true);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        let g = Array4::from_elem((1, 1, 1, 1), 2.0);
        let gx = p.backward(&g);
        assert_eq!(gx[[0, 0, 0, 1]], 2.0);
        assert_eq!(gx.sum(), 2.0);
    }

    #[test]
    fn tanh_activation_bounds_and_gradient() {
        let mut a = Activation::<f64, ndarray::Ix2>::tanh();
        let x = array![[-5.0, 0.0, 5.0]];
        let y = a.forward(&x, true);
        assert!(y.iter().all(|v| v.abs() <= 1.0));
        let g = a.backward(&array![[1.0, 1.0, 1.0]]);
        assert_abs_diff_eq!(g[[0, 1]], 1.0, epsilon = 1e-12);
        assert!(g[[0, 0]] < 1e-3);
    }
}
