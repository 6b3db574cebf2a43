//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Batches are processed sample-by-sample in parallel; every reduction
//! happens in a fixed order so results do not depend on thread scheduling.

use super::Param;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, Zip};
use rand::Rng;

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn deconv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfolds `x` (C, H, W) into a (C*kh*kw, gh*gw) column matrix, where the
/// column grid (gh, gw) ranges over kernel placements at the given stride
/// and padding. Out-of-bounds taps read as zero.
fn im2col<F: Scalar>(
    x: &ArrayView3<'_, F>,
    kernel: usize,
    stride: usize,
    pad: usize,
    out: &mut ndarray::ArrayViewMut2<'_, F>,
) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let gh = conv_out_size(h, kernel, stride, pad);
    let gw = conv_out_size(w, kernel, stride, pad);
    debug_assert_eq!(out.shape(), [c_in * kernel * kernel, gh * gw]);
    let zero = F::zero();
    for c in 0..c_in {
        let plane = x.index_axis(Axis(0), c);
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let mut out_row = out.row_mut(row);
                let out_slice = out_row.as_slice_mut().expect("row is contiguous");
                for gi in 0..gh {
                    let r = (gi * stride + ki) as isize - pad as isize;
                    let base = gi * gw;
                    if r < 0 || r >= h as isize {
                        out_slice[base..base + gw].fill(zero);
                        continue;
                    }
                    for gj in 0..gw {
                        let cc = (gj * stride + kj) as isize - pad as isize;
                        out_slice[base + gj] = if cc < 0 || cc >= w as isize {
                            zero
                        } else {
                            plane[[r as usize, cc as usize]]
                        };
                    }
                }
            }
        }
    }
}

/// Adds the column matrix back into an image: the adjoint of [`im2col`].
fn col2im_add<F: Scalar>(
    cols: &Array2<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
    grid: (usize, usize),
    img: &mut ndarray::ArrayViewMut3<'_, F>,
) {
    let (c_out, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (gh, gw) = grid;
    debug_assert_eq!(cols.shape(), [c_out * kernel * kernel, gh * gw]);
    for c in 0..c_out {
        let mut plane = img.index_axis_mut(Axis(0), c);
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = cols.row((c * kernel + ki) * kernel + kj);
                let row = row.as_slice().expect("row is contiguous");
                for gi in 0..gh {
                    let r = (gi * stride + ki) as isize - pad as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for gj in 0..gw {
                        let cc = (gj * stride + kj) as isize - pad as isize;
                        if cc >= 0 && (cc as usize) < w {
                            plane[[r as usize, cc as usize]] += row[gi * gw + gj];
                        }
                    }
                }
            }
        }
    }
}

/// Fixed chunk count for batch reductions; keeping it constant (rather than
/// tied to the thread pool size) keeps results machine-independent.
const REDUCE_CHUNKS: usize = 4;

/// Strided 2D convolution, weight layout (C_out, C_in, k, k).
pub struct Conv2d<F> {
    pub weight: Array4<F>,
    pub bias: Option<Array1<F>>,
    pub grad_weight: Array4<F>,
    pub grad_bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    cols: Option<(Array3<F>, (usize, usize))>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: super::he_normal((c_out, c_in, kernel, kernel), fan_in, rng),
            bias: bias.then(|| Array1::zeros(c_out)),
            grad_weight: Array4::zeros((c_out, c_in, kernel, kernel)),
            grad_bias: Array1::zeros(c_out),
            stride,
            pad,
            cols: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn weight_matrix(&self) -> Array2<F> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("weight is contiguous")
            .to_owned()
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c_in, h, w) = x.dim();
        let k = self.kernel();
        debug_assert_eq!(c_in, self.weight.shape()[1]);
        let (gh, gw) = (
            conv_out_size(h, k, self.stride, self.pad),
            conv_out_size(w, k, self.stride, self.pad),
        );
        let r = c_in * k * k;
        let wm = self.weight_matrix();
        let mut y = Array4::<F>::zeros((n, self.out_channels(), gh, gw));
        let mut cols = Array3::<F>::zeros((n, r, gh * gw));
        Zip::from(y.axis_iter_mut(Axis(0)))
            .and(x.axis_iter(Axis(0)))
            .and(cols.axis_iter_mut(Axis(0)))
            .par_for_each(|mut yn, xn, mut coln| {
                im2col(&xn, k, self.stride, self.pad, &mut coln);
                let prod = wm.dot(&coln);
                yn.assign(
                    &prod
                        .into_shape_with_order((self.out_channels(), gh, gw))
                        .expect("product is contiguous"),
                );
            });
        if let Some(b) = &self.bias {
            for (co, &bv) in b.iter().enumerate() {
                y.slice_mut(ndarray::s![.., co, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        self.cols = train.then_some((cols, (h, w)));
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, grad_y: &Array4<F>) -> Array4<F> {
        let (cols, (h, w)) = self
            .cols
            .take()
            .expect("forward(train=true) must precede backward");
        let (n, c_out, gh, gw) = grad_y.dim();
        let k = self.kernel();
        let c_in = self.weight.shape()[1];
        let r = c_in * k * k;
        let l = gh * gw;

        if self.bias.is_some() {
            for co in 0..c_out {
                self.grad_bias[co] += grad_y.slice(ndarray::s![.., co, .., ..]).sum();
            }
        }

        // Weight gradient: fixed-size chunked reduction for determinism.
        use rayon::prelude::*;
        let chunk = n.div_ceil(REDUCE_CHUNKS).max(1);
        let ranges: Vec<std::ops::Range<usize>> = (0..n)
            .step_by(chunk)
            .map(|start| start..(start + chunk).min(n))
            .collect();
        let partials: Vec<Array2<F>> = ranges
            .into_par_iter()
            .map(|idxs| {
                let mut acc = Array2::<F>::zeros((c_out, r));
                for i in idxs {
                    let gy = grad_y
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((c_out, l))
                        .expect("contiguous");
                    let coln = cols.index_axis(Axis(0), i);
                    acc = acc + gy.dot(&coln.t());
                }
                acc
            })
            .collect();
        let mut gw_mat = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((c_out, r))
            .expect("contiguous");
        for p in partials {
            gw_mat += &p;
        }

        // Input gradient.
        let wm = self.weight_matrix();
        let mut grad_x = Array4::<F>::zeros((n, c_in, h, w));
        Zip::from(grad_x.axis_iter_mut(Axis(0)))
            .and(grad_y.axis_iter(Axis(0)))
            .par_for_each(|mut gxn, gyn| {
                let gy = gyn.into_shape_with_order((c_out, l)).expect("contiguous");
                let cols_grad = wm.t().dot(&gy);
                col2im_add(&cols_grad, k, self.stride, self.pad, (gh, gw), &mut gxn);
            });
        grad_x
    }

    pub fn params(&mut self) -> Vec<Param<'_, F>> {
        let mut out = vec![Param {
            value: self.weight.as_slice_mut().expect("contiguous"),
            grad: self.grad_weight.as_slice_mut().expect("contiguous"),
        }];
        if let Some(b) = &mut self.bias {
            out.push(Param {
                value: b.as_slice_mut().expect("contiguous"),
                grad: self.grad_bias.as_slice_mut().expect("contiguous"),
            });
        }
        out
    }
}

/// Strided 2D transposed convolution, weight layout (C_in, C_out, k, k).
pub struct ConvTranspose2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub grad_weight: Array4<F>,
    pub grad_bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    input: Option<Array4<F>>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: super::he_normal((c_in, c_out, kernel, kernel), fan_in, rng),
            bias: Array1::zeros(c_out),
            grad_weight: Array4::zeros((c_in, c_out, kernel, kernel)),
            grad_bias: Array1::zeros(c_out),
            stride,
            pad,
            input: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn weight_matrix(&self) -> Array2<F> {
        let (ci, co, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((ci, co * k * k))
            .expect("weight is contiguous")
            .to_owned()
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c_in, h_in, w_in) = x.dim();
        debug_assert_eq!(c_in, self.weight.shape()[0]);
        let k = self.kernel();
        let c_out = self.weight.shape()[1];
        let (h_out, w_out) = (
            deconv_out_size(h_in, k, self.stride, self.pad),
            deconv_out_size(w_in, k, self.stride, self.pad),
        );
        let wm = self.weight_matrix();
        let mut y = Array4::<F>::zeros((n, c_out, h_out, w_out));
        Zip::from(y.axis_iter_mut(Axis(0)))
            .and(x.axis_iter(Axis(0)))
            .par_for_each(|mut yn, xn| {
                let xm = xn
                    .into_shape_with_order((c_in, h_in * w_in))
                    .expect("contiguous");
                let cols = wm.t().dot(&xm);
                col2im_add(&cols, k, self.stride, self.pad, (h_in, w_in), &mut yn);
            });
        for (co, &bv) in self.bias.iter().enumerate() {
            y.slice_mut(ndarray::s![.., co, .., ..]).mapv_inplace(|v| v + bv);
        }
        self.input = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, grad_y: &Array4<F>) -> Array4<F> {
        let x = self.input.take().expect("forward(train=true) must precede backward");
        let (n, c_in, h_in, w_in) = x.dim();
        let k = self.kernel();
        let c_out = self.weight.shape()[1];
        let r = c_out * k * k;
        let l = h_in * w_in;

        for co in 0..c_out {
            self.grad_bias[co] += grad_y.slice(ndarray::s![.., co, .., ..]).sum();
        }

        // Columns of grad_y are shared by the weight and input gradients.
        use rayon::prelude::*;
        let wm = self.weight_matrix();
        let mut grad_x = Array4::<F>::zeros((n, c_in, h_in, w_in));
        let chunk = n.div_ceil(REDUCE_CHUNKS).max(1);
        let results: Vec<Array2<F>> = grad_x
            .axis_chunks_iter_mut(Axis(0), chunk)
            .into_par_iter()
            .enumerate()
            .map(|(ci, mut gx_chunk)| {
                let mut acc = Array2::<F>::zeros((c_in, r));
                let mut cols = Array2::<F>::zeros((r, l));
                for slot in 0..gx_chunk.shape()[0] {
                    let i = ci * chunk + slot;
                    im2col(
                        &grad_y.index_axis(Axis(0), i),
                        k,
                        self.stride,
                        self.pad,
                        &mut cols.view_mut(),
                    );
                    let xm = x
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((c_in, l))
                        .expect("contiguous");
                    acc = acc + xm.dot(&cols.t());
                    let gx = wm.dot(&cols);
                    gx_chunk.index_axis_mut(Axis(0), slot).assign(
                        &gx.into_shape_with_order((c_in, h_in, w_in))
                            .expect("contiguous"),
                    );
                }
                acc
            })
            .collect();
        let mut gw_mat = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((c_in, r))
            .expect("contiguous");
        for p in results {
            gw_mat += &p;
        }
        grad_x
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

/// Backward-data pass through fixed convolution weights (used by the frozen
/// feature extractor, which needs no weight gradients).
pub fn conv_backward_data<F: Scalar>(
    weight: &Array4<F>,
    grad_y: &Array4<F>,
    stride: usize,
    pad: usize,
    input_hw: (usize, usize),
) -> Array4<F> {
    let (c_out, c_in, k, _) = weight.dim();
    let (n, gy_c, gh, gw) = grad_y.dim();
    debug_assert_eq!(gy_c, c_out);
    let wm = weight
        .view()
        .into_shape_with_order((c_out, c_in * k * k))
        .expect("contiguous")
        .to_owned();
    let mut grad_x = Array4::<F>::zeros((n, c_in, input_hw.0, input_hw.1));
    Zip::from(grad_x.axis_iter_mut(Axis(0)))
        .and(grad_y.axis_iter(Axis(0)))
        .par_for_each(|mut gxn, gyn| {
            let gy = gyn
                .into_shape_with_order((c_out, gh * gw))
                .expect("contiguous");
            let cols = wm.t().dot(&gy);
            col2im_add(&cols, k, stride, pad, (gh, gw), &mut gxn);
        });
    grad_x
}

/// Forward convolution against fixed weights (no bias, no caching).
pub fn conv_forward_fixed<F: Scalar>(
    weight: &Array4<F>,
    x: &Array4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (c_out, c_in, k, _) = weight.dim();
    let (n, xc, h, w) = x.dim();
    debug_assert_eq!(xc, c_in);
    let (gh, gw) = (
        conv_out_size(h, k, stride, pad),
        conv_out_size(w, k, stride, pad),
    );
    let r = c_in * k * k;
    let wm = weight
        .view()
        .into_shape_with_order((c_out, r))
        .expect("contiguous")
        .to_owned();
    let mut y = Array4::<F>::zeros((n, c_out, gh, gw));
    Zip::from(y.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|mut yn, xn| {
            let mut col = Array2::<F>::zeros((r, gh * gw));
            im2col(&xn, k, stride, pad, &mut col.view_mut());
            let prod = wm.dot(&col);
            yn.assign(
                &prod
                    .into_shape_with_order((c_out, gh, gw))
                    .expect("contiguous"),
            );
        });
    y
}
