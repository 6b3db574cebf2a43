//! The window-variance obfuscation loss and a pixel-space optimizer for it.
//!
//! An image is split into non-overlapping `s x s` windows; the loss is the
//! summed squared deviation of each window's pixel variance from a target
//! `expected_variance`. Driving pixels down this loss injects noise into
//! flat regions while keeping coarse structure, which is the visual
//! obfuscation the defender's generator is trained under.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use ndarray::{Array3, ArrayView3};
use std::ops::Range;

/// Non-overlapping window partition of an `H x W` image plane.
///
/// All windows are `s x s` except the last row/column of windows, which are
/// truncated when `s` does not divide the image side. Every pixel belongs
/// to exactly one window.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    window_size: usize,
    height: usize,
    width: usize,
    windows: Vec<(Range<usize>, Range<usize>)>,
}

impl WindowGrid {
    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[(Range<usize>, Range<usize>)] {
        &self.windows
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Parameters of the obfuscation loss.
#[derive(Debug, Clone, Copy)]
pub struct ObfuscationParams<F> {
    /// Target per-window pixel variance, in [-1, 1] pixel scale.
    pub expected_variance: F,
    /// Window side length in pixels.
    pub window_size: usize,
}

impl<F: Scalar> ObfuscationParams<F> {
    pub fn new(expected_variance: F, window_size: usize) -> Result<Self> {
        if expected_variance < F::zero() {
            return Err(Error::InvalidConfig(format!(
                "expected variance must be non-negative, got {expected_variance}"
            )));
        }
        Ok(Self {
            expected_variance,
            window_size,
        })
    }
}

/// Builds the window partition for an `height x width` image.
pub fn make_grid(height: usize, width: usize, s: usize) -> Result<WindowGrid> {
    if s == 0 || s > height.min(width) {
        return Err(Error::InvalidWindowSize { s, height, width });
    }
    let mut windows = Vec::with_capacity(height.div_ceil(s) * width.div_ceil(s));
    for r0 in (0..height).step_by(s) {
        for c0 in (0..width).step_by(s) {
            windows.push((r0..(r0 + s).min(height), c0..(c0 + s).min(width)));
        }
    }
    Ok(WindowGrid {
        window_size: s,
        height,
        width,
        windows,
    })
}

/// Population variance of all pixels of all channels inside one window.
pub fn window_variance<F: Scalar>(
    image: &ArrayView3<'_, F>,
    window: &(Range<usize>, Range<usize>),
) -> F {
    let patch = image.slice(ndarray::s![.., window.0.clone(), window.1.clone()]);
    let m = s::<F>(patch.len() as f64);
    let mean = patch.iter().copied().sum::<F>() / m;
    patch.iter().map(|&p| (p - mean) * (p - mean)).sum::<F>() / m
}

/// Per-window variances of an image under a grid.
pub fn window_variances<F: Scalar>(image: &ArrayView3<'_, F>, grid: &WindowGrid) -> Vec<F> {
    grid.windows
        .iter()
        .map(|w| window_variance(image, w))
        .collect()
}

/// Mean per-window variance of a whole batch; the harness logs this to
/// track how close generated images sit to the target variance.
pub fn mean_window_variance<F: Scalar>(batch: &crate::data::ImageBatch<F>, s_win: usize) -> Result<F> {
    let grid = make_grid(batch.height(), batch.width(), s_win)?;
    let mut acc = F::zero();
    for i in 0..batch.len() {
        let img = batch.image(i);
        for v in window_variances(&img, &grid) {
            acc += v;
        }
    }
    Ok(acc / s::<F>((batch.len() * grid.len()) as f64))
}

/// The obfuscation loss of one image and its analytic pixel gradient.
///
/// Loss: sum over windows of `(Var(w) - v_e)^2`. For a pixel `p` in a
/// window of `m` elements with mean `mu`, `dVar/dp = 2 (p - mu) / m`, so
/// `dL/dp = 4 (Var - v_e) (p - mu) / m`.
pub fn l_obf<F: Scalar>(
    image: &ArrayView3<'_, F>,
    grid: &WindowGrid,
    expected_variance: F,
) -> (F, Array3<F>) {
    let mut grad = Array3::<F>::zeros(image.raw_dim());
    let loss = accumulate_l_obf(image, grid, expected_variance, F::one(), &mut grad);
    (loss, grad)
}

/// Adds `scale` times the loss gradient into `grad` and returns the raw
/// (unscaled) loss. Shared by the standalone entry point and the generator
/// training loop, which folds the gradient into the tanh backward pass.
pub(crate) fn accumulate_l_obf<F: Scalar>(
    image: &ArrayView3<'_, F>,
    grid: &WindowGrid,
    expected_variance: F,
    scale: F,
    grad: &mut Array3<F>,
) -> F {
    let channels = image.shape()[0];
    let mut loss = F::zero();
    let four = s::<F>(4.0);
    for (rows, cols) in &grid.windows {
        let m = s::<F>((channels * rows.len() * cols.len()) as f64);
        let patch = image.slice(ndarray::s![.., rows.clone(), cols.clone()]);
        let mean = patch.iter().copied().sum::<F>() / m;
        let var = patch.iter().map(|&p| (p - mean) * (p - mean)).sum::<F>() / m;
        let dev = var - expected_variance;
        loss += dev * dev;
        let coeff = scale * four * dev / m;
        let mut gpatch = grad.slice_mut(ndarray::s![.., rows.clone(), cols.clone()]);
        ndarray::Zip::from(&mut gpatch)
            .and(&patch)
            .for_each(|g, &p| *g += coeff * (p - mean));
    }
    loss
}

/// Result of running gradient descent on the obfuscation loss.
#[derive(Debug, Clone)]
pub struct ObfuscationOutcome<F> {
    pub image: Array3<F>,
    pub loss: F,
    pub steps_taken: usize,
    pub converged: bool,
}

/// Drives an image toward per-window variance `v_e` by plain gradient
/// descent, clamping to [-1, 1] after each step. Stops when the loss falls
/// below `tol` or after `max_steps`; running out of steps is not an error,
/// the best iterate is returned with `converged = false`.
pub fn obfuscate_pixels<F: Scalar>(
    image: &ArrayView3<'_, F>,
    params: &ObfuscationParams<F>,
    step_size: F,
    max_steps: usize,
    tol: F,
) -> Result<ObfuscationOutcome<F>> {
    if step_size <= F::zero() {
        return Err(Error::InvalidConfig(format!(
            "step size must be positive, got {step_size}"
        )));
    }
    let grid = make_grid(image.shape()[1], image.shape()[2], params.window_size)?;
    let mut current = image.to_owned();
    let mut best = current.clone();
    let (mut loss, mut grad) = l_obf(&current.view(), &grid, params.expected_variance);
    let mut best_loss = loss;
    let mut steps_taken = 0;
    for _ in 0..max_steps {
        if loss < tol {
            break;
        }
        ndarray::Zip::from(&mut current).and(&grad).for_each(|p, &g| {
            *p = (*p - step_size * g).clamp(s(-1.0), s(1.0));
        });
        steps_taken += 1;
        let (l, g) = l_obf(&current.view(), &grid, params.expected_variance);
        loss = l;
        grad = g;
        if loss < best_loss {
            best_loss = loss;
            best.assign(&current);
        }
    }
    Ok(ObfuscationOutcome {
        image: best,
        loss: best_loss,
        converged: best_loss < tol,
        steps_taken,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    #[test]
    fn grid_32_by_5_truncates_edges() {
        let g = make_grid(32, 32, 5).unwrap();
        assert_eq!(g.len(), 49);
        let full = g
            .windows()
            .iter()
            .filter(|(r, c)| r.len() == 5 && c.len() == 5)
            .count();
        assert_eq!(full, 36);
        // Edge strips are 2 pixels wide.
        assert!(g
            .windows()
            .iter()
            .all(|(r, c)| (r.len() == 5 || r.len() == 2) && (c.len() == 5 || c.len() == 2)));
    }

    #[test]
    fn grid_single_window() {
        let g = make_grid(32, 32, 32).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.windows()[0], (0..32, 0..32));
    }

    #[test]
    fn grid_4x4_s2() {
        let g = make_grid(4, 4, 2).unwrap();
        assert_eq!(g.len(), 4);
        let mut covered = vec![vec![0u8; 4]; 4];
        for (rs, cs) in g.windows() {
            assert_eq!((rs.len(), cs.len()), (2, 2));
            for r in rs.clone() {
                for c in cs.clone() {
                    covered[r][c] += 1;
                }
            }
        }
        assert!(covered.iter().flatten().all(|&n| n == 1));
    }

    #[test]
    fn grid_rejects_bad_sizes() {
        assert!(make_grid(32, 32, 0).is_err());
        assert!(make_grid(32, 32, 33).is_err());
    }

    #[test]
    fn every_pixel_in_exactly_one_window() {
        // Exhaustive over small sizes, including non-divisible ones.
        for h in 1..=12usize {
            for w in 1..=12usize {
                for s in 1..=h.min(w) {
                    let g = make_grid(h, w, s).unwrap();
                    let mut count = vec![0u32; h * w];
                    for (rs, cs) in g.windows() {
                        for r in rs.clone() {
                            for c in cs.clone() {
                                count[r * w + c] += 1;
                            }
                        }
                    }
                    assert!(count.iter().all(|&n| n == 1), "h={h} w={w} s={s}");
                }
            }
        }
    }

    #[test]
    fn variance_of_constant_window_is_zero() {
        let img = Array3::<f64>::from_elem((1, 4, 4), 0.3);
        let v = window_variance(&img.view(), &(0..4, 0..4));
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn variance_of_two_level_window() {
        // {-1, -1, 1, 1}: mean 0, population variance 1.
        let img = Array3::from_shape_vec((1, 2, 2), vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
        let v = window_variance(&img.view(), &(0..2, 0..2));
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn variance_joint_across_channels() {
        // Channels constant at -1, 0, 1: 3 s^2 values each, mean 0,
        // E[x^2] = 2/3.
        let mut img = Array3::<f64>::zeros((3, 2, 2));
        img.slice_mut(ndarray::s![0, .., ..]).fill(-1.0);
        img.slice_mut(ndarray::s![2, .., ..]).fill(1.0);
        let v = window_variance(&img.view(), &(0..2, 0..2));
        assert_abs_diff_eq!(v, 2.0 / 3.0, epsilon = 1e-12);
    }

    /// Finite-difference oracle for the loss gradient.
    fn fd_grad(image: &Array3<f64>, grid: &WindowGrid, ve: f64, h: f64) -> Array3<f64> {
        let mut g = Array3::<f64>::zeros(image.raw_dim());
        let mut work = image.clone();
        for idx in ndarray::indices(image.raw_dim()) {
            let orig = work[idx];
            work[idx] = orig + h;
            let (lp, _) = l_obf(&work.view(), grid, ve);
            work[idx] = orig - h;
            let (lm, _) = l_obf(&work.view(), grid, ve);
            work[idx] = orig;
            g[idx] = (lp - lm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn loss_zero_at_target_variance() {
        // Build a 4x4 image whose single 2x2 windows each have variance 0.25.
        let img = Array3::from_shape_vec(
            (1, 2, 2),
            vec![0.5, -0.5, 0.5, -0.5], // variance 0.25
        )
        .unwrap();
        let grid = make_grid(2, 2, 2).unwrap();
        let (loss, grad): (f64, _) = l_obf(&img.view(), &grid, 0.25);
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
        assert!(grad.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn constant_image_loss_is_windows_times_ve_squared() {
        let img = Array3::<f64>::from_elem((1, 32, 32), 0.2);
        let grid = make_grid(32, 32, 5).unwrap();
        let (loss, _) = l_obf(&img.view(), &grid, 0.5);
        assert_abs_diff_eq!(loss, 49.0 * 0.25, epsilon = 1e-9);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = crate::rng_from_seed(7);
        let grid = make_grid(32, 32, 5).unwrap();
        for _ in 0..3 {
            let img = Array3::from_shape_fn((1, 32, 32), |_| {
                rand::Rng::random_range(&mut rng, -1.0..1.0)
            });
            let (_, ga) = l_obf(&img.view(), &grid, 0.5);
            let gf = fd_grad(&img, &grid, 0.5, 1e-4);
            let denom = gf.iter().map(|g| g.abs()).fold(0.0f64, f64::max);
            let maxerr = ga
                .iter()
                .zip(gf.iter())
                .map(|(a, f)| (a - f).abs())
                .fold(0.0f64, f64::max);
            assert!(maxerr / denom < 1e-4, "rel err {}", maxerr / denom);
        }
    }

    #[test]
    fn optimizer_early_exits_below_tol() {
        let img = Array3::from_shape_vec((1, 2, 2), vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        let params = ObfuscationParams::new(0.25, 2).unwrap();
        let out = obfuscate_pixels(&img.view(), &params, 0.1, 100, 1e-6).unwrap();
        assert_eq!(out.steps_taken, 0);
        assert!(out.converged);
        assert_eq!(out.image, img);
    }

    #[test]
    fn optimizer_reaches_target_variance_from_constant_image() {
        let img = Array3::<f64>::from_elem((1, 32, 32), 0.0);
        let params = ObfuscationParams::new(0.5, 5).unwrap();
        // A constant image is a stationary point of the variance; nudge it.
        let mut seeded = img.clone();
        let mut rng = crate::rng_from_seed(3);
        seeded.mapv_inplace(|p| p + rand::Rng::random_range(&mut rng, -0.01..0.01));
        let out = obfuscate_pixels(&seeded.view(), &params, 0.5, 4000, 1e-6).unwrap();
        let grid = make_grid(32, 32, 5).unwrap();
        let vars = window_variances(&out.image.view(), &grid);
        let mad: f64 =
            vars.iter().map(|v| (v - 0.5).abs()).sum::<f64>() / vars.len() as f64;
        assert!(mad < 0.02, "mean abs deviation {mad}");
    }

    #[test]
    fn loss_monotone_for_small_steps() {
        let mut rng = crate::rng_from_seed(11);
        let img = Array3::from_shape_fn((1, 16, 16), |_| {
            rand::Rng::random_range(&mut rng, -0.9f64..0.9)
        });
        let grid = make_grid(16, 16, 5).unwrap();
        let ve = 0.4;
        let mut current = img;
        let (mut prev, mut grad) = l_obf(&current.view(), &grid, ve);
        for _ in 0..200 {
            ndarray::Zip::from(&mut current).and(&grad).for_each(|p, &g| {
                *p = (*p - 0.05 * g).clamp(-1.0, 1.0);
            });
            let (l, g) = l_obf(&current.view(), &grid, ve);
            assert!(l <= prev + 1e-9, "loss rose from {prev} to {l}");
            prev = l;
            grad = g;
        }
    }
}
