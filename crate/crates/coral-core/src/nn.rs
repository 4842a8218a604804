//! Tiny dense-layer building blocks with explicit gradient buffers.
//!
//! Everything is f64 and single-threaded; parameters are quantized to f32
//! after optimizer updates so the checkpoint's single-precision blob is a
//! lossless snapshot.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Weight matrix with a matching gradient buffer.
#[derive(Debug, Clone)]
pub struct Param2 {
    pub v: Array2<f64>,
    pub g: Array2<f64>,
}

impl Param2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            v: Array2::zeros((rows, cols)),
            g: Array2::zeros((rows, cols)),
        }
    }

    pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self {
            v: Array2::from_shape_vec((rows, cols), data).expect("shape"),
            g: Array2::zeros((rows, cols)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param1 {
    pub v: Array1<f64>,
    pub g: Array1<f64>,
}

impl Param1 {
    pub fn zeros(len: usize) -> Self {
        Self {
            v: Array1::zeros(len),
            g: Array1::zeros(len),
        }
    }
}

/// Affine map `y = x W + b` over rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param2,
    pub b: Param1,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(in_dim)`, zero bias.
    pub fn init(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Param2::randn(rng, in_dim, out_dim, 1.0 / (in_dim as f64).sqrt()),
            b: Param1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Param2::zeros(in_dim, out_dim),
            b: Param1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.v.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.v.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.v) + &self.b.v
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
        self.w.g += &x.t().dot(d_out);
        for row in d_out.rows() {
            self.b.g += &row;
        }
        d_out.dot(&self.w.v.t())
    }

    /// Appends zero-initialized input rows, widening the accepted input
    /// dimension without changing the map on existing channels.
    pub fn widen_input(&mut self, extra: usize) {
        let (rows, cols) = self.w.v.dim();
        let mut w = Array2::zeros((rows + extra, cols));
        w.slice_mut(ndarray::s![..rows, ..]).assign(&self.w.v);
        self.w = Param2 {
            v: w,
            g: Array2::zeros((rows + extra, cols)),
        };
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_array(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(silu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::init(&mut rng, 3, 2);
        let x = Array2::from_shape_vec((2, 3), vec![0.1, -0.4, 0.7, 0.2, 0.5, -0.3]).unwrap();
        // loss = sum(y^2)
        let y = lin.forward(&x);
        let d_out = y.mapv(|v| 2.0 * v);
        let d_x = lin.backward(&x, &d_out);

        let loss = |l: &Linear, x: &Array2<f64>| l.forward(x).iter().map(|v| v * v).sum::<f64>();
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut lp = lin.clone();
                lp.w.v[[i, j]] += eps;
                let mut lm = lin.clone();
                lm.w.v[[i, j]] -= eps;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
                assert_abs_diff_eq!(lin.w.g[[i, j]], fd, epsilon = 1e-6);
            }
        }
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
                assert_abs_diff_eq!(d_x[[i, j]], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn widen_input_is_identity_on_old_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::init(&mut rng, 2, 3);
        let base = lin.clone();
        lin.widen_input(2);
        let x_old = Array2::from_shape_vec((1, 2), vec![0.3, -0.8]).unwrap();
        let x_new = Array2::from_shape_vec((1, 4), vec![0.3, -0.8, 5.0, -7.0]).unwrap();
        let a = base.forward(&x_old);
        let b = lin.forward(&x_new);
        assert_eq!(a, b);
    }

    #[test]
    fn silu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let eps = 1e-6;
            let fd = (silu(x + eps) - silu(x - eps)) / (2.0 * eps);
            assert_abs_diff_eq!(silu_grad(x), fd, epsilon = 1e-8);
        }
    }
}
