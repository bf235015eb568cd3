//! Convolution operator matrices and spectral norms.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::kernels::{self, ConvGeometry};
use crate::autodiff::Tensor;
use crate::rng::rng_from;
use crate::{Error, Result};

pub const POWER_MAX_ITERS: usize = 1000;
pub const POWER_TOLERANCE: f64 = 1e-10;
const POWER_SEED: u64 = 0x5350_4543;

/// Dense matrix `M` with `M · vec(x) = vec(conv(U, x))` for every input `x`
/// of shape `(in_channels, height, width)`.
///
/// Rows index `(out_channel, y, x)` and columns index `(in_channel, y, x)`,
/// both row-major, matching the flattened layout used by the network.
pub fn conv_operator_matrix(
    kernel: &Tensor,
    height: usize,
    width: usize,
    padding: usize,
) -> Result<Tensor> {
    let geom = geometry_for(kernel, height, width, padding)?;
    let rows = geom.output_len();
    let cols = geom.input_len();
    let mut m = vec![0.0; rows * cols];
    let k = kernel.data();
    geom.for_each_tap(|oi, ii, ki| m[oi * cols + ii] += k[ki]);
    Tensor::new(vec![rows, cols], m)
}

pub(crate) fn geometry_for(
    kernel: &Tensor,
    height: usize,
    width: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [cout, cin, k, k2] = kernel.shape() else {
        return Err(Error::shape(
            "conv_operator_matrix",
            kernel.shape(),
            &[0, 0, 0, 0],
        ));
    };
    if k != k2 {
        return Err(Error::shape(
            "conv_operator_matrix",
            kernel.shape(),
            &[*cout, *cin, *k, *k],
        ));
    }
    let geom = ConvGeometry {
        in_channels: *cin,
        out_channels: *cout,
        height,
        width,
        kernel: *k,
        padding,
    };
    if geom.output_hw().is_none() {
        return Err(Error::Config(format!(
            "kernel {k}x{k} larger than padded input {}x{}",
            height + 2 * padding,
            width + 2 * padding
        )));
    }
    Ok(geom)
}

/// Largest singular value by power iteration on `MᵀM`.
///
/// The start vector comes from a fixed seed, so repeated calls agree
/// bit-for-bit. Iterates are accumulated in a Krylov basis, which converges
/// even when the top singular values are clustered. Convergence is declared
/// when successive estimates differ by less than `POWER_TOLERANCE` relative.
pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    let [rows, cols] = m.shape() else {
        return Err(Error::shape("spectral_norm", m.shape(), &[0, 0]));
    };
    let (rows, cols) = (*rows, *cols);
    m.ensure_finite("spectral_norm input")?;
    if m.data().iter().all(|&v| v == 0.0) || rows == 0 || cols == 0 {
        return Ok(0.0);
    }
    let a = m.data();
    power_iteration(
        cols,
        |v| {
            (0..rows)
                .map(|i| {
                    a[i * cols..(i + 1) * cols]
                        .iter()
                        .zip(v)
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect()
        },
        |u| {
            let mut w = vec![0.0; cols];
            for (i, &ui) in u.iter().enumerate() {
                for (wj, aij) in w.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
                    *wj += aij * ui;
                }
            }
            w
        },
    )
}

/// Spectral norm of the convolution operator without forming its matrix.
///
/// Agrees with `spectral_norm(&conv_operator_matrix(..))` up to the power
/// iteration tolerance.
pub fn conv_operator_norm(
    kernel: &Tensor,
    height: usize,
    width: usize,
    padding: usize,
) -> Result<f64> {
    let geom = geometry_for(kernel, height, width, padding)?;
    kernel.ensure_finite("conv_operator_norm input")?;
    if kernel.data().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let k = kernel.data();
    power_iteration(
        geom.input_len(),
        |v| kernels::conv2d(v, k, &geom),
        |u| kernels::conv2d_grad_input(u, k, &geom),
    )
}

/// Largest eigenvalue of `MᵀM` by a Lanczos recurrence with full
/// reorthogonalization, started from the fixed-seed vector used by plain
/// power iteration. Returns its square root.
fn power_iteration(
    cols: usize,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<f64> {
    let mut rng = rng_from(POWER_SEED);
    let mut q: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut q);

    let gram = |v: &[f64]| apply_t(&apply(v));
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let (mut alphas, mut betas) = (Vec::new(), Vec::new());
    let mut theta = 0.0;
    let steps = POWER_MAX_ITERS.min(cols);
    for j in 0..steps {
        let mut w = gram(&q);
        let alpha = dot(&q, &w);
        basis.push(q);
        alphas.push(alpha);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let next = tridiagonal_max_eigenvalue(&alphas, &betas).max(0.0);
        let beta = norm(&w);
        let converged = j > 0 && (next - theta).abs() <= POWER_TOLERANCE * next;
        theta = next;
        if converged || beta <= 1e-13 * theta.max(f64::MIN_POSITIVE) || j + 1 == cols {
            return Ok(theta.sqrt());
        }
        betas.push(beta);
        q = w.into_iter().map(|x| x / beta).collect();
    }
    Err(Error::NoConvergence {
        what: "spectral norm power iteration",
        iterations: steps,
        last: theta.sqrt(),
    })
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal `a`
/// and off-diagonal `b`, by Sturm-sequence bisection.
fn tridiagonal_max_eigenvalue(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let off = |i: usize| if i < b.len() { b[i].abs() } else { 0.0 };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &ai) in a.iter().enumerate() {
        let r = off(i) + if i > 0 { off(i - 1) } else { 0.0 };
        lo = lo.min(ai - r);
        hi = hi.max(ai + r);
    }
    // number of eigenvalues strictly below x
    let below = |x: f64| {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..n {
            let b2 = if i > 0 { b[i - 1] * b[i - 1] } else { 0.0 };
            d = a[i] - x - if i > 0 { b2 / d } else { 0.0 };
            if d == 0.0 {
                d = -f64::EPSILON * (x.abs() + 1.0);
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) == n {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn identity_has_unit_norm() {
        assert!((spectral_norm(&eye(6)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_norm_is_largest_entry() {
        let d = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((spectral_norm(&d).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        assert_eq!(spectral_norm(&Tensor::zeros(&[3, 4])).unwrap(), 0.0);
    }

    #[test]
    fn pointwise_kernel_is_scaled_identity() {
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let m = conv_operator_matrix(&k, 3, 4, 0).unwrap();
        let mut expected = eye(12);
        expected.data_mut().iter_mut().for_each(|v| *v *= 2.5);
        assert_eq!(m, expected);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        let k = Tensor::new(vec![1, 1, 3, 3], data).unwrap();
        let m = conv_operator_matrix(&k, 5, 5, 1).unwrap();
        assert_eq!(m, eye(25));
    }

    #[test]
    fn matrix_free_norm_matches_dense() {
        let data: Vec<f64> = (0..2 * 3 * 9)
            .map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0)
            .collect();
        let k = Tensor::new(vec![2, 3, 3, 3], data).unwrap();
        let dense = spectral_norm(&conv_operator_matrix(&k, 4, 5, 1).unwrap()).unwrap();
        let free = conv_operator_norm(&k, 4, 5, 1).unwrap();
        assert!((dense - free).abs() < 1e-8 * dense);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let k = Tensor::zeros(&[1, 1, 7, 7]);
        assert!(conv_operator_matrix(&k, 3, 3, 1).is_err());
    }
}
