//! Separable resampling kernels on raw x-fastest buffers.
//!
//! These are shared by grid resampling and by the network's pooling and
//! upsampling layers, which also need the adjoint (transposed) operators for
//! back-propagation.

use num_traits::Float;

/// `(inner, n, outer)` such that `index = i + inner * (k + n * o)` for position
/// `k` along `axis`.
fn layout(dims: [usize; 3], axis: usize) -> (usize, usize, usize) {
    let inner: usize = dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product();
    (inner, dims[axis], outer)
}

fn with_axis(dims: [usize; 3], axis: usize, n: usize) -> [usize; 3] {
    let mut d = dims;
    d[axis] = n;
    d
}

/// Interpolation stencil for magnifying `n` samples by `factor` with
/// centre-aligned sampling and clamp-to-edge: `(i0, i1, w1)` per output sample.
fn linear_stencil(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|j| {
            let s = ((j as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Block average along one axis; `dims[axis]` must be divisible by `factor`.
pub fn block_average_axis<T: Float>(src: &[T], dims: [usize; 3], axis: usize, factor: usize) -> Vec<T> {
    let (inner, n, outer) = layout(dims, axis);
    debug_assert_eq!(n % factor, 0);
    let m = n / factor;
    let scale = T::from(1.0 / factor as f64).unwrap();
    let mut dst = vec![T::zero(); inner * m * outer];
    for o in 0..outer {
        for k in 0..m {
            let d = &mut dst[inner * (k + m * o)..][..inner];
            for f in 0..factor {
                let s = &src[inner * (k * factor + f + n * o)..][..inner];
                for (a, &b) in d.iter_mut().zip(s) {
                    *a = *a + b;
                }
            }
            for a in d.iter_mut() {
                *a = *a * scale;
            }
        }
    }
    dst
}

/// Adjoint of [`block_average_axis`]: spreads each coarse value over its block.
/// `dims` are the fine (source) dims.
pub fn block_average_axis_adjoint<T: Float>(grad: &[T], dims: [usize; 3], axis: usize, factor: usize) -> Vec<T> {
    let (inner, n, outer) = layout(dims, axis);
    let m = n / factor;
    let scale = T::from(1.0 / factor as f64).unwrap();
    let mut dst = vec![T::zero(); inner * n * outer];
    for o in 0..outer {
        for k in 0..m {
            let g = &grad[inner * (k + m * o)..][..inner];
            for f in 0..factor {
                let d = &mut dst[inner * (k * factor + f + n * o)..][..inner];
                for (a, &b) in d.iter_mut().zip(g) {
                    *a = b * scale;
                }
            }
        }
    }
    dst
}

/// Linear magnification by `factor` along one axis.
pub fn linear_upsample_axis<T: Float>(src: &[T], dims: [usize; 3], axis: usize, factor: usize) -> Vec<T> {
    let (inner, n, outer) = layout(dims, axis);
    let stencil = linear_stencil(n, factor);
    let m = n * factor;
    let mut dst = vec![T::zero(); inner * m * outer];
    for o in 0..outer {
        for (j, &(i0, i1, w)) in stencil.iter().enumerate() {
            let w1 = T::from(w).unwrap();
            let w0 = T::one() - w1;
            let a = &src[inner * (i0 + n * o)..][..inner];
            let b = &src[inner * (i1 + n * o)..][..inner];
            let d = &mut dst[inner * (j + m * o)..][..inner];
            for ((x, &p), &q) in d.iter_mut().zip(a).zip(b) {
                *x = p * w0 + q * w1;
            }
        }
    }
    dst
}

/// Adjoint of [`linear_upsample_axis`]. `dims` are the coarse (source) dims.
pub fn linear_upsample_axis_adjoint<T: Float>(grad: &[T], dims: [usize; 3], axis: usize, factor: usize) -> Vec<T> {
    let (inner, n, outer) = layout(dims, axis);
    let stencil = linear_stencil(n, factor);
    let m = n * factor;
    let mut dst = vec![T::zero(); inner * n * outer];
    for o in 0..outer {
        for (j, &(i0, i1, w)) in stencil.iter().enumerate() {
            let w1 = T::from(w).unwrap();
            let w0 = T::one() - w1;
            let g = &grad[inner * (j + m * o)..][..inner];
            for (t, &gv) in g.iter().enumerate() {
                let base = inner * (i0 + n * o) + t;
                dst[base] = dst[base] + gv * w0;
                let base = inner * (i1 + n * o) + t;
                dst[base] = dst[base] + gv * w1;
            }
        }
    }
    dst
}

/// Block average over `factor^3` blocks. Returns the coarse buffer and dims.
pub fn downsample<T: Float>(src: &[T], dims: [usize; 3], factor: usize) -> (Vec<T>, [usize; 3]) {
    let mut buf = src.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        buf = block_average_axis(&buf, d, axis, factor);
        d = with_axis(d, axis, d[axis] / factor);
    }
    (buf, d)
}

/// Adjoint of [`downsample`]; `dims` are the fine dims.
pub fn downsample_adjoint<T: Float>(grad: &[T], dims: [usize; 3], factor: usize) -> Vec<T> {
    let mut buf = grad.to_vec();
    for axis in (0..3).rev() {
        // dims as they were before this axis was reduced in the forward pass
        let mut d = dims;
        for (a, v) in d.iter_mut().enumerate() {
            if a < axis {
                *v /= factor;
            }
        }
        buf = block_average_axis_adjoint(&buf, d, axis, factor);
    }
    buf
}

/// Trilinear magnification by `factor` (separable linear passes).
pub fn upsample<T: Float>(src: &[T], dims: [usize; 3], factor: usize) -> (Vec<T>, [usize; 3]) {
    let mut buf = src.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        buf = linear_upsample_axis(&buf, d, axis, factor);
        d = with_axis(d, axis, d[axis] * factor);
    }
    (buf, d)
}

/// Adjoint of [`upsample`]; `dims` are the coarse dims.
pub fn upsample_adjoint<T: Float>(grad: &[T], dims: [usize; 3], factor: usize) -> Vec<T> {
    let mut buf = grad.to_vec();
    for axis in (0..3).rev() {
        let mut d = dims;
        for (a, v) in d.iter_mut().enumerate() {
            if a < axis {
                *v *= factor;
            }
        }
        buf = linear_upsample_axis_adjoint(&buf, d, axis, factor);
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // <A x, y> == <x, A^T y> for both operator pairs.
    #[test]
    fn adjoints_satisfy_the_dot_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fine = [4, 6, 2];
        let coarse = [2, 3, 1];
        let x = random(48, &mut rng);
        let y = random(6, &mut rng);
        let (ax, d) = downsample(&x, fine, 2);
        assert_eq!(d, coarse);
        let aty = downsample_adjoint(&y, fine, 2);
        assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-12);

        let x = random(6, &mut rng);
        let y = random(48, &mut rng);
        let (ax, d) = upsample(&x, coarse, 2);
        assert_eq!(d, fine);
        let aty = upsample_adjoint(&y, coarse, 2);
        assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-12);
    }

    #[test]
    fn linear_upsample_of_two_samples() {
        let v = linear_upsample_axis(&[0.0f64, 8.0], [2, 1, 1], 0, 2);
        assert_eq!(v, vec![0.0, 2.0, 6.0, 8.0]);
        let (all, d) = upsample(&[0.0f64, 8.0], [2, 1, 1], 2);
        assert_eq!(d, [4, 2, 2]);
        assert_eq!(&all[..4], &[0.0, 2.0, 6.0, 8.0]);
    }
}
