//! Layer primitives with analytic backward passes.
//!
//! 3x3x3 convolutions run on a zero-padded copy of the input. In padded
//! coordinates every kernel tap is a constant shift of the linear index, so the
//! column matrix for a run of output positions is built from contiguous
//! copies and each chunk needs one GEMM.

use lobeseg_core::{par, resample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::real::{gemm, Real};
use crate::tensor::FeatureMap;

/// Output positions per convolution work item. Fixed so results do not depend
/// on the number of threads.
pub const CONV_CHUNK: usize = 2048;
pub const TAPS: usize = 27;
pub const BN_EPS: f64 = 1e-5;

struct Padded {
    dims: [usize; 3],
    row: usize,
    plane: usize,
    len: usize,
    /// Padded index of the first and one past the last interior voxel.
    q0: usize,
    q1: usize,
}

impl Padded {
    fn new(dims: [usize; 3]) -> Self {
        let row = dims[0] + 2;
        let plane = row * (dims[1] + 2);
        let len = plane * (dims[2] + 2);
        let q0 = plane + row + 1;
        let q1 = dims[2] * plane + dims[1] * row + dims[0] + 1;
        Self { dims, row, plane, len, q0, q1 }
    }

    /// Linear shift of each tap, taps ordered z-major, x-fastest.
    fn offsets(&self) -> [isize; TAPS] {
        let mut o = [0isize; TAPS];
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    o[(dz * 3 + dy) * 3 + dx] =
                        (dz as isize - 1) * self.plane as isize + (dy as isize - 1) * self.row as isize + dx as isize - 1;
                }
            }
        }
        o
    }

    fn interior(&self, q: usize) -> Option<usize> {
        let x = q % self.row;
        let y = (q / self.row) % (self.dims[1] + 2);
        let z = q / self.plane;
        let [nx, ny, nz] = self.dims;
        if (1..=nx).contains(&x) && (1..=ny).contains(&y) && (1..=nz).contains(&z) {
            Some(((z - 1) * ny + (y - 1)) * nx + x - 1)
        } else {
            None
        }
    }

    fn pad<T: Real>(&self, src: &[T], channels: usize) -> Vec<T> {
        let [nx, ny, nz] = self.dims;
        let n = nx * ny * nz;
        let mut out = vec![T::zero(); channels * self.len];
        for c in 0..channels {
            for z in 0..nz {
                for y in 0..ny {
                    let s = c * n + (z * ny + y) * nx;
                    let d = c * self.len + (z + 1) * self.plane + (y + 1) * self.row + 1;
                    out[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
        }
        out
    }
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(NnError::ShapeMismatch(format!("{what}: {got} values, expected {expected}")));
    }
    Ok(())
}

/// 3x3x3 cross-correlation, stride 1, zero padding. Weights are laid out
/// `[out][in][tap]`.
pub fn conv3_forward<T: Real>(x: &FeatureMap<T>, w: &[T], b: &[T], cout: usize) -> Result<FeatureMap<T>> {
    let cin = x.channels;
    check_len("conv3 weights", w.len(), cout * cin * TAPS)?;
    check_len("conv3 bias", b.len(), cout)?;
    let pad = Padded::new(x.dims);
    let p = pad.pad(&x.data, cin);
    let offsets = pad.offsets();
    let k = cin * TAPS;
    let chunks = par::map_ranges(pad.q1 - pad.q0, CONV_CHUNK, |r| {
        let lc = r.len();
        let mut col = vec![T::zero(); k * lc];
        for ci in 0..cin {
            for (t, &off) in offsets.iter().enumerate() {
                let s = (ci * pad.len + pad.q0 + r.start) as isize + off;
                col[(ci * TAPS + t) * lc..][..lc].copy_from_slice(&p[s as usize..][..lc]);
            }
        }
        let mut c = vec![T::zero(); cout * lc];
        gemm(cout, k, lc, T::one(), w, (k, 1), &col, (lc, 1), T::zero(), &mut c, (lc, 1));
        c
    });
    let mut out = FeatureMap::zeros(cout, x.dims);
    let n = x.voxels();
    for (i, c) in chunks.iter().enumerate() {
        let lc = c.len() / cout;
        for j in 0..lc {
            if let Some(v) = pad.interior(pad.q0 + i * CONV_CHUNK + j) {
                for co in 0..cout {
                    out.data[co * n + v] = c[co * lc + j] + b[co];
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<FeatureMap<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv3_backward<T: Real>(x: &FeatureMap<T>, w: &[T], cout: usize, dy: &FeatureMap<T>, need_dx: bool) -> Result<ConvGrads<T>> {
    let cin = x.channels;
    check_len("conv3 weights", w.len(), cout * cin * TAPS)?;
    if dy.channels != cout || dy.dims != x.dims {
        return Err(NnError::ShapeMismatch("conv3 output gradient".into()));
    }
    let pad = Padded::new(x.dims);
    let p = pad.pad(&x.data, cin);
    let gp = pad.pad(&dy.data, cout);
    let offsets = pad.offsets();
    let k = cin * TAPS;
    let kt = cout * TAPS;
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..TAPS {
                wt[ci * kt + co * TAPS + t] = w[(co * cin + ci) * TAPS + t];
            }
        }
    }
    let chunks = par::map_ranges(pad.q1 - pad.q0, CONV_CHUNK, |r| {
        let lc = r.len();
        let start = pad.q0 + r.start;
        let mut col = vec![T::zero(); k * lc];
        for ci in 0..cin {
            for (t, &off) in offsets.iter().enumerate() {
                let s = (ci * pad.len + start) as isize + off;
                col[(ci * TAPS + t) * lc..][..lc].copy_from_slice(&p[s as usize..][..lc]);
            }
        }
        let mut dw = vec![T::zero(); cout * k];
        gemm(cout, lc, k, T::one(), &gp[start..], (pad.len, 1), &col, (1, lc), T::zero(), &mut dw, (k, 1));
        let dx = need_dx.then(|| {
            let mut colg = vec![T::zero(); kt * lc];
            for co in 0..cout {
                for (t, &off) in offsets.iter().enumerate() {
                    let s = (co * pad.len + start) as isize - off;
                    colg[(co * TAPS + t) * lc..][..lc].copy_from_slice(&gp[s as usize..][..lc]);
                }
            }
            let mut dxc = vec![T::zero(); cin * lc];
            gemm(cin, kt, lc, T::one(), &wt, (kt, 1), &colg, (lc, 1), T::zero(), &mut dxc, (lc, 1));
            dxc
        });
        (dw, dx)
    });
    let n = x.voxels();
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = need_dx.then(|| FeatureMap::zeros(cin, x.dims));
    for (i, (dwc, dxc)) in chunks.into_iter().enumerate() {
        for (a, b) in dw.iter_mut().zip(dwc) {
            *a += b;
        }
        if let (Some(dx), Some(dxc)) = (dx.as_mut(), dxc) {
            let lc = dxc.len() / cin;
            for j in 0..lc {
                if let Some(v) = pad.interior(pad.q0 + i * CONV_CHUNK + j) {
                    for ci in 0..cin {
                        dx.data[ci * n + v] = dxc[ci * lc + j];
                    }
                }
            }
        }
    }
    let db = (0..cout).map(|co| dy.channel(co).iter().copied().sum()).collect();
    Ok(ConvGrads { dx, dw, db })
}

/// Pointwise (1x1x1) convolution; weights `[out][in]`.
pub fn conv1_forward<T: Real>(x: &FeatureMap<T>, w: &[T], b: &[T], cout: usize) -> Result<FeatureMap<T>> {
    let cin = x.channels;
    check_len("conv1 weights", w.len(), cout * cin)?;
    check_len("conv1 bias", b.len(), cout)?;
    let n = x.voxels();
    let mut out = FeatureMap::zeros(cout, x.dims);
    gemm(cout, cin, n, T::one(), w, (cin, 1), &x.data, (n, 1), T::zero(), &mut out.data, (n, 1));
    for co in 0..cout {
        out.channel_mut(co).iter_mut().for_each(|v| *v += b[co]);
    }
    Ok(out)
}

pub fn conv1_backward<T: Real>(x: &FeatureMap<T>, w: &[T], cout: usize, dy: &FeatureMap<T>, need_dx: bool) -> Result<ConvGrads<T>> {
    let cin = x.channels;
    check_len("conv1 weights", w.len(), cout * cin)?;
    if dy.channels != cout || dy.dims != x.dims {
        return Err(NnError::ShapeMismatch("conv1 output gradient".into()));
    }
    let n = x.voxels();
    let mut dw = vec![T::zero(); cout * cin];
    gemm(cout, n, cin, T::one(), &dy.data, (n, 1), &x.data, (1, n), T::zero(), &mut dw, (cin, 1));
    let dx = need_dx.then(|| {
        let mut dx = FeatureMap::zeros(cin, x.dims);
        gemm(cin, cout, n, T::one(), w, (1, cin), &dy.data, (n, 1), T::zero(), &mut dx.data, (n, 1));
        dx
    });
    let db = (0..cout).map(|co| dy.channel(co).iter().copied().sum()).collect();
    Ok(ConvGrads { dx, dw, db })
}

pub fn relu_inplace<T: Real>(x: &mut FeatureMap<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(y: &FeatureMap<T>, dy: &mut FeatureMap<T>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub struct BnCache<T> {
    pub xhat: FeatureMap<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Batch normalization with per-channel statistics over the spatial dims.
pub fn batchnorm_train<T: Real>(x: &FeatureMap<T>, gamma: &[T], beta: &[T]) -> (FeatureMap<T>, BnCache<T>) {
    let n = x.voxels();
    let mut y = FeatureMap::zeros(x.channels, x.dims);
    let mut xhat = FeatureMap::zeros(x.channels, x.dims);
    let mut inv_std = Vec::with_capacity(x.channels);
    let mut batch_mean = Vec::with_capacity(x.channels);
    let mut batch_var = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let xs = x.channel(c);
        let mean = xs.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / n as f64;
        let is = T::of(1.0 / (var + BN_EPS).sqrt());
        let m = T::of(mean);
        let (g, b) = (gamma[c], beta[c]);
        for ((h, o), &v) in xhat.channel_mut(c).iter_mut().zip(y.data[c * n..(c + 1) * n].iter_mut()).zip(xs) {
            *h = (v - m) * is;
            *o = g * *h + b;
        }
        inv_std.push(is);
        batch_mean.push(mean);
        batch_var.push(var);
    }
    (y, BnCache { xhat, inv_std, batch_mean, batch_var })
}

pub fn batchnorm_eval<T: Real>(x: &FeatureMap<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> FeatureMap<T> {
    let mut y = x.clone();
    for c in 0..x.channels {
        let is = T::one() / (var[c] + T::of(BN_EPS)).sqrt();
        let (g, b, m) = (gamma[c], beta[c], mean[c]);
        y.channel_mut(c).iter_mut().for_each(|v| *v = g * (*v - m) * is + b);
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(cache: &BnCache<T>, gamma: &[T], dy: &FeatureMap<T>) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
    let n = dy.voxels();
    let nf = T::of(n as f64);
    let mut dx = FeatureMap::zeros(dy.channels, dy.dims);
    let mut dgamma = Vec::with_capacity(dy.channels);
    let mut dbeta = Vec::with_capacity(dy.channels);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let h = cache.xhat.channel(c);
        let sum_g: T = g.iter().copied().sum();
        let sum_gh: T = g.iter().zip(h).map(|(&a, &b)| a * b).sum();
        dgamma.push(sum_gh);
        dbeta.push(sum_g);
        let scale = gamma[c] * cache.inv_std[c] / nf;
        for ((d, &gi), &hi) in dx.channel_mut(c).iter_mut().zip(g).zip(h) {
            *d = scale * (nf * gi - sum_g - hi * sum_gh);
        }
    }
    (dx, dgamma, dbeta)
}

/// Inverted-dropout multipliers (0 or `1/(1-rate)`), seeded.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, seed: u64) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    if rate == 0.0 {
        return Ok(vec![T::one(); len]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect())
}

pub fn apply_mask<T: Real>(x: &mut FeatureMap<T>, mask: &[T]) {
    x.data.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
}

/// Softmax over the channel axis at every voxel.
pub fn softmax<T: Real>(logits: &FeatureMap<T>) -> FeatureMap<T> {
    let n = logits.voxels();
    let c = logits.channels;
    let mut out = FeatureMap::zeros(c, logits.dims);
    for v in 0..n {
        let mut max = logits.data[v];
        for k in 1..c {
            max = max.max(logits.data[k * n + v]);
        }
        let mut sum = T::zero();
        for k in 0..c {
            let e = (logits.data[k * n + v] - max).exp();
            out.data[k * n + v] = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for k in 0..c {
            out.data[k * n + v] *= inv;
        }
    }
    out
}

/// Logit gradient from the gradient with respect to the probabilities.
pub fn softmax_backward<T: Real>(probs: &FeatureMap<T>, dprobs: &FeatureMap<T>) -> FeatureMap<T> {
    let n = probs.voxels();
    let c = probs.channels;
    let mut out = FeatureMap::zeros(c, probs.dims);
    for v in 0..n {
        let mut dot = T::zero();
        for k in 0..c {
            dot += probs.data[k * n + v] * dprobs.data[k * n + v];
        }
        for k in 0..c {
            out.data[k * n + v] = probs.data[k * n + v] * (dprobs.data[k * n + v] - dot);
        }
    }
    out
}

pub fn concat<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if a.dims != b.dims {
        return Err(NnError::ShapeMismatch(format!("concat {:?} with {:?}", a.dims, b.dims)));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(FeatureMap { channels: a.channels + b.channels, dims: a.dims, data })
}

/// Splits a concatenated gradient after the first `channels` channels.
pub fn split<T: Real>(x: &FeatureMap<T>, channels: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let cut = channels * x.voxels();
    (
        FeatureMap { channels, dims: x.dims, data: x.data[..cut].to_vec() },
        FeatureMap { channels: x.channels - channels, dims: x.dims, data: x.data[cut..].to_vec() },
    )
}

fn per_channel<T: Real>(x: &FeatureMap<T>, f: impl Fn(&[T]) -> (Vec<T>, [usize; 3])) -> FeatureMap<T> {
    let mut dims = x.dims;
    let mut data = Vec::new();
    for c in 0..x.channels {
        let (v, d) = f(x.channel(c));
        dims = d;
        data.extend(v);
    }
    FeatureMap { channels: x.channels, dims, data }
}

pub fn downsample<T: Real>(x: &FeatureMap<T>, factor: usize) -> Result<FeatureMap<T>> {
    if factor == 1 {
        return Ok(x.clone());
    }
    if x.dims.iter().any(|d| d % factor != 0) {
        return Err(NnError::NotDivisible { dims: x.dims, factor });
    }
    Ok(per_channel(x, |c| resample::downsample(c, x.dims, factor)))
}

/// `fine_dims` are the dims of the forward input.
pub fn downsample_backward<T: Real>(dy: &FeatureMap<T>, fine_dims: [usize; 3], factor: usize) -> FeatureMap<T> {
    if factor == 1 {
        return dy.clone();
    }
    per_channel(dy, |c| (resample::downsample_adjoint(c, fine_dims, factor), fine_dims))
}

pub fn upsample<T: Real>(x: &FeatureMap<T>, factor: usize) -> FeatureMap<T> {
    per_channel(x, |c| resample::upsample(c, x.dims, factor))
}

/// `coarse_dims` are the dims of the forward input.
pub fn upsample_backward<T: Real>(dy: &FeatureMap<T>, coarse_dims: [usize; 3], factor: usize) -> FeatureMap<T> {
    per_channel(dy, |c| (resample::upsample_adjoint(c, coarse_dims, factor), coarse_dims))
}
