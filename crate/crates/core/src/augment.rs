//! Seeded intensity and geometric perturbations used for online training
//! augmentation and for the robustness sweeps, plus smooth random displacement
//! fields.
//!
//! Every function here is deterministic in its inputs and seed, and preserves
//! grid geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{warp, AtlasTemplate, DisplacementField};
use crate::resample;
use crate::volgrid::{GridGeometry, LabelGrid, VoxelGrid};

/// Below this width (in voxels) a Gaussian kernel is treated as a delta.
pub const MIN_BLUR_SIGMA: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbKind {
    /// Block-average one axis by `factor`, then linearly restore it.
    Anisotropy { axis: usize, factor: usize },
    /// Multiply by `exp(p(x, y, z))`, `p` a polynomial of total order `order`
    /// with coefficients drawn from `[-amplitude, amplitude]`.
    BiasField { amplitude: f64, order: usize },
    /// Separable Gaussian with standard deviation `sigma` voxels.
    Blur { sigma: f64 },
    /// Warp through a smoothed random field with max displacement `magnitude`.
    Elastic { magnitude: f64, smoothness: f64 },
    /// Min-max normalize, raise to `gamma`, restore the range.
    Gamma { gamma: f64 },
    /// Add `count` circularly shifted copies along `axis`, scaled by `amplitude`.
    Ghosting { count: usize, amplitude: f64, axis: usize },
    /// Replace the T2 channel by the T1 channel. Needs both channels, see [`bad_t2`].
    BadT2,
}

impl PerturbKind {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbKind::Anisotropy { .. } => "anisotropy",
            PerturbKind::BiasField { .. } => "bias_field",
            PerturbKind::Blur { .. } => "blur",
            PerturbKind::Elastic { .. } => "elastic",
            PerturbKind::Gamma { .. } => "gamma",
            PerturbKind::Ghosting { .. } => "ghosting",
            PerturbKind::BadT2 => "bad_t2",
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, PerturbKind::Elastic { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    #[serde(flatten)]
    pub kind: PerturbKind,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn label(&self) -> String {
        match self.kind {
            PerturbKind::Anisotropy { axis, factor } => format!("anisotropy(axis={axis},f={factor})"),
            PerturbKind::BiasField { amplitude, order } => format!("bias_field(a={amplitude},order={order})"),
            PerturbKind::Blur { sigma } => format!("blur(sigma={sigma})"),
            PerturbKind::Elastic { magnitude, smoothness } => format!("elastic(m={magnitude},s={smoothness})"),
            PerturbKind::Gamma { gamma } => format!("gamma({gamma})"),
            PerturbKind::Ghosting { count, amplitude, axis } => format!("ghosting(k={count},a={amplitude},axis={axis})"),
            PerturbKind::BadT2 => "bad_t2".to_string(),
        }
    }

    pub fn validate(&self, geometry: &GridGeometry) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match self.kind {
            PerturbKind::Anisotropy { axis, factor } => {
                if axis > 2 {
                    return bad(format!("anisotropy axis {axis}"));
                }
                if factor < 2 || !factor.is_power_of_two() {
                    return Err(Error::InvalidFactor(factor));
                }
                if geometry.dims[axis] % factor != 0 {
                    return Err(Error::NotDivisible { dims: geometry.dims, factor });
                }
            }
            PerturbKind::BiasField { amplitude, order } => {
                if !(amplitude >= 0.0) || order > 3 {
                    return bad(format!("bias field amplitude {amplitude}, order {order}"));
                }
            }
            PerturbKind::Blur { sigma } => {
                if !(sigma > 0.0) {
                    return bad(format!("blur sigma {sigma} must be > 0"));
                }
            }
            PerturbKind::Elastic { magnitude, smoothness } => {
                if !(magnitude >= 0.0) || !(smoothness > 0.0) {
                    return bad(format!("elastic magnitude {magnitude}, smoothness {smoothness}"));
                }
            }
            PerturbKind::Gamma { gamma } => {
                if !(gamma > 0.0) {
                    return bad(format!("gamma {gamma} must be > 0"));
                }
            }
            PerturbKind::Ghosting { count, amplitude, axis } => {
                if axis > 2 || !(amplitude >= 0.0) || count > geometry.dims[axis] {
                    return bad(format!("ghosting count {count}, amplitude {amplitude}, axis {axis}"));
                }
            }
            PerturbKind::BadT2 => {}
        }
        Ok(())
    }
}

/// Sampling ranges for random augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub bias_amplitude_max: f64,
    pub blur_sigma: (f64, f64),
    pub gamma: (f64, f64),
    pub ghost_count_max: usize,
    pub ghost_amplitude_max: f64,
    pub anisotropy_factors: (usize, usize),
    pub elastic_magnitude_max: f64,
    pub elastic_smoothness: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            bias_amplitude_max: 0.4,
            blur_sigma: (0.5, 2.0),
            gamma: (0.7, 1.5),
            ghost_count_max: 4,
            ghost_amplitude_max: 0.3,
            anisotropy_factors: (2, 4),
            elastic_magnitude_max: 3.0,
            elastic_smoothness: 4.0,
        }
    }
}

impl AugmentRanges {
    /// Draws one intensity perturbation (everything except elastic and bad T2).
    pub fn sample_intensity(&self, rng: &mut impl Rng, geometry: &GridGeometry) -> PerturbSpec {
        let seed = rng.gen();
        let kind = match rng.gen_range(0..5) {
            0 => PerturbKind::BiasField { amplitude: rng.gen_range(0.0..=self.bias_amplitude_max), order: 3 },
            1 => PerturbKind::Blur { sigma: rng.gen_range(self.blur_sigma.0..=self.blur_sigma.1) },
            2 => PerturbKind::Gamma { gamma: rng.gen_range(self.gamma.0..=self.gamma.1) },
            3 => PerturbKind::Ghosting {
                count: rng.gen_range(1..=self.ghost_count_max.max(1)),
                amplitude: rng.gen_range(0.0..=self.ghost_amplitude_max),
                axis: rng.gen_range(0..3),
            },
            _ => {
                let axis = rng.gen_range(0..3);
                let mut factor = if rng.gen_bool(0.5) { self.anisotropy_factors.0 } else { self.anisotropy_factors.1 };
                while factor > 2 && geometry.dims[axis] % factor != 0 {
                    factor /= 2;
                }
                PerturbKind::Anisotropy { axis, factor }
            }
        };
        PerturbSpec::new(kind, seed)
    }

    pub fn sample_elastic(&self, rng: &mut impl Rng) -> PerturbSpec {
        let seed = rng.gen();
        PerturbSpec::new(
            PerturbKind::Elastic {
                magnitude: rng.gen_range(0.0..=self.elastic_magnitude_max),
                smoothness: self.elastic_smoothness,
            },
            seed,
        )
    }
}

/// Applies a single-channel perturbation. Elastic perturbations warp the
/// intensities trilinearly; use [`apply_to_case`] to warp labels alongside.
pub fn apply_perturbation(grid: &VoxelGrid, spec: &PerturbSpec) -> Result<VoxelGrid> {
    spec.validate(&grid.geometry)?;
    let g = grid.geometry;
    let values = match spec.kind {
        PerturbKind::Anisotropy { axis, factor } => {
            let down = resample::block_average_axis(&grid.values, g.dims, axis, factor);
            let mut coarse = g.dims;
            coarse[axis] /= factor;
            resample::linear_upsample_axis(&down, coarse, axis, factor)
        }
        PerturbKind::BiasField { amplitude, order } => {
            if amplitude == 0.0 {
                return Ok(grid.clone());
            }
            let field = bias_field(&g, amplitude, order, spec.seed);
            grid.values.iter().zip(&field).map(|(&v, &b)| (v as f64 * b) as f32).collect()
        }
        PerturbKind::Blur { sigma } => gaussian_blur(&grid.values, g.dims, sigma),
        PerturbKind::Elastic { magnitude, smoothness } => {
            let field = smooth_field(g, magnitude, smoothness, spec.seed)?;
            let labels = LabelGrid::background(g);
            let t = AtlasTemplate::new(0, grid.clone(), labels)?;
            return Ok(warp(&t, &field)?.intensity);
        }
        PerturbKind::Gamma { gamma } => apply_gamma(&grid.values, gamma),
        PerturbKind::Ghosting { count, amplitude, axis } => ghost(&grid.values, g.dims, count, amplitude, axis),
        PerturbKind::BadT2 => {
            return Err(Error::InvalidParameter("bad_t2 needs both T1 and T2; use augment::bad_t2".into()))
        }
    };
    VoxelGrid::new(g, values)
}

/// Applies one perturbation to every channel of a case. Intensity kinds leave
/// labels untouched; elastic warps all channels and the labels with one field.
/// `BadT2` copies channel 0 into channel 1.
pub fn apply_to_case(channels: &[VoxelGrid], labels: &LabelGrid, spec: &PerturbSpec) -> Result<(Vec<VoxelGrid>, LabelGrid)> {
    if let Some(first) = channels.first() {
        spec.validate(&first.geometry)?;
    }
    match spec.kind {
        PerturbKind::Elastic { magnitude, smoothness } => {
            let field = smooth_field(labels.geometry, magnitude, smoothness, spec.seed)?;
            let mut out = Vec::with_capacity(channels.len());
            let mut warped_labels = labels.clone();
            for (i, c) in channels.iter().enumerate() {
                let t = AtlasTemplate::new(0, c.clone(), labels.clone())?;
                let w = warp(&t, &field)?;
                if i == 0 {
                    warped_labels = w.labels;
                }
                out.push(w.intensity);
            }
            if channels.is_empty() {
                let t = AtlasTemplate::new(0, VoxelGrid::filled(labels.geometry, 0.0), labels.clone())?;
                warped_labels = warp(&t, &field)?.labels;
            }
            Ok((out, warped_labels))
        }
        PerturbKind::BadT2 => {
            if channels.len() < 2 {
                return Err(Error::InvalidParameter("bad_t2 needs at least two channels".into()));
            }
            let mut out = channels.to_vec();
            out[1] = bad_t2(&channels[0], &channels[1])?;
            Ok((out, labels.clone()))
        }
        _ => {
            // each channel gets its own stream so channels are not perturbed identically
            let out = channels
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let s = PerturbSpec::new(spec.kind, spec.seed.wrapping_add(i as u64 * 0x9E37_79B9));
                    apply_perturbation(c, &s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((out, labels.clone()))
        }
    }
}

/// The T1 volume, to be fed where T2 is expected.
pub fn bad_t2(t1: &VoxelGrid, t2: &VoxelGrid) -> Result<VoxelGrid> {
    t1.geometry.ensure_same(&t2.geometry, "bad_t2")?;
    Ok(t1.clone())
}

/// Gaussian-smoothed standard-normal vectors, rescaled so the largest vector
/// norm equals `magnitude` voxels.
pub fn smooth_field(geometry: GridGeometry, magnitude: f64, smoothness: f64, seed: u64) -> Result<DisplacementField> {
    if !(smoothness > 0.0) {
        return Err(Error::InvalidParameter(format!("smoothness {smoothness} must be > 0")));
    }
    if magnitude == 0.0 {
        return Ok(DisplacementField::zeros(geometry));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = geometry.len();
    let comps: Vec<Vec<f32>> = (0..3)
        .map(|_| {
            let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            gaussian_blur(&noise, geometry.dims, smoothness)
        })
        .collect();
    let max_norm = (0..n)
        .map(|i| (0..3).map(|a| (comps[a][i] as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if max_norm == 0.0 {
        return Ok(DisplacementField::zeros(geometry));
    }
    let scale = magnitude / max_norm;
    let vectors = (0..n)
        .map(|i| std::array::from_fn(|a| (comps[a][i] as f64 * scale) as f32))
        .collect();
    DisplacementField::new(geometry, vectors)
}

/// Separable Gaussian blur with clamp-to-edge boundaries.
pub fn gaussian_blur(values: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f32> {
    if sigma < MIN_BLUR_SIGMA {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut buf: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0f64; buf.len()];
    for axis in 0..3 {
        let inner: usize = dims[..axis].iter().product();
        let n = dims[axis];
        let outer: usize = dims[axis + 1..].iter().product();
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let s = (k as isize + t as isize - radius).clamp(0, n as isize - 1) as usize;
                        acc += w * buf[i + inner * (s + n * o)];
                    }
                    tmp[i + inner * (k + n * o)] = acc;
                }
            }
        }
        std::mem::swap(&mut buf, &mut tmp);
    }
    buf.into_iter().map(|v| v as f32).collect()
}

fn bias_field(g: &GridGeometry, amplitude: f64, order: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::new();
    for i in 0..=order {
        for j in 0..=order - i {
            for k in 0..=order - i - j {
                terms.push((i as i32, j as i32, k as i32, rng.gen_range(-amplitude..=amplitude)));
            }
        }
    }
    let norm = |c: usize, n: usize| if n > 1 { 2.0 * c as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    (0..g.len())
        .map(|idx| {
            let [x, y, z] = g.coords(idx);
            let (u, v, w) = (norm(x, g.dims[0]), norm(y, g.dims[1]), norm(z, g.dims[2]));
            let p: f64 = terms.iter().map(|&(i, j, k, c)| c * u.powi(i) * v.powi(j) * w.powi(k)).sum();
            p.exp()
        })
        .collect()
}

fn apply_gamma(values: &[f32], gamma: f64) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let range = hi - lo;
    if !(range > 0.0) {
        return values.to_vec();
    }
    values
        .iter()
        .map(|&v| {
            let t = ((v as f64 - lo) / range).clamp(0.0, 1.0);
            (lo + t.powf(gamma) * range) as f32
        })
        .collect()
}

fn ghost(values: &[f32], dims: [usize; 3], count: usize, amplitude: f64, axis: usize) -> Vec<f32> {
    if count == 0 || amplitude == 0.0 {
        return values.to_vec();
    }
    let inner: usize = dims[..axis].iter().product();
    let n = dims[axis];
    let outer: usize = dims[axis + 1..].iter().product();
    let shifts: Vec<usize> = (1..=count).map(|j| (j * n / (count + 1)).max(1) % n).collect();
    let mut out = values.to_vec();
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                let mut acc = values[i + inner * (k + n * o)] as f64;
                for &s in &shifts {
                    acc += amplitude * values[i + inner * ((k + s) % n + n * o)] as f64;
                }
                out[i + inner * (k + n * o)] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_grid(dims: [usize; 3], seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GridGeometry::with_dims(dims);
        VoxelGrid::new(g, (0..g.len()).map(|_| rng.gen_range(0.0f32..3.0)).collect()).unwrap()
    }

    fn max_diff(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
        a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
    }

    #[test]
    fn degenerate_parameters_are_identities() {
        let g = random_grid([8, 6, 4], 1);
        let cases = [
            PerturbKind::Blur { sigma: 0.2 },
            PerturbKind::Gamma { gamma: 1.0 },
            PerturbKind::BiasField { amplitude: 0.0, order: 3 },
            PerturbKind::Ghosting { count: 2, amplitude: 0.0, axis: 1 },
            PerturbKind::Elastic { magnitude: 0.0, smoothness: 2.0 },
        ];
        for kind in cases {
            let out = apply_perturbation(&g, &PerturbSpec::new(kind, 9)).unwrap();
            assert!(max_diff(&out, &g) < 1e-6, "{kind:?}");
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let g = random_grid([8, 6, 4], 1);
        for kind in [
            PerturbKind::Blur { sigma: 0.0 },
            PerturbKind::Blur { sigma: -1.0 },
            PerturbKind::Gamma { gamma: 0.0 },
            PerturbKind::BadT2,
        ] {
            assert!(apply_perturbation(&g, &PerturbSpec::new(kind, 0)).is_err(), "{kind:?}");
        }
        let aniso = PerturbSpec::new(PerturbKind::Anisotropy { axis: 1, factor: 4 }, 0);
        assert!(matches!(apply_perturbation(&g, &aniso), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn perturbations_are_deterministic_and_keep_geometry() {
        let g = random_grid([8, 8, 8], 2);
        let kinds = [
            PerturbKind::Anisotropy { axis: 2, factor: 4 },
            PerturbKind::BiasField { amplitude: 0.3, order: 3 },
            PerturbKind::Blur { sigma: 1.0 },
            PerturbKind::Elastic { magnitude: 2.0, smoothness: 2.0 },
            PerturbKind::Gamma { gamma: 1.4 },
            PerturbKind::Ghosting { count: 3, amplitude: 0.2, axis: 0 },
        ];
        for kind in kinds {
            let spec = PerturbSpec::new(kind, 77);
            let a = apply_perturbation(&g, &spec).unwrap();
            let b = apply_perturbation(&g, &spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.geometry, g.geometry);
            assert!(max_diff(&a, &g) > 0.0, "{kind:?} changed nothing");
        }
    }

    #[test]
    fn anisotropy_of_constant_planes_is_exact() {
        // a grid that varies only along x survives averaging along z
        let g = VoxelGrid::from_fn(GridGeometry::with_dims([4, 4, 8]), |x, _, _| x as f32);
        let out = apply_perturbation(&g, &PerturbSpec::new(PerturbKind::Anisotropy { axis: 2, factor: 2 }, 0)).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn bad_t2_returns_t1() {
        let t1 = random_grid([4, 4, 4], 1);
        let t2 = random_grid([4, 4, 4], 2);
        assert_eq!(bad_t2(&t1, &t2).unwrap(), t1);
        let labels = LabelGrid::background(t1.geometry);
        let (chs, _) = apply_to_case(&[t1.clone(), t2], &labels, &PerturbSpec::new(PerturbKind::BadT2, 0)).unwrap();
        assert_eq!(chs[0], chs[1]);
        let other = random_grid([4, 4, 2], 3);
        assert!(bad_t2(&t1, &other).is_err());
    }

    #[test]
    fn smooth_field_scaling_and_determinism() {
        let g = GridGeometry::cube(10);
        let f = smooth_field(g, 2.5, 2.0, 5).unwrap();
        assert!((f.max_norm() - 2.5).abs() < 1e-6);
        assert_eq!(f, smooth_field(g, 2.5, 2.0, 5).unwrap());
        assert_ne!(f, smooth_field(g, 2.5, 2.0, 6).unwrap());
        let zero = smooth_field(g, 0.0, 2.0, 5).unwrap();
        assert_eq!(zero, DisplacementField::zeros(g));
    }

    #[test]
    fn elastic_warps_labels_with_the_same_field() {
        let geom = GridGeometry::cube(8);
        let img = VoxelGrid::from_fn(geom, |x, _, _| x as f32);
        let labels = LabelGrid::new(geom, (0..geom.len()).map(|i| (geom.coords(i)[0] as u8 % 3) + 1).collect()).unwrap();
        let spec = PerturbSpec::new(PerturbKind::Elastic { magnitude: 2.0, smoothness: 2.0 }, 3);
        let (chs, warped) = apply_to_case(std::slice::from_ref(&img), &labels, &spec).unwrap();
        let field = smooth_field(geom, 2.0, 2.0, 3).unwrap();
        let t = AtlasTemplate::new(0, img, labels).unwrap();
        let expected = warp(&t, &field).unwrap();
        assert_eq!(chs[0], expected.intensity);
        assert_eq!(warped, expected.labels);
    }

    #[test]
    fn intensity_kinds_leave_labels_alone() {
        let geom = GridGeometry::cube(8);
        let img = random_grid([8, 8, 8], 4);
        let labels = LabelGrid::new(geom, (0..geom.len()).map(|i| (i % 27) as u8).collect()).unwrap();
        let spec = PerturbSpec::new(PerturbKind::Gamma { gamma: 0.8 }, 3);
        let (_, l) = apply_to_case(&[img], &labels, &spec).unwrap();
        assert_eq!(l, labels);
    }

    #[test]
    fn sampled_specs_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let geom = GridGeometry::cube(8);
        let ranges = AugmentRanges::default();
        for _ in 0..50 {
            ranges.sample_intensity(&mut rng, &geom).validate(&geom).unwrap();
            ranges.sample_elastic(&mut rng).validate(&geom).unwrap();
        }
    }

    #[test]
    fn spec_serializes_with_a_kind_tag() {
        let spec = PerturbSpec::new(PerturbKind::Gamma { gamma: 1.2 }, 4);
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"gamma\""));
        assert_eq!(serde_json::from_str::<PerturbSpec>(&text).unwrap(), spec);
    }
}
