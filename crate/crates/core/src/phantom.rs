//! Procedural cerebellum-like phantoms with exact ground truth.
//!
//! A phantom is an ellipsoid split at the mid-sagittal plane into two
//! hemispheres. Each hemisphere is cut into twelve angular sectors in the
//! sagittal plane (the lobules) around a white-matter core with one ray per
//! sector. Every case lives in its own canonical frame; the pose (translation,
//! rotation, scale) maps that frame to voxels, which also gives exact
//! correspondence fields between cases.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_perturbation, PerturbKind, PerturbSpec};
use crate::error::{Error, Result};
use crate::fusion::DisplacementField;
use crate::par;
use crate::volgrid::{
    flip_x, mirror_lr, GridGeometry, Hemisphere, LabelGrid, LabelTaxonomy, LobuleClass, VoxelGrid, BACKGROUND,
};

pub const SECTORS_PER_HEMISPHERE: usize = 12;

/// Relative angular extent of each lobule sector, in `LobuleClass::LOBULES`
/// order. Lobules I-II is the smallest.
pub const SECTOR_WEIGHTS: [f64; SECTORS_PER_HEMISPHERE] = [0.45, 0.8, 0.9, 1.0, 1.1, 1.3, 1.2, 0.9, 0.9, 0.9, 0.9, 0.75];

/// Mean (T1, T2) intensity per tissue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastTable {
    /// Outside the intracranial mask.
    pub outside: [f32; 2],
    /// Inside the intracranial mask but not cerebellum.
    pub background: [f32; 2],
    /// Indexed like `LobuleClass::ALL`.
    pub classes: [[f32; 2]; 13],
}

impl Default for ContrastTable {
    /// Grey-matter levels cycle with period 3 in T1, so neighbouring lobules
    /// differ; T2 grey matter is uniform and separates tissue types only. White
    /// matter is brightest in T1 and darkest in T2.
    fn default() -> Self {
        let t1 = [0.50f32, 0.58, 0.66];
        let mut classes = [[0f32; 2]; 13];
        for (k, c) in classes.iter_mut().take(SECTORS_PER_HEMISPHERE).enumerate() {
            *c = [t1[k % 3], 0.74];
        }
        classes[LobuleClass::WM as usize] = [0.95, 0.35];
        Self { outside: [0.0, 0.05], background: [0.18, 1.0], classes }
    }
}

impl ContrastTable {
    pub fn class_mean(&self, class: LobuleClass) -> [f32; 2] {
        self.classes[class as usize]
    }

    /// Means of the tissue carrying `label`, given ICV membership.
    pub fn label_mean(&self, taxonomy: &LabelTaxonomy, label: u8, inside_icv: bool) -> [f32; 2] {
        match taxonomy.entry(label) {
            Some(e) => self.class_mean(e.class),
            None if inside_icv => self.background,
            None => self.outside,
        }
    }

    fn validate(&self) -> Result<()> {
        let distinct = |a: [f32; 2], b: [f32; 2]| a[0] != b[0] || a[1] != b[1];
        let lobules = &self.classes[..SECTORS_PER_HEMISPHERE];
        let wm = self.classes[LobuleClass::WM as usize];
        for k in 0..SECTORS_PER_HEMISPHERE {
            let next = lobules[(k + 1) % SECTORS_PER_HEMISPHERE];
            if !distinct(lobules[k], next) || !distinct(lobules[k], wm) || !distinct(lobules[k], self.background) {
                return Err(Error::InvalidParameter(format!("contrast of lobule sector {k} is not distinct from a neighbour")));
            }
        }
        if !distinct(wm, self.background) || !distinct(self.background, self.outside) {
            return Err(Error::InvalidParameter("white matter, background and outside need distinct contrast".into()));
        }
        if self.classes.iter().flatten().chain(&self.background).chain(&self.outside).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("contrast table has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub seed: u64,
    pub noise_std: f64,
    /// Amplitude of the smooth multiplicative intensity field (0 disables it).
    pub bias_amplitude: f64,
    pub contrast: ContrastTable,
    /// Maximum absolute translation per axis, voxels.
    pub translation_max: f64,
    /// Maximum absolute rotation per axis, degrees.
    pub rotation_max_deg: f64,
    /// Maximum relative deviation of the global scale from 1.
    pub scale_max: f64,
    /// Scales the per-case and per-hemisphere shape variation (0 makes every
    /// case and both hemispheres identical).
    pub variability: f64,
    /// Half-width of the background gap between hemispheres, voxels.
    pub fissure_half_width: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [48; 3],
            spacing_mm: [1.0; 3],
            seed: 0,
            noise_std: 0.03,
            bias_amplitude: 0.05,
            contrast: ContrastTable::default(),
            translation_max: 1.0,
            rotation_max_deg: 2.5,
            scale_max: 0.04,
            variability: 1.0,
            fissure_half_width: 0.6,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Noise-free, bias-free, pose-free and perfectly symmetric.
    pub fn ideal(dims: usize) -> Self {
        Self {
            dims: [dims; 3],
            noise_std: 0.0,
            bias_amplitude: 0.0,
            translation_max: 0.0,
            rotation_max_deg: 0.0,
            scale_max: 0.0,
            variability: 0.0,
            ..Self::default()
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry { dims: self.dims, spacing_mm: self.spacing_mm, origin_mm: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0 || d % 8 != 0) {
            return Err(Error::NotDivisible { dims: self.dims, factor: 8 });
        }
        self.geometry().validate()?;
        let nonneg = [
            ("noise_std", self.noise_std),
            ("bias_amplitude", self.bias_amplitude),
            ("translation_max", self.translation_max),
            ("rotation_max_deg", self.rotation_max_deg),
            ("scale_max", self.scale_max),
            ("variability", self.variability),
            ("fissure_half_width", self.fissure_half_width),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.scale_max >= 0.5 || self.variability > 2.0 {
            return Err(Error::InvalidParameter("scale_max must be < 0.5 and variability <= 2".into()));
        }
        self.contrast.validate()
    }
}

/// Shape of one hemisphere in canonical coordinates.
#[derive(Clone, Debug, PartialEq)]
struct HemisphereShape {
    /// Cumulative sector boundaries in `[0, 2π]`, 13 entries.
    boundaries: [f64; SECTORS_PER_HEMISPHERE + 1],
    /// Angle of the first boundary.
    phase: f64,
    /// Angular shift per unit lateral distance from the hemisphere centre.
    twist: f64,
    core_scale: f64,
}

impl HemisphereShape {
    fn draw(rng: &mut ChaCha8Rng, variability: f64) -> Self {
        let mut u = |a: f64| if variability > 0.0 { rng.gen_range(-a..=a) * variability } else { 0.0 };
        let weights: Vec<f64> = SECTOR_WEIGHTS.iter().map(|w| w * (1.0 + u(0.12))).collect();
        let total: f64 = weights.iter().sum();
        let mut boundaries = [0f64; SECTORS_PER_HEMISPHERE + 1];
        for k in 0..SECTORS_PER_HEMISPHERE {
            boundaries[k + 1] = boundaries[k] + TAU * weights[k] / total;
        }
        boundaries[SECTORS_PER_HEMISPHERE] = TAU;
        Self { boundaries, phase: 0.35 + u(0.12), twist: u(0.4), core_scale: 1.0 + u(0.08) }
    }

    fn mid_angle(&self, k: usize) -> f64 {
        0.5 * (self.boundaries[k] + self.boundaries[k + 1])
    }

    fn sector(&self, local_angle: f64) -> usize {
        let a = local_angle.rem_euclid(TAU);
        self.boundaries[1..].iter().position(|&b| a < b).unwrap_or(SECTORS_PER_HEMISPHERE - 1)
    }
}

/// Maps between voxel indices and a case's canonical frame, where the
/// cerebellum is the unit ball and `x < 0` is the left hemisphere.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseFrame {
    pub dims: [usize; 3],
    /// Ellipsoid semi-axes in voxels, pose scale included.
    pub radii: [f64; 3],
    pub translation: [f64; 3],
    pub rotation: Matrix3<f64>,
    pub mirrored: bool,
}

impl CaseFrame {
    fn centre(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0 + self.translation[a])
    }

    fn mirror_x(&self, x: f64) -> f64 {
        if self.mirrored {
            self.dims[0] as f64 - 1.0 - x
        } else {
            x
        }
    }

    pub fn to_canonical(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.centre();
        let p = [self.mirror_x(p[0]), p[1], p[2]];
        let d = Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        let r = self.rotation.transpose() * d;
        let mut q = [r.x / self.radii[0], r.y / self.radii[1], r.z / self.radii[2]];
        if self.mirrored {
            q[0] = -q[0];
        }
        q
    }

    pub fn from_canonical(&self, q: [f64; 3]) -> [f64; 3] {
        let c = self.centre();
        let qx = if self.mirrored { -q[0] } else { q[0] };
        let v = self.rotation * Vector3::new(qx * self.radii[0], q[1] * self.radii[1], q[2] * self.radii[2]);
        [self.mirror_x(c[0] + v.x), c[1] + v.y, c[2] + v.z]
    }

    /// Same case seen through `mirror_lr`.
    pub fn mirrored(&self) -> Self {
        Self { mirrored: !self.mirrored, ..self.clone() }
    }
}

/// Field on the target grid that carries `template` onto `target`: sampling the
/// template at `p + u(p)` reads the canonical point the target has at `p`.
pub fn correspondence_field(target: &CaseFrame, template: &CaseFrame, geometry: GridGeometry) -> Result<DisplacementField> {
    let mut vectors = vec![[0f32; 3]; geometry.len()];
    par::fill_indexed(&mut vectors, |i| {
        let c = geometry.coords(i);
        let p = [c[0] as f64, c[1] as f64, c[2] as f64];
        let t = template.from_canonical(target.to_canonical(p));
        [(t[0] - p[0]) as f32, (t[1] - p[1]) as f32, (t[2] - p[2]) as f32]
    });
    DisplacementField::new(geometry, vectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub t1: VoxelGrid,
    pub t2: VoxelGrid,
    pub labels: LabelGrid,
    /// 1 inside the intracranial mask, 0 outside.
    pub icv_mask: LabelGrid,
    pub frame: CaseFrame,
}

struct CaseDraw {
    frame: CaseFrame,
    left: HemisphereShape,
    right: HemisphereShape,
    noise_seed: u64,
    bias_seed: u64,
}

fn draw_case(spec: &PhantomSpec) -> CaseDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let v = spec.variability;
    let base = [0.40, 0.34, 0.30];
    let shape: [f64; 3] = std::array::from_fn(|a| base[a] * spec.dims[a] as f64 * (1.0 + u(0.04 * v)));
    let scale = 1.0 + u(spec.scale_max);
    let translation = [u(spec.translation_max), u(spec.translation_max), u(spec.translation_max)];
    let rot = spec.rotation_max_deg.to_radians();
    let rotation = *Rotation3::from_euler_angles(u(rot), u(rot), u(rot)).matrix();
    let frame = CaseFrame {
        dims: spec.dims,
        radii: shape.map(|r| r * scale),
        translation,
        rotation,
        mirrored: false,
    };
    let mut shape_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let left = HemisphereShape::draw(&mut shape_rng, v);
    let right = if v > 0.0 { HemisphereShape::draw(&mut shape_rng, v) } else { left.clone() };
    CaseDraw { frame, left, right, noise_seed: rng.gen(), bias_seed: rng.gen() }
}

/// Pose of the case `spec` generates, without voxelizing it.
pub fn case_frame(spec: &PhantomSpec) -> Result<CaseFrame> {
    spec.validate()?;
    Ok(draw_case(spec).frame)
}

const CORE_LATERAL: f64 = 0.32;
const CORE_RADIAL: f64 = 0.28;
const RAY_REACH: f64 = 0.8;
const RAY_LATERAL: f64 = 0.3;
const RAY_HALF_WIDTH_VOX: f64 = 1.3;
const ICV_SCALE: f64 = 1.3;

fn classify(draw: &CaseDraw, spec: &PhantomSpec, taxonomy: &LabelTaxonomy, p: [f64; 3]) -> (u8, bool) {
    let f = &draw.frame;
    let q = f.to_canonical(p);
    let r2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
    let inside_icv = r2 < ICV_SCALE * ICV_SCALE;
    if r2 >= 1.0 {
        return (BACKGROUND, inside_icv);
    }
    if q[0].abs() * f.radii[0] < spec.fissure_half_width {
        return (BACKGROUND, true);
    }
    let (hemisphere, shape) = if q[0] < 0.0 { (Hemisphere::Left, &draw.left) } else { (Hemisphere::Right, &draw.right) };
    let s = q[0].abs();
    let rho = (q[1] * q[1] + q[2] * q[2]).sqrt();
    let theta = q[2].atan2(q[1]);
    let local = theta - shape.phase - shape.twist * (s - 0.5);

    let core = ((s - 0.5) / (CORE_LATERAL * shape.core_scale)).powi(2) + (rho / (CORE_RADIAL * shape.core_scale)).powi(2) < 1.0;
    let ray_half = RAY_HALF_WIDTH_VOX / f.radii[1].min(f.radii[2]);
    let on_ray = (s - 0.5).abs() < RAY_LATERAL
        && rho < RAY_REACH * (1.0 - s * s).sqrt()
        && (0..SECTORS_PER_HEMISPHERE).any(|k| {
            let delta = local - shape.mid_angle(k);
            delta.cos() > 0.0 && rho * delta.sin().abs() < ray_half
        });
    let class = if core || on_ray { LobuleClass::WM } else { LobuleClass::LOBULES[shape.sector(local)] };
    (taxonomy.lookup(hemisphere, class), true)
}

/// Keeps the largest 6-connected white-matter component of each hemisphere and
/// returns stray white-matter voxels to the lobule they sit in.
fn connect_white_matter(labels: &mut [u8], geometry: &GridGeometry, draw: &CaseDraw, taxonomy: &LabelTaxonomy) {
    for hemisphere in [Hemisphere::Left, Hemisphere::Right] {
        let wm = taxonomy.lookup(hemisphere, LobuleClass::WM);
        let mut component = vec![u32::MAX; labels.len()];
        let mut sizes = Vec::new();
        for start in 0..labels.len() {
            if labels[start] != wm || component[start] != u32::MAX {
                continue;
            }
            let id = sizes.len() as u32;
            let mut stack = vec![start];
            component[start] = id;
            let mut size = 0usize;
            while let Some(i) = stack.pop() {
                size += 1;
                let c = geometry.coords(i);
                for a in 0..3 {
                    for step in [-1isize, 1] {
                        let n = c[a] as isize + step;
                        if n < 0 || n >= geometry.dims[a] as isize {
                            continue;
                        }
                        let mut nc = c;
                        nc[a] = n as usize;
                        let j = geometry.index(nc[0], nc[1], nc[2]);
                        if labels[j] == wm && component[j] == u32::MAX {
                            component[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
            sizes.push(size);
        }
        let Some(keep) = sizes.iter().enumerate().max_by_key(|&(i, s)| (*s, std::cmp::Reverse(i))).map(|(i, _)| i as u32)
        else {
            continue;
        };
        let shape = if hemisphere == Hemisphere::Left { &draw.left } else { &draw.right };
        for i in 0..labels.len() {
            if labels[i] == wm && component[i] != keep {
                let c = geometry.coords(i);
                let q = draw.frame.to_canonical([c[0] as f64, c[1] as f64, c[2] as f64]);
                let local = q[2].atan2(q[1]) - shape.phase - shape.twist * (q[0].abs() - 0.5);
                labels[i] = taxonomy.lookup(hemisphere, LobuleClass::LOBULES[shape.sector(local)]);
            }
        }
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let taxonomy = LabelTaxonomy::cerebellum();
    let geometry = spec.geometry();
    let draw = draw_case(spec);

    let mut cells = vec![(BACKGROUND, false); geometry.len()];
    par::fill_indexed(&mut cells, |i| {
        let c = geometry.coords(i);
        classify(&draw, spec, &taxonomy, [c[0] as f64, c[1] as f64, c[2] as f64])
    });
    let mut labels: Vec<u8> = cells.iter().map(|c| c.0).collect();
    connect_white_matter(&mut labels, &geometry, &draw, &taxonomy);
    let icv: Vec<u8> = cells.iter().zip(&labels).map(|(c, &l)| u8::from(c.1 || l != BACKGROUND)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
    let noise = if spec.noise_std > 0.0 { Some(Normal::new(0.0, spec.noise_std).expect("validated std")) } else { None };
    let mut channels = [vec![0f32; geometry.len()], vec![0f32; geometry.len()]];
    for (m, channel) in channels.iter_mut().enumerate() {
        for (i, v) in channel.iter_mut().enumerate() {
            let mean = spec.contrast.label_mean(&taxonomy, labels[i], icv[i] == 1)[m];
            *v = match &noise {
                Some(n) => (mean as f64 + n.sample(&mut rng)) as f32,
                None => mean,
            };
        }
    }
    let [t1, t2] = channels.map(|c| VoxelGrid::new(geometry, c));
    let (mut t1, mut t2) = (t1?, t2?);
    if spec.bias_amplitude > 0.0 {
        let bias = |seed: u64| PerturbSpec::new(PerturbKind::BiasField { amplitude: spec.bias_amplitude, order: 2 }, seed);
        t1 = apply_perturbation(&t1, &bias(draw.bias_seed))?;
        t2 = apply_perturbation(&t2, &bias(draw.bias_seed ^ 0x5555_5555))?;
    }
    Ok(Phantom {
        t1,
        t2,
        labels: LabelGrid::new(geometry, labels)?,
        icv_mask: LabelGrid::new(geometry, icv)?,
        frame: draw.frame,
    })
}

impl Phantom {
    /// Left-right mirror with hemisphere labels swapped.
    pub fn mirror(&self, taxonomy: &LabelTaxonomy) -> Result<Self> {
        let (t1, labels) = mirror_lr(&self.t1, &self.labels, taxonomy)?;
        let mut icv_mask = self.icv_mask.clone();
        for row in icv_mask.labels.chunks_mut(icv_mask.geometry.dims[0]) {
            row.reverse();
        }
        Ok(Self { t1, t2: flip_x(&self.t2), labels, icv_mask, frame: self.frame.mirrored() })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub name: String,
    pub seed: u64,
    pub mirrored: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibrarySplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl LibrarySplit {
    /// 80/10/10 with rounding, validation and test taken from the end.
    pub fn proportional(total: usize) -> Result<Self> {
        let tenth = (total as f64 * 0.1).round() as usize;
        let (val, test) = (tenth.max(1), tenth.max(1));
        if total < val + test + 1 {
            return Err(Error::TooFewSamples { needed: val + test + 1, got: total });
        }
        let train = total - val - test;
        Ok(Self { train: (0..train).collect(), val: (train..train + val).collect(), test: (train + val..total).collect() })
    }
}

pub const MIN_LIBRARY_CASES: usize = 6;

pub struct PhantomLibrary {
    pub records: Vec<CaseRecord>,
    pub cases: Vec<Phantom>,
    pub split: LibrarySplit,
}

impl PhantomLibrary {
    /// Index of the mirrored twin of case `i`.
    pub fn twin(&self, i: usize) -> usize {
        i ^ 1
    }

    /// Template candidates for fusing case `target`: the training cases other
    /// than the target and its mirrored twin.
    pub fn atlas_candidates(&self, target: usize) -> Vec<usize> {
        self.split.train.iter().copied().filter(|&i| i != target && i != self.twin(target)).collect()
    }
}

/// Seeds `base_seed + i` for subject `i`; each subject is followed by its mirror.
pub fn library_records(n_cases: usize, base_seed: u64) -> Vec<CaseRecord> {
    (0..n_cases)
        .flat_map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            [
                CaseRecord { name: format!("case{i:03}"), seed, mirrored: false },
                CaseRecord { name: format!("case{i:03}m"), seed, mirrored: true },
            ]
        })
        .collect()
}

pub fn make_library(n_cases: usize, base_seed: u64, template: &PhantomSpec) -> Result<PhantomLibrary> {
    if n_cases < MIN_LIBRARY_CASES {
        return Err(Error::TooFewSamples { needed: MIN_LIBRARY_CASES, got: n_cases });
    }
    template.validate()?;
    let taxonomy = LabelTaxonomy::cerebellum();
    let records = library_records(n_cases, base_seed);
    let subjects = par::map_indices(n_cases, |i| generate(&template.with_seed(records[2 * i].seed)));
    let mut cases = Vec::with_capacity(2 * n_cases);
    for s in subjects {
        let s = s?;
        let m = s.mirror(&taxonomy)?;
        cases.push(s);
        cases.push(m);
    }
    let split = LibrarySplit::proportional(cases.len())?;
    Ok(PhantomLibrary { records, cases, split })
}

/// Regenerates one library case from its record.
pub fn regenerate(record: &CaseRecord, template: &PhantomSpec) -> Result<Phantom> {
    let p = generate(&template.with_seed(record.seed))?;
    if record.mirrored {
        p.mirror(&LabelTaxonomy::cerebellum())
    } else {
        Ok(p)
    }
}

/// Frame of a library case without generating its volumes.
pub fn record_frame(record: &CaseRecord, template: &PhantomSpec) -> Result<CaseFrame> {
    let f = case_frame(&template.with_seed(record.seed))?;
    Ok(if record.mirrored { f.mirrored() } else { f })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::LABEL_COUNT;

    fn small() -> PhantomSpec {
        PhantomSpec { dims: [32; 3], ..PhantomSpec::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small().with_seed(3)).unwrap();
        let b = generate(&small().with_seed(3)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small().with_seed(4)).unwrap();
        assert_ne!(a.t1, c.t1);
    }

    #[test]
    fn dims_must_be_multiples_of_eight() {
        let spec = PhantomSpec { dims: [48, 44, 48], ..PhantomSpec::default() };
        assert!(matches!(generate(&spec), Err(Error::NotDivisible { factor: 8, .. })));
    }

    #[test]
    fn noiseless_intensities_equal_class_means() {
        let spec = PhantomSpec { noise_std: 0.0, bias_amplitude: 0.0, ..small() }.with_seed(11);
        let p = generate(&spec).unwrap();
        let tax = LabelTaxonomy::cerebellum();
        for i in 0..p.labels.len() {
            let m = spec.contrast.label_mean(&tax, p.labels.labels[i], p.icv_mask.labels[i] == 1);
            assert_eq!(p.t1.values[i], m[0]);
            assert_eq!(p.t2.values[i], m[1]);
        }
    }

    #[test]
    fn every_label_present_at_default_dims() {
        for seed in 0..3 {
            let p = generate(&PhantomSpec::default().with_seed(seed)).unwrap();
            let h = p.labels.histogram();
            for (l, &count) in h.iter().enumerate().skip(1) {
                assert!(count >= 20, "seed {seed}: label {l} has {count} voxels");
            }
            // lobules I-II is the smallest grey-matter structure
            let tax = LabelTaxonomy::cerebellum();
            for hemi in [Hemisphere::Left, Hemisphere::Right] {
                let i_ii = h[tax.lookup(hemi, LobuleClass::I_II) as usize];
                for c in &LobuleClass::LOBULES[1..] {
                    assert!(i_ii < h[tax.lookup(hemi, *c) as usize]);
                }
            }
        }
    }

    #[test]
    fn icv_contains_the_cerebellum() {
        let p = generate(&small().with_seed(1)).unwrap();
        assert!(p.labels.labels.iter().zip(&p.icv_mask.labels).all(|(&l, &m)| l == 0 || m == 1));
        assert!(p.icv_mask.labels.iter().all(|&m| m <= 1));
    }

    #[test]
    fn noisy_class_means_are_recovered() {
        let spec = PhantomSpec { bias_amplitude: 0.0, ..small() }.with_seed(2);
        let p = generate(&spec).unwrap();
        let tax = LabelTaxonomy::cerebellum();
        let mut sums = [[0f64; 2]; LABEL_COUNT];
        let mut counts = [0usize; LABEL_COUNT];
        for i in 0..p.labels.len() {
            let l = p.labels.labels[i] as usize;
            if l == 0 {
                continue;
            }
            sums[l][0] += p.t1.values[i] as f64;
            sums[l][1] += p.t2.values[i] as f64;
            counts[l] += 1;
        }
        for l in 1..LABEL_COUNT {
            if counts[l] == 0 {
                continue;
            }
            let m = spec.contrast.label_mean(&tax, l as u8, true);
            for c in 0..2 {
                let got = sums[l][c] / counts[l] as f64;
                assert!((got - m[c] as f64).abs() < 3.0 * spec.noise_std, "label {l} channel {c}");
            }
        }
    }

    #[test]
    fn hemispheres_stay_on_their_side() {
        let tax = LabelTaxonomy::cerebellum();
        for seed in 0..4 {
            let p = generate(&small().with_seed(seed)).unwrap();
            let mid = (p.labels.geometry.dims[0] as f64 - 1.0) / 2.0;
            for i in 0..p.labels.len() {
                let Some(e) = tax.entry(p.labels.labels[i]) else { continue };
                let x = p.labels.geometry.coords(i)[0] as f64;
                match e.hemisphere {
                    Hemisphere::Left => assert!(x <= mid + 2.0),
                    Hemisphere::Right => assert!(x >= mid - 2.0),
                }
            }
        }
    }

    #[test]
    fn ideal_phantom_is_mirror_symmetric() {
        let tax = LabelTaxonomy::cerebellum();
        let p = generate(&PhantomSpec::ideal(32)).unwrap();
        let m = p.mirror(&tax).unwrap();
        assert_eq!(m.labels, p.labels);
        assert_eq!(m.t1, p.t1);
    }

    #[test]
    fn canonical_frame_round_trips() {
        for mirrored in [false, true] {
            let mut f = case_frame(&small().with_seed(9)).unwrap();
            f.mirrored = mirrored;
            let p = [3.0, 17.5, 20.25];
            let back = f.from_canonical(f.to_canonical(p));
            for a in 0..3 {
                assert!((back[a] - p[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mirrored_frame_matches_mirrored_labels() {
        let tax = LabelTaxonomy::cerebellum();
        let spec = small().with_seed(5);
        let p = generate(&spec).unwrap();
        let m = p.mirror(&tax).unwrap();
        // left labels of the mirrored case lie at negative canonical x
        let mut agree = 0usize;
        let mut total = 0usize;
        for i in 0..m.labels.len() {
            let Some(e) = tax.entry(m.labels.labels[i]) else { continue };
            let c = m.labels.geometry.coords(i);
            let q = m.frame.to_canonical([c[0] as f64, c[1] as f64, c[2] as f64]);
            total += 1;
            agree += usize::from((q[0] < 0.0) == (e.hemisphere == Hemisphere::Left));
        }
        assert_eq!(agree, total);
    }

    #[test]
    fn split_proportions() {
        let s = LibrarySplit::proportional(20).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16, 2, 2));
        assert_eq!(s.test, vec![18, 19]);
        assert!(LibrarySplit::proportional(2).is_err());
    }

    #[test]
    fn library_is_doubled_and_validated() {
        assert!(matches!(make_library(5, 0, &small()), Err(Error::TooFewSamples { .. })));
        let spec = PhantomSpec { dims: [16; 3], ..PhantomSpec::default() };
        let lib = make_library(6, 100, &spec).unwrap();
        assert_eq!(lib.cases.len(), 12);
        assert_eq!(lib.records[3], CaseRecord { name: "case001m".into(), seed: 101, mirrored: true });
        let tax = LabelTaxonomy::cerebellum();
        let h0 = lib.cases[0].labels.histogram();
        let h1 = lib.cases[1].labels.histogram();
        for l in 0..LABEL_COUNT as u8 {
            assert_eq!(h1[tax.mirror(l) as usize], h0[l as usize]);
        }
        let reg = regenerate(&lib.records[3], &spec).unwrap();
        assert_eq!(reg, lib.cases[3]);
        assert_eq!(record_frame(&lib.records[3], &spec).unwrap(), lib.cases[3].frame);
        assert!(!lib.atlas_candidates(0).contains(&1));
    }

    #[test]
    fn correspondence_aligns_other_cases() {
        use crate::fusion::{warp, AtlasTemplate};
        let spec = PhantomSpec { noise_std: 0.0, bias_amplitude: 0.0, ..small() };
        let a = generate(&spec.with_seed(1)).unwrap();
        let b = generate(&spec.with_seed(2)).unwrap().mirror(&LabelTaxonomy::cerebellum()).unwrap();
        let field = correspondence_field(&a.frame, &b.frame, a.labels.geometry).unwrap();
        let t = AtlasTemplate::new(0, b.t1.clone(), b.labels.clone()).unwrap();
        let warped = warp(&t, &field).unwrap();
        let aligned = crate::evalstats::aggregate_dice(&warped.labels, &a.labels, &LabelTaxonomy::cerebellum())
            .unwrap()
            .whole_cerebellum;
        let raw = crate::evalstats::aggregate_dice(&b.labels, &a.labels, &LabelTaxonomy::cerebellum())
            .unwrap()
            .whole_cerebellum;
        assert!(aligned > 0.9, "aligned whole-cerebellum dice {aligned}");
        assert!(aligned >= raw);
    }
}
