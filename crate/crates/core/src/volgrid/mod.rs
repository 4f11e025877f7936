//! Volumetric data model: scalar and label grids sharing one geometry type.
//!
//! Storage is x-fastest: the value for voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.

mod io;
mod taxonomy;

pub use io::{read_label_grid, read_volume, read_voxel_grid, write_volume, Volume, DTYPE_F32, DTYPE_U8, MAGIC, VERSION};
pub use taxonomy::{
    Hemisphere, LabelTaxonomy, LobuleClass, TaxonomyEntry, BACKGROUND, FOREGROUND_LABELS, LABEL_COUNT, STAGE1_CLASSES,
    STAGE2_CLASSES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub origin_mm: [f32; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing_mm: [f32; 3], origin_mm: [f32; 3]) -> Result<Self> {
        let g = Self { dims, spacing_mm, origin_mm };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn cube(n: usize) -> Self {
        Self { dims: [n; 3], spacing_mm: [1.0; 3], origin_mm: [0.0; 3] }
    }

    pub fn with_dims(dims: [usize; 3]) -> Self {
        Self { dims, spacing_mm: [1.0; 3], origin_mm: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-positive spacing {:?}", self.spacing_mm)));
        }
        if self.origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-finite origin {:?}", self.origin_mm)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of one voxel in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().map(|&s| s as f64).product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let r = i / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    pub fn same_grid(&self, other: &GridGeometry) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_same(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self.dims != other.dims || self.spacing_mm != other.spacing_mm || self.origin_mm != other.origin_mm {
            return Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing_mm, other.dims, other.spacing_mm
            )));
        }
        Ok(())
    }

    /// Geometry after block-averaging by `factor`; voxel centres of the coarse
    /// grid sit at the centres of the fine blocks.
    pub fn coarsened(&self, factor: usize) -> GridGeometry {
        let f = factor as f32;
        let mut g = *self;
        for a in 0..3 {
            g.dims[a] /= factor;
            g.origin_mm[a] = self.origin_mm[a] + 0.5 * (f - 1.0) * self.spacing_mm[a];
            g.spacing_mm[a] = self.spacing_mm[a] * f;
        }
        g
    }

    /// Inverse of [`GridGeometry::coarsened`].
    pub fn refined(&self, factor: usize) -> GridGeometry {
        let f = factor as f32;
        let mut g = *self;
        for a in 0..3 {
            g.dims[a] *= factor;
            g.spacing_mm[a] = self.spacing_mm[a] / f;
            g.origin_mm[a] = self.origin_mm[a] - 0.5 * (f - 1.0) * g.spacing_mm[a];
        }
        g
    }
}

/// Access shared by scalar and label grids.
pub trait Grid: Sized {
    type Elem: Copy + Send + Sync + PartialEq + std::fmt::Debug;

    fn geometry(&self) -> &GridGeometry;
    fn data(&self) -> &[Self::Elem];
    fn from_parts(geometry: GridGeometry, data: Vec<Self::Elem>) -> Result<Self>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub geometry: GridGeometry,
    pub values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(geometry: GridGeometry, values: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "{} values for dims {:?}",
                values.len(),
                geometry.dims
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { geometry, values })
    }

    pub fn filled(geometry: GridGeometry, value: f32) -> Self {
        Self { values: vec![value; geometry.len()], geometry }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(usize, usize, usize) -> f32 + Sync + Send) -> Self {
        let mut values = vec![0.0; geometry.len()];
        crate::par::fill_indexed(&mut values, |i| {
            let [x, y, z] = geometry.coords(i);
            f(x, y, z)
        });
        Self { geometry, values }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.geometry.index(x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Trilinear interpolation at a continuous voxel coordinate, clamped to the
    /// grid edge.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        trilinear_sample(self, p)
    }
}

impl Grid for VoxelGrid {
    type Elem = f32;

    fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    fn data(&self) -> &[f32] {
        &self.values
    }

    fn from_parts(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        VoxelGrid::new(geometry, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub geometry: GridGeometry,
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(geometry: GridGeometry, labels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "{} labels for dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > FOREGROUND_LABELS) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { geometry, labels })
    }

    pub fn background(geometry: GridGeometry) -> Self {
        Self { labels: vec![BACKGROUND; geometry.len()], geometry }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.geometry.index(x, y, z)]
    }

    /// Voxel counts per label id (index = id).
    pub fn histogram(&self) -> [usize; LABEL_COUNT] {
        let mut h = [0usize; LABEL_COUNT];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Nearest-neighbour lookup at a continuous voxel coordinate, clamped.
    pub fn sample_nearest(&self, p: [f64; 3]) -> u8 {
        let d = self.geometry.dims;
        let idx = |a: usize| (p[a].round().max(0.0) as usize).min(d[a] - 1);
        self.at(idx(0), idx(1), idx(2))
    }

    /// 1 where the label is foreground, 0 elsewhere.
    pub fn foreground_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != BACKGROUND).collect()
    }
}

impl Grid for LabelGrid {
    type Elem = u8;

    fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    fn data(&self) -> &[u8] {
        &self.labels
    }

    fn from_parts(geometry: GridGeometry, data: Vec<u8>) -> Result<Self> {
        LabelGrid::new(geometry, data)
    }
}

/// Trilinear interpolation of the 8 voxels around `p`; coordinates outside
/// `[0, dims-1]` are clamped to the edge. Exact at integer coordinates.
pub fn trilinear_sample(grid: &VoxelGrid, p: [f64; 3]) -> f64 {
    let d = grid.geometry.dims;
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut w = [0f64; 3];
    for a in 0..3 {
        let s = p[a].clamp(0.0, (d[a] - 1) as f64);
        let f = s.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(d[a] - 1);
        w[a] = s - f;
    }
    let v = |x: usize, y: usize, z: usize| grid.at(x, y, z) as f64;
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a * (1.0 - t) + b * t };
    let c00 = lerp(v(i0[0], i0[1], i0[2]), v(i1[0], i0[1], i0[2]), w[0]);
    let c10 = lerp(v(i0[0], i1[1], i0[2]), v(i1[0], i1[1], i0[2]), w[0]);
    let c01 = lerp(v(i0[0], i0[1], i1[2]), v(i1[0], i0[1], i1[2]), w[0]);
    let c11 = lerp(v(i0[0], i1[1], i1[2]), v(i1[0], i1[1], i1[2]), w[0]);
    let c0 = lerp(c00, c10, w[1]);
    let c1 = lerp(c01, c11, w[1]);
    lerp(c0, c1, w[2])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleDirection {
    Down,
    Up,
}

/// Down: block average over `factor^3` blocks. Up: trilinear magnification with
/// centre-aligned voxels and clamp-to-edge.
pub fn resample_factor(grid: &VoxelGrid, factor: usize, direction: ResampleDirection) -> Result<VoxelGrid> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(Error::InvalidFactor(factor));
    }
    let dims = grid.geometry.dims;
    match direction {
        ResampleDirection::Down => {
            if dims.iter().any(|d| d % factor != 0) {
                return Err(Error::NotDivisible { dims, factor });
            }
            let (values, _) = resample::downsample(&grid.values, dims, factor);
            Ok(VoxelGrid { geometry: grid.geometry.coarsened(factor), values })
        }
        ResampleDirection::Up => {
            let (values, _) = resample::upsample(&grid.values, dims, factor);
            Ok(VoxelGrid { geometry: grid.geometry.refined(factor), values })
        }
    }
}

/// Block-wise majority label over `factor^3` blocks (ties to the smaller id).
pub fn downsample_labels(labels: &LabelGrid, factor: usize) -> Result<LabelGrid> {
    let dims = labels.geometry.dims;
    if factor < 2 || !factor.is_power_of_two() {
        return Err(Error::InvalidFactor(factor));
    }
    if dims.iter().any(|d| d % factor != 0) {
        return Err(Error::NotDivisible { dims, factor });
    }
    let geometry = labels.geometry.coarsened(factor);
    let mut out = vec![0u8; geometry.len()];
    crate::par::fill_indexed(&mut out, |i| {
        let [x, y, z] = geometry.coords(i);
        let mut counts = [0u32; LABEL_COUNT];
        for dz in 0..factor {
            for dy in 0..factor {
                for dx in 0..factor {
                    let l = labels.at(x * factor + dx, y * factor + dy, z * factor + dz);
                    counts[l as usize] += 1;
                }
            }
        }
        let mut best = 0;
        for l in 1..LABEL_COUNT {
            if counts[l] > counts[best] {
                best = l;
            }
        }
        best as u8
    });
    Ok(LabelGrid { geometry, labels: out })
}

/// Standardizes to mean 0 and population variance 1.
pub fn zscore_normalize(grid: &VoxelGrid) -> Result<VoxelGrid> {
    let n = grid.values.len() as f64;
    let mean = grid.values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = grid.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let inv = 1.0 / var.sqrt();
    let values = grid.values.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect();
    Ok(VoxelGrid { geometry: grid.geometry, values })
}

/// Flips both grids along x and swaps hemispheres in the labels.
pub fn mirror_lr(intensity: &VoxelGrid, labels: &LabelGrid, taxonomy: &LabelTaxonomy) -> Result<(VoxelGrid, LabelGrid)> {
    intensity.geometry.ensure_same(&labels.geometry, "mirror_lr")?;
    let table = taxonomy.mirror_table();
    Ok((flip_x(intensity), flip_x_labels(labels, &table)))
}

pub fn flip_x(grid: &VoxelGrid) -> VoxelGrid {
    let nx = grid.geometry.dims[0];
    let mut values = grid.values.clone();
    for row in values.chunks_mut(nx) {
        row.reverse();
    }
    VoxelGrid { geometry: grid.geometry, values }
}

fn flip_x_labels(grid: &LabelGrid, table: &[u8; 256]) -> LabelGrid {
    let nx = grid.geometry.dims[0];
    let mut labels = grid.labels.clone();
    for row in labels.chunks_mut(nx) {
        row.reverse();
        for l in row.iter_mut() {
            *l = table[*l as usize];
        }
    }
    LabelGrid { geometry: grid.geometry, labels }
}

/// Label grid flipped along x with hemispheres swapped.
pub fn mirror_labels(labels: &LabelGrid, taxonomy: &LabelTaxonomy) -> LabelGrid {
    flip_x_labels(labels, &taxonomy.mirror_table())
}
