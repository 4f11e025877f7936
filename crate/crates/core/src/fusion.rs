//! Subject-specific atlas construction: pick the templates closest to the
//! target in L1 intensity distance, warp them with dense displacement fields and
//! fuse their labels by intensity-weighted majority voting.
//!
//! Each template `j` votes at voxel `p` for its warped label with weight
//! `w = 1 / (1 + d * |I_p - L_pj|)`, where `I` is the target intensity and `L`
//! the warped template intensity (both z-scored). The label with the largest
//! summed weight wins; equal sums go to the smaller label id.

use std::path::Path;

use crate::error::{Error, Result};
use crate::evalstats;
use crate::par;
use crate::volgrid::{
    read_voxel_grid, write_volume, GridGeometry, LabelGrid, LabelTaxonomy, Volume, VoxelGrid, LABEL_COUNT,
};

/// Dense map from target voxel coordinates to template sampling coordinates,
/// in voxel units: template position = target position + vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub geometry: GridGeometry,
    pub vectors: Vec<[f32; 3]>,
}

impl DisplacementField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        Self { vectors: vec![[0.0; 3]; geometry.len()], geometry }
    }

    pub fn new(geometry: GridGeometry, vectors: Vec<[f32; 3]>) -> Result<Self> {
        if vectors.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "{} vectors for dims {:?}",
                vectors.len(),
                geometry.dims
            )));
        }
        if let Some(i) = vectors.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { geometry, vectors })
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| v.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Splits into the three component volumes (dx, dy, dz).
    pub fn components(&self) -> [VoxelGrid; 3] {
        std::array::from_fn(|a| VoxelGrid {
            geometry: self.geometry,
            values: self.vectors.iter().map(|v| v[a]).collect(),
        })
    }

    pub fn from_components(parts: [VoxelGrid; 3]) -> Result<Self> {
        parts[0].geometry.ensure_same(&parts[1].geometry, "field dy")?;
        parts[0].geometry.ensure_same(&parts[2].geometry, "field dz")?;
        let vectors = (0..parts[0].len())
            .map(|i| [parts[0].values[i], parts[1].values[i], parts[2].values[i]])
            .collect();
        Self::new(parts[0].geometry, vectors)
    }

    /// Writes `<stem>_dx.g3d`, `<stem>_dy.g3d` and `<stem>_dz.g3d` next to each other.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        for (grid, axis) in self.components().into_iter().zip(["dx", "dy", "dz"]) {
            write_volume(dir.as_ref().join(format!("{stem}_{axis}.g3d")), &Volume::Scalar(grid))?;
        }
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let read = |axis: &str| read_voxel_grid(dir.as_ref().join(format!("{stem}_{axis}.g3d")));
        Self::from_components([read("dx")?, read("dy")?, read("dz")?])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasTemplate {
    pub id: usize,
    pub intensity: VoxelGrid,
    pub labels: LabelGrid,
    pub displacement: Option<DisplacementField>,
}

impl AtlasTemplate {
    pub fn new(id: usize, intensity: VoxelGrid, labels: LabelGrid) -> Result<Self> {
        intensity.geometry.ensure_same(&labels.geometry, "template")?;
        Ok(Self { id, intensity, labels, displacement: None })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Intensity-difference scaling in the vote weight.
    pub d: f64,
    pub n_templates: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { d: 0.5, n_templates: 20 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d >= 0.0) || !self.d.is_finite() {
            return Err(Error::InvalidParameter(format!("fusion d = {} must be >= 0", self.d)));
        }
        if self.n_templates == 0 {
            return Err(Error::InvalidParameter("n_templates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Vote weight for an absolute intensity difference.
#[inline]
pub fn vote_weight(d: f64, abs_diff: f64) -> f64 {
    1.0 / (1.0 + d * abs_diff)
}

pub fn l1_distance(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    a.geometry.ensure_same(&b.geometry, "l1_distance")?;
    Ok(a.values.iter().zip(&b.values).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum())
}

/// Ids of the `n` templates closest to `target` in L1 distance, ascending, with
/// ties broken by id.
pub fn select_similar(library: &[AtlasTemplate], target: &VoxelGrid, n: usize) -> Result<Vec<usize>> {
    if n > library.len() {
        return Err(Error::TooFewTemplates { requested: n, available: library.len() });
    }
    let distances = par::map_indices(library.len(), |i| l1_distance(&library[i].intensity, target));
    let mut ranked = library
        .iter()
        .zip(distances)
        .map(|(t, d)| d.map(|d| (d, t.id)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(n).map(|(_, id)| id).collect())
}

/// Resamples a template through `field`: intensities trilinearly, labels by
/// nearest neighbour at the same coordinates. The result lives on the field's
/// geometry.
pub fn warp(template: &AtlasTemplate, field: &DisplacementField) -> Result<AtlasTemplate> {
    template.intensity.geometry.ensure_same(&template.labels.geometry, "template")?;
    let geometry = field.geometry;
    let mut values = vec![0f32; geometry.len()];
    let mut labels = vec![0u8; geometry.len()];
    par::fill_indexed(&mut values, |i| {
        let p = sample_point(&geometry, field, i);
        template.intensity.sample(p) as f32
    });
    par::fill_indexed(&mut labels, |i| {
        let p = sample_point(&geometry, field, i);
        template.labels.sample_nearest(p)
    });
    Ok(AtlasTemplate {
        id: template.id,
        intensity: VoxelGrid { geometry, values },
        labels: LabelGrid { geometry, labels },
        displacement: Some(field.clone()),
    })
}

#[inline]
fn sample_point(geometry: &GridGeometry, field: &DisplacementField, i: usize) -> [f64; 3] {
    let c = geometry.coords(i);
    let v = field.vectors[i];
    [c[0] as f64 + v[0] as f64, c[1] as f64 + v[1] as f64, c[2] as f64 + v[2] as f64]
}

/// Intensity-weighted majority vote over warped templates.
pub fn fuse_weighted_vote(target: &VoxelGrid, warped: &[AtlasTemplate], cfg: &FusionConfig) -> Result<LabelGrid> {
    cfg.validate()?;
    if warped.is_empty() {
        return Err(Error::EmptyTemplates);
    }
    for t in warped {
        target.geometry.ensure_same(&t.intensity.geometry, "fusion intensity")?;
        target.geometry.ensure_same(&t.labels.geometry, "fusion labels")?;
    }
    let mut out = vec![0u8; target.len()];
    par::fill_indexed(&mut out, |p| {
        let ip = target.values[p] as f64;
        let mut score = [0f64; LABEL_COUNT];
        for t in warped {
            let w = vote_weight(cfg.d, (ip - t.intensity.values[p] as f64).abs());
            score[t.labels.labels[p] as usize] += w;
        }
        let mut best = 0;
        for l in 1..LABEL_COUNT {
            if score[l] > score[best] {
                best = l;
            }
        }
        best as u8
    });
    Ok(LabelGrid { geometry: target.geometry, labels: out })
}

/// Select, warp and fuse. `field_for(id)` provides the displacement field that
/// registers template `id` onto the target.
pub fn build_atlas<F>(library: &[AtlasTemplate], target: &VoxelGrid, cfg: &FusionConfig, field_for: F) -> Result<LabelGrid>
where
    F: Fn(usize) -> Result<DisplacementField>,
{
    cfg.validate()?;
    let n = cfg.n_templates.min(library.len());
    let ids = select_similar(library, target, n)?;
    let mut warped = Vec::with_capacity(ids.len());
    for id in ids {
        let t = library.iter().find(|t| t.id == id).expect("selected id comes from the library");
        warped.push(warp(t, &field_for(id)?)?);
    }
    fuse_weighted_vote(target, &warped, cfg)
}

/// Mean Dice over the foreground labels present in either grid.
pub fn atlas_quality(fused: &LabelGrid, reference: &LabelGrid) -> Result<f64> {
    let table = evalstats::aggregate_dice(fused, reference, &LabelTaxonomy::cerebellum())?;
    let (ha, hb) = (fused.histogram(), reference.histogram());
    let present: Vec<f64> = (1..LABEL_COUNT)
        .filter(|&l| ha[l] + hb[l] > 0)
        .map(|l| table.per_label[l - 1])
        .collect();
    if present.is_empty() {
        return Ok(1.0);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
