//! Turning volumes into network inputs and targets.

use anyhow::Result;
use lobeseg_core::volgrid::{
    downsample_labels, resample_factor, zscore_normalize, LabelGrid, LabelTaxonomy, ResampleDirection, VoxelGrid, FOREGROUND_LABELS,
};
use lobeseg_nn::loss::one_hot;
use lobeseg_nn::FeatureMap;

use crate::config::{ChannelMode, ResolutionMode};

/// Raw (unnormalized) volumes of one case, optionally with its atlas.
#[derive(Clone, Debug, PartialEq)]
pub struct Volumes {
    pub t1: VoxelGrid,
    pub t2: VoxelGrid,
    pub labels: LabelGrid,
    pub icv: LabelGrid,
    pub atlas: Option<LabelGrid>,
}

impl Volumes {
    /// Block-averaged intensities and majority-vote labels at the mode's
    /// resolution.
    pub fn at_resolution(&self, mode: ResolutionMode) -> Result<Self> {
        let f = mode.factor();
        if f == 1 {
            return Ok(self.clone());
        }
        Ok(Self {
            t1: resample_factor(&self.t1, f, ResampleDirection::Down)?,
            t2: resample_factor(&self.t2, f, ResampleDirection::Down)?,
            labels: downsample_labels(&self.labels, f)?,
            icv: downsample_labels(&self.icv, f)?,
            atlas: self.atlas.as_ref().map(|a| downsample_labels(a, f)).transpose()?,
        })
    }
}

/// Label ids scaled linearly into [0, 1].
pub fn encode_atlas(atlas: &LabelGrid) -> VoxelGrid {
    let scale = 1.0 / FOREGROUND_LABELS as f32;
    VoxelGrid { geometry: atlas.geometry, values: atlas.labels.iter().map(|&l| l as f32 * scale).collect() }
}

/// Z-scored T1 (and T2), then the encoded atlas, as the mode asks.
pub fn input_channels(v: &Volumes, mode: ChannelMode) -> Result<Vec<VoxelGrid>> {
    let mut out = vec![zscore_normalize(&v.t1)?];
    if mode.uses_t2() {
        out.push(zscore_normalize(&v.t2)?);
    }
    if mode.uses_atlas() {
        let atlas = v.atlas.as_ref().ok_or_else(|| anyhow::anyhow!("channel mode {} needs an atlas", mode.name()))?;
        out.push(encode_atlas(atlas));
    }
    Ok(out)
}

pub fn stage1_classes(labels: &LabelGrid, tax: &LabelTaxonomy) -> Vec<usize> {
    labels.labels.iter().map(|&l| tax.stage1_index(l)).collect()
}

pub fn stage2_classes(labels: &LabelGrid, tax: &LabelTaxonomy) -> Vec<usize> {
    labels.labels.iter().map(|&l| tax.stage2_index(l)).collect()
}

pub fn target_map(classes: &[usize], count: usize, labels: &LabelGrid) -> Result<FeatureMap<f32>> {
    Ok(one_hot(classes, count, labels.dims())?)
}

/// Zeroes every channel outside `mask`.
pub fn gate(channels: &[VoxelGrid], mask: &[bool]) -> Vec<VoxelGrid> {
    channels
        .iter()
        .map(|c| VoxelGrid { geometry: c.geometry, values: c.values.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lobeseg_core::volgrid::GridGeometry;

    #[test]
    fn atlas_encoding_spans_unit_interval() {
        let g = LabelGrid::new(GridGeometry::with_dims([3, 1, 1]), vec![0, 13, 26]).unwrap();
        assert_eq!(encode_atlas(&g).values, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn channel_counts_follow_the_mode() {
        let geo = GridGeometry::with_dims([4, 4, 4]);
        let v = Volumes {
            t1: VoxelGrid::from_fn(geo, |x, _, _| x as f32),
            t2: VoxelGrid::from_fn(geo, |_, y, _| y as f32),
            labels: LabelGrid::background(geo),
            icv: LabelGrid::background(geo),
            atlas: Some(LabelGrid::background(geo)),
        };
        for m in ChannelMode::ALL {
            assert_eq!(input_channels(&v, m).unwrap().len(), m.channels());
        }
        let half = v.at_resolution(ResolutionMode::Half).unwrap();
        assert_eq!(half.t1.dims(), [2, 2, 2]);
        assert_eq!(half.t1.values[0], 0.5);
    }
}
