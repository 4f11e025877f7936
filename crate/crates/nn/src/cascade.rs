//! Two-stage cascade: hemisphere network, mask gating, lobule network, label
//! composition; plus probability-averaging ensembles.

use lobeseg_core::par;
use lobeseg_core::volgrid::{
    GridGeometry, Hemisphere, LabelGrid, LabelTaxonomy, LobuleClass, VoxelGrid, BACKGROUND, STAGE1_CLASSES, STAGE2_CLASSES,
};

use crate::error::{NnError, Result};
use crate::network::Network;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug)]
pub struct CascadeModel {
    pub id: String,
    pub stage1: Network<f32>,
    pub stage2: Network<f32>,
}

impl CascadeModel {
    pub fn new(id: impl Into<String>, stage1: Network<f32>, stage2: Network<f32>) -> Result<Self> {
        if stage1.spec.out_classes != STAGE1_CLASSES {
            return Err(NnError::InvalidSpec(format!("stage 1 must have {STAGE1_CLASSES} classes, has {}", stage1.spec.out_classes)));
        }
        if stage2.spec.out_classes != STAGE2_CLASSES {
            return Err(NnError::InvalidSpec(format!("stage 2 must have {STAGE2_CLASSES} classes, has {}", stage2.spec.out_classes)));
        }
        if stage1.spec.in_channels != stage2.spec.in_channels {
            return Err(NnError::InvalidSpec("stages take different input channels".into()));
        }
        Ok(Self { id: id.into(), stage1, stage2 })
    }

    pub fn in_channels(&self) -> usize {
        self.stage1.spec.in_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub model_ids: Vec<String>,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct SegmentationRun {
    pub stage1: FeatureMap<f32>,
    pub stage2: FeatureMap<f32>,
    pub labels: LabelGrid,
    pub provenance: Provenance,
}

fn argmax_at(p: &FeatureMap<f32>, v: usize) -> usize {
    let n = p.voxels();
    let mut best = 0;
    for k in 1..p.channels {
        if p.data[k * n + v] > p.data[best * n + v] {
            best = k;
        }
    }
    best
}

/// Voxels whose hemisphere argmax is left or right.
pub fn cerebellum_mask(stage1: &FeatureMap<f32>) -> Vec<bool> {
    let mut mask = vec![false; stage1.voxels()];
    par::fill_indexed(&mut mask, |v| argmax_at(stage1, v) != 0);
    mask
}

/// Multiplies every channel by the merged left/right mask from `stage1`.
pub fn gate_inputs(channels: &[VoxelGrid], stage1: &FeatureMap<f32>) -> Result<Vec<VoxelGrid>> {
    let mask = cerebellum_mask(stage1);
    gate_with_mask(channels, &mask, stage1.dims)
}

pub fn gate_with_mask(channels: &[VoxelGrid], mask: &[bool], dims: [usize; 3]) -> Result<Vec<VoxelGrid>> {
    channels
        .iter()
        .map(|g| {
            if g.dims() != dims || g.len() != mask.len() {
                return Err(NnError::ShapeMismatch(format!("channel {:?} vs mask {:?}", g.dims(), dims)));
            }
            let values = g.values.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            Ok(VoxelGrid::new(g.geometry, values)?)
        })
        .collect()
}

/// Background wherever either stage says background, otherwise the taxonomy
/// id for (hemisphere, class). Ties go to the lower class index.
pub fn compose_labels(stage1: &FeatureMap<f32>, stage2: &FeatureMap<f32>, taxonomy: &LabelTaxonomy, geometry: GridGeometry) -> Result<LabelGrid> {
    if stage1.channels != STAGE1_CLASSES || stage2.channels != STAGE2_CLASSES {
        return Err(NnError::ShapeMismatch(format!("stage classes {} / {}", stage1.channels, stage2.channels)));
    }
    if stage1.dims != stage2.dims || geometry.dims != stage1.dims {
        return Err(NnError::ShapeMismatch(format!("stage dims {:?} / {:?} vs grid {:?}", stage1.dims, stage2.dims, geometry.dims)));
    }
    let mut labels = vec![BACKGROUND; stage1.voxels()];
    par::fill_indexed(&mut labels, |v| {
        match (Hemisphere::from_stage_index(argmax_at(stage1, v)), LobuleClass::from_stage_index(argmax_at(stage2, v))) {
            (Some(h), Some(c)) => taxonomy.lookup(h, c),
            _ => BACKGROUND,
        }
    });
    Ok(LabelGrid::new(geometry, labels)?)
}

/// Element-wise mean, accumulated in f64.
pub fn average_probs(maps: &[FeatureMap<f32>]) -> Result<FeatureMap<f32>> {
    let first = maps.first().ok_or(NnError::EmptySet("model"))?;
    if let Some(m) = maps.iter().find(|m| !m.same_shape(first)) {
        return Err(NnError::ShapeMismatch(format!("{} classes vs {}", m.channels, first.channels)));
    }
    let k = maps.len() as f64;
    let mut data = vec![0f32; first.data.len()];
    par::fill_indexed(&mut data, |i| (maps.iter().map(|m| m.data[i] as f64).sum::<f64>() / k) as f32);
    FeatureMap::new(first.channels, first.dims, data)
}

/// Averages the hemisphere maps, gates the inputs with the averaged mask,
/// averages the lobule maps and composes the labels.
pub fn ensemble_predict(models: &[CascadeModel], inputs: &[VoxelGrid], taxonomy: &LabelTaxonomy, config_hash: &str) -> Result<SegmentationRun> {
    let first = models.first().ok_or(NnError::EmptySet("model"))?;
    for m in models {
        if m.stage1.spec.out_classes != first.stage1.spec.out_classes || m.stage2.spec.out_classes != first.stage2.spec.out_classes {
            return Err(NnError::ShapeMismatch(format!("model {} has different class counts", m.id)));
        }
    }
    let geometry = inputs.first().ok_or_else(|| NnError::ShapeMismatch("no input channels".into()))?.geometry;
    let x = FeatureMap::<f32>::from_grids(inputs)?;
    let p1 = models.iter().map(|m| m.stage1.predict(&x)).collect::<Result<Vec<_>>>()?;
    let stage1 = average_probs(&p1)?;
    let gated = FeatureMap::<f32>::from_grids(&gate_inputs(inputs, &stage1)?)?;
    let p2 = models.iter().map(|m| m.stage2.predict(&gated)).collect::<Result<Vec<_>>>()?;
    let stage2 = average_probs(&p2)?;
    let labels = compose_labels(&stage1, &stage2, taxonomy, geometry)?;
    Ok(SegmentationRun {
        stage1,
        stage2,
        labels,
        provenance: Provenance { model_ids: models.iter().map(|m| m.id.clone()).collect(), config_hash: config_hash.to_string() },
    })
}
