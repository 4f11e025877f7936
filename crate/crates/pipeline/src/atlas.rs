//! Subject-specific atlases by multi-template fusion.
//!
//! Templates are the training cases. The displacement field from a template
//! to a target comes from the phantoms' known poses, standing in for a
//! registration step.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lobeseg_core::fusion::{self, AtlasTemplate, FusionConfig};
use lobeseg_core::phantom::{correspondence_field, CaseFrame};
use lobeseg_core::volgrid::{write_volume, LabelGrid, Volume, VoxelGrid};
use serde::{Deserialize, Serialize};

use crate::library::{self, CaseData, LibraryManifest};

/// Training cases loaded once and reused as fusion templates.
pub struct TemplateBank {
    templates: Vec<(usize, AtlasTemplate, CaseFrame)>,
}

impl TemplateBank {
    pub fn load(dir: &Path, manifest: &LibraryManifest) -> Result<Self> {
        let cases = library::load_cases(dir, manifest, &manifest.split.train)?;
        Self::from_cases(&cases)
    }

    pub fn from_cases(cases: &[CaseData]) -> Result<Self> {
        let templates = cases
            .iter()
            .map(|c| Ok((c.index, AtlasTemplate::new(c.index, c.t1.clone(), c.labels.clone())?, c.frame.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Fuses an atlas for a target T1 with known pose. `exclude` lists
    /// library indices that must not vote (the target and its twin).
    pub fn fuse(&self, target_t1: &VoxelGrid, target_frame: &CaseFrame, exclude: &[usize], cfg: &FusionConfig) -> Result<LabelGrid> {
        let pool: Vec<AtlasTemplate> =
            self.templates.iter().filter(|(i, ..)| !exclude.contains(i)).map(|(_, t, _)| t.clone()).collect();
        anyhow::ensure!(!pool.is_empty(), "no fusion templates left after exclusions");
        let geometry = target_t1.geometry;
        let atlas = fusion::build_atlas(&pool, target_t1, cfg, |id| {
            let frame = &self.templates.iter().find(|(i, ..)| *i == id).expect("template in bank").2;
            correspondence_field(target_frame, frame, geometry)
        })?;
        Ok(atlas)
    }

    /// Atlas for library case `case`, excluding it and its twin.
    pub fn fuse_library_case(&self, manifest: &LibraryManifest, case: &CaseData, cfg: &FusionConfig) -> Result<LabelGrid> {
        self.fuse(&case.t1, &case.frame, &[case.index, manifest.twin(case.index)], cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasQualityRow {
    pub case: String,
    pub split: String,
    pub templates: usize,
    pub atlas_quality: f64,
}

pub fn split_name(manifest: &LibraryManifest, i: usize) -> &'static str {
    if manifest.split.test.contains(&i) {
        "test"
    } else if manifest.split.val.contains(&i) {
        "val"
    } else {
        "train"
    }
}

/// Writes an atlas for every library case and a quality table.
pub fn fuse_library(dir: &Path, manifest: &LibraryManifest, cfg: &FusionConfig, quality_csv: &Path) -> Result<Vec<AtlasQualityRow>> {
    let bank = TemplateBank::load(dir, manifest)?;
    fs::create_dir_all(dir.join("atlas"))?;
    let mut rows = Vec::with_capacity(manifest.records.len());
    for i in 0..manifest.records.len() {
        let case = library::load_case(dir, manifest, i)?;
        let atlas = bank.fuse_library_case(manifest, &case, cfg)?;
        write_volume(library::atlas_path(dir, &case.name), &Volume::Label(atlas.clone()))?;
        let quality = fusion::atlas_quality(&atlas, &case.labels)?;
        log::info!("atlas {}: quality {quality:.4}", case.name);
        rows.push(AtlasQualityRow {
            case: case.name.clone(),
            split: split_name(manifest, i).to_string(),
            templates: manifest.atlas_candidates(i).len().min(cfg.n_templates),
            atlas_quality: quality,
        });
    }
    if let Some(parent) = quality_csv.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(quality_csv).with_context(|| format!("writing {}", quality_csv.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
