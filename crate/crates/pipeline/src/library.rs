//! On-disk phantom library: a JSON manifest plus one `.g3d` file per volume.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lobeseg_core::phantom::{self, CaseFrame, CaseRecord, LibrarySplit, PhantomSpec};
use lobeseg_core::volgrid::{read_label_grid, read_voxel_grid, write_volume, Volume};
use lobeseg_core::volgrid::{LabelGrid, VoxelGrid};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub version: u32,
    pub base_seed: u64,
    pub subjects: usize,
    pub phantom: PhantomSpec,
    pub records: Vec<CaseRecord>,
    pub split: LibrarySplit,
}

impl LibraryManifest {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.records.iter().position(|r| r.name == name)
    }

    /// Mirrored twin of case `i`.
    pub fn twin(&self, i: usize) -> usize {
        i ^ 1
    }

    /// Training cases other than `target` and its twin.
    pub fn atlas_candidates(&self, target: usize) -> Vec<usize> {
        self.split.train.iter().copied().filter(|&i| i != target && i != self.twin(target)).collect()
    }

    pub fn frame(&self, i: usize) -> Result<CaseFrame> {
        Ok(phantom::record_frame(&self.records[i], &self.phantom)?)
    }
}

/// One library case as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseData {
    pub index: usize,
    pub name: String,
    pub t1: VoxelGrid,
    pub t2: VoxelGrid,
    pub labels: LabelGrid,
    pub icv: LabelGrid,
    pub frame: CaseFrame,
}

pub fn volume_path(dir: &Path, name: &str, what: &str) -> PathBuf {
    dir.join("cases").join(format!("{name}_{what}.g3d"))
}

pub fn atlas_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("atlas").join(format!("{name}_atlas.g3d"))
}

/// Generates the library and writes it to `dir`.
pub fn write_library(dir: &Path, subjects: usize, base_seed: u64, spec: &PhantomSpec) -> Result<LibraryManifest> {
    let lib = phantom::make_library(subjects, base_seed, spec)?;
    fs::create_dir_all(dir.join("cases"))?;
    for (record, case) in lib.records.iter().zip(&lib.cases) {
        write_volume(volume_path(dir, &record.name, "t1"), &Volume::Scalar(case.t1.clone()))?;
        write_volume(volume_path(dir, &record.name, "t2"), &Volume::Scalar(case.t2.clone()))?;
        write_volume(volume_path(dir, &record.name, "labels"), &Volume::Label(case.labels.clone()))?;
        write_volume(volume_path(dir, &record.name, "icv"), &Volume::Label(case.icv_mask.clone()))?;
    }
    let manifest = LibraryManifest {
        version: MANIFEST_VERSION,
        base_seed,
        subjects,
        phantom: spec.clone(),
        records: lib.records,
        split: lib.split,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<LibraryManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("library manifest {} not found; run `lobeseg phantom` first", path.display()))?;
    let m: LibraryManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.version != MANIFEST_VERSION {
        bail!("unsupported library manifest version {}", m.version);
    }
    Ok(m)
}

pub fn load_case(dir: &Path, manifest: &LibraryManifest, index: usize) -> Result<CaseData> {
    let record = manifest.records.get(index).with_context(|| format!("case index {index} out of range"))?;
    let name = &record.name;
    let read_s = |w: &str| read_voxel_grid(volume_path(dir, name, w)).with_context(|| format!("reading {name} {w}"));
    let read_l = |w: &str| read_label_grid(volume_path(dir, name, w)).with_context(|| format!("reading {name} {w}"));
    Ok(CaseData {
        index,
        name: name.clone(),
        t1: read_s("t1")?,
        t2: read_s("t2")?,
        labels: read_l("labels")?,
        icv: read_l("icv")?,
        frame: manifest.frame(index)?,
    })
}

pub fn load_cases(dir: &Path, manifest: &LibraryManifest, indices: &[usize]) -> Result<Vec<CaseData>> {
    indices.iter().map(|&i| load_case(dir, manifest, i)).collect()
}

pub fn load_atlas(dir: &Path, name: &str) -> Result<LabelGrid> {
    let path = atlas_path(dir, name);
    read_label_grid(&path).with_context(|| format!("atlas {} missing; run `lobeseg fuse` first", path.display()))
}
