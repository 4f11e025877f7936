//! Cascade ensemble inference on library cases.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lobeseg_core::evalstats::{aggregate_dice, DiceTable};
use lobeseg_core::volgrid::{write_volume, LabelTaxonomy, Volume};
use lobeseg_nn::cascade::{ensemble_predict, CascadeModel, SegmentationRun};
use lobeseg_nn::{checkpoint, NetworkKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atlas::TemplateBank;
use crate::config::{RunConfig, Variant};
use crate::data::{self, Volumes};
use crate::library::{self, CaseData, LibraryManifest};
use crate::report::{build_report, Report, ReportInputs};
use crate::train::{checkpoint_path, Stage, KINDS};

/// Which trained cascades take part in a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Dpn,
    Unet,
    Ensemble,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Dpn, Arch::Unet, Arch::Ensemble];

    pub fn kinds(self) -> &'static [NetworkKind] {
        match self {
            Arch::Dpn => &[NetworkKind::Dpn],
            Arch::Unet => &[NetworkKind::Unet],
            Arch::Ensemble => &KINDS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Dpn => "dpn",
            Arch::Unet => "unet",
            Arch::Ensemble => "ensemble",
        }
    }
}

/// Loads the two stage networks of one architecture.
pub fn load_cascade(checkpoints: &Path, variant: &Variant, kind: NetworkKind) -> Result<CascadeModel> {
    let load = |stage: Stage| {
        let path = checkpoint_path(checkpoints, variant, kind, stage);
        if !path.exists() {
            bail!("checkpoint {} missing; run `lobeseg train` first", path.display());
        }
        let (net, _) = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        if net.spec.kind != kind {
            bail!("checkpoint {} holds a {} network, expected {}", path.display(), net.spec.kind.name(), kind.name());
        }
        if net.spec.in_channels != variant.channels.channels() {
            bail!(
                "checkpoint {} expects {} input channels but channel mode {} gives {}",
                path.display(),
                net.spec.in_channels,
                variant.channels.name(),
                variant.channels.channels()
            );
        }
        Ok(net)
    };
    Ok(CascadeModel::new(format!("{}/{}", variant.dir_name(), kind.name()), load(Stage::Hemisphere)?, load(Stage::Lobule)?)?)
}

pub fn load_models(checkpoints: &Path, variant: &Variant, arch: Arch) -> Result<Vec<CascadeModel>> {
    arch.kinds().iter().map(|&k| load_cascade(checkpoints, variant, k)).collect()
}

/// Case volumes with a freshly fused atlas when the variant needs one. The
/// atlas is fused from `volumes.t1`, so perturbed inputs get their own atlas.
pub fn with_atlas(volumes: Volumes, variant: &Variant, bank: &TemplateBank, manifest: &LibraryManifest, case: &CaseData, cfg: &RunConfig) -> Result<Volumes> {
    if !variant.channels.uses_atlas() {
        return Ok(Volumes { atlas: None, ..volumes });
    }
    let atlas = bank.fuse(&volumes.t1, &case.frame, &[case.index, manifest.twin(case.index)], &cfg.fusion)?;
    Ok(Volumes { atlas: Some(atlas), ..volumes })
}

pub fn case_volumes(case: &CaseData) -> Volumes {
    Volumes { t1: case.t1.clone(), t2: case.t2.clone(), labels: case.labels.clone(), icv: case.icv.clone(), atlas: None }
}

/// Runs the models on `volumes` (already carrying an atlas if needed) at the
/// variant's resolution. Returns the run and the volumes it was scored against.
pub fn predict(models: &[CascadeModel], volumes: &Volumes, variant: &Variant, config_hash: &str) -> Result<(SegmentationRun, Volumes)> {
    let v = volumes.at_resolution(variant.resolution)?;
    let inputs = data::input_channels(&v, variant.channels)?;
    let run = ensemble_predict(models, &inputs, &LabelTaxonomy::cerebellum(), config_hash)?;
    Ok((run, v))
}

pub fn score(run: &SegmentationRun, truth: &Volumes) -> Result<DiceTable> {
    Ok(aggregate_dice(&run.labels, &truth.labels, &LabelTaxonomy::cerebellum())?)
}

/// One row of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub case: String,
    pub label: Option<u8>,
    pub structure: String,
    pub dice: f64,
}

pub fn dice_rows(case: &str, table: &DiceTable) -> Vec<DiceRow> {
    let tax = LabelTaxonomy::cerebellum();
    let mut rows: Vec<DiceRow> = tax
        .entries()
        .iter()
        .map(|e| DiceRow { case: case.into(), label: Some(e.id), structure: e.name.clone(), dice: table.per_label[e.id as usize - 1] })
        .collect();
    rows.push(DiceRow { case: case.into(), label: None, structure: "whole_cerebellum".into(), dice: table.whole_cerebellum });
    rows.push(DiceRow { case: case.into(), label: None, structure: "mean_structure".into(), dice: table.mean_structure });
    rows
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct SegmentOutput {
    pub run: SegmentationRun,
    pub report: Report,
    pub dice: DiceTable,
    pub dir: PathBuf,
}

/// Segments library case `case_name` with the configured channel and
/// resolution modes and writes labels, report, Dice CSV and a run manifest.
pub fn cmd_segment(cfg: &RunConfig, case_name: &str) -> Result<SegmentOutput> {
    cfg.validate()?;
    let lib = cfg.library_dir();
    let manifest = library::load_manifest(&lib)?;
    let index = manifest.index_of(case_name).with_context(|| format!("case {case_name} not in library"))?;
    let variant = Variant::new(cfg.channel_mode, cfg.resolution_mode);
    let models = load_models(&cfg.checkpoint_dir(), &variant, Arch::Ensemble)?;
    let case = library::load_case(&lib, &manifest, index)?;
    let bank = TemplateBank::load(&lib, &manifest)?;
    let volumes = with_atlas(case_volumes(&case), &variant, &bank, &manifest, &case, cfg)?;
    let config_hash = cfg.hash();
    let (run, truth) = predict(&models, &volumes, &variant, &config_hash)?;
    let dice = score(&run, &truth)?;
    let report = build_report(&ReportInputs {
        case: case_name,
        labels: &run.labels,
        icv: Some(&truth.icv),
        truth: Some(&truth.labels),
        population: None,
        age: None,
    })?;

    let dir = cfg.output_dir().join("segment").join(case_name);
    fs::create_dir_all(&dir)?;
    write_volume(dir.join("labels.g3d"), &Volume::Label(run.labels.clone()))?;
    report.write(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("dice.csv"))?;
    for r in dice_rows(case_name, &dice) {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut m = format!("case = {case_name}\nvariant = {}\nconfig_sha256 = {config_hash}\n", variant.dir_name());
    for what in ["t1", "t2", "labels", "icv"] {
        let p = library::volume_path(&lib, case_name, what);
        m += &format!("input {what} = {}\n", sha256_file(&p)?);
    }
    for &kind in Arch::Ensemble.kinds() {
        for stage in Stage::BOTH {
            let p = checkpoint_path(&cfg.checkpoint_dir(), &variant, kind, stage);
            m += &format!("checkpoint {}_stage{} = {}\n", kind.name(), stage.number(), sha256_file(&p)?);
        }
    }
    m += &format!("output labels = {}\n", sha256_file(&dir.join("labels.g3d"))?);
    fs::write(dir.join("run_manifest.txt"), m)?;
    Ok(SegmentOutput { run, report, dice, dir })
}
