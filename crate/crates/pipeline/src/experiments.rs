//! Ablation and robustness harnesses over the test split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Result;
use lobeseg_core::augment::{PerturbKind, PerturbSpec};
use lobeseg_core::evalstats::{summarize, DiceTable};
use lobeseg_nn::cascade::CascadeModel;
use serde::{Deserialize, Serialize};

use crate::atlas::TemplateBank;
use crate::config::{ChannelMode, ResolutionMode, RunConfig, Variant};
use crate::library::{self, CaseData, LibraryManifest};
use crate::segment::{case_volumes, load_models, predict, score, with_atlas, Arch};
use crate::train::augment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Absent,
}

/// Dice tables of every test case for one (variant, architecture) cell.
pub type CellScores = BTreeMap<(Variant, &'static str), Option<Vec<DiceTable>>>;

struct Evaluator<'a> {
    cfg: &'a RunConfig,
    manifest: LibraryManifest,
    bank: TemplateBank,
    cases: Vec<CaseData>,
}

impl<'a> Evaluator<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.library_dir();
        let manifest = library::load_manifest(&dir)?;
        let bank = TemplateBank::load(&dir, &manifest)?;
        let cases = library::load_cases(&dir, &manifest, &manifest.split.test)?;
        Ok(Self { cfg, manifest, bank, cases })
    }

    /// Loads each architecture of `variant`; `None` marks a missing cell.
    fn models(&self, variant: &Variant) -> Vec<(Arch, Option<Vec<CascadeModel>>)> {
        Arch::ALL
            .iter()
            .map(|&arch| {
                let m = match load_models(&self.cfg.checkpoint_dir(), variant, arch) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        log::warn!("{} {}: {e:#}", variant.dir_name(), arch.name());
                        None
                    }
                };
                (arch, m)
            })
            .collect()
    }

    /// Scores every available architecture of `variant` on the test split,
    /// with `perturbation` applied to the inputs first.
    fn score_variant(&self, variant: &Variant, perturbation: Option<&PerturbSpec>) -> Result<Vec<(Arch, Option<Vec<DiceTable>>)>> {
        let models = self.models(variant);
        let mut tables: Vec<(Arch, Option<Vec<DiceTable>>)> =
            models.iter().map(|(a, m)| (*a, m.as_ref().map(|_| Vec::new()))).collect();
        if models.iter().all(|(_, m)| m.is_none()) {
            return Ok(tables);
        }
        let hash = self.cfg.hash();
        for case in &self.cases {
            let mut v = case_volumes(case);
            if let Some(p) = perturbation {
                v = augment(&v, std::slice::from_ref(p))?;
            }
            let v = with_atlas(v, variant, &self.bank, &self.manifest, case, self.cfg)?;
            for ((_, m), (_, t)) in models.iter().zip(tables.iter_mut()) {
                if let (Some(m), Some(t)) = (m, t) {
                    let (run, truth) = predict(m, &v, variant, &hash)?;
                    t.push(score(&run, &truth)?);
                }
            }
        }
        Ok(tables)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub architecture: String,
    pub channels: String,
    pub resolution: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub cases: usize,
    pub status: CellStatus,
}

pub const ABLATION_METRICS: [&str; 2] = ["mean_structure_dice", "whole_cerebellum_dice"];

fn ablation_rows(variant: &Variant, arch: Arch, tables: Option<&[DiceTable]>) -> Vec<AblationRow> {
    let summary = tables.and_then(summarize);
    ABLATION_METRICS
        .iter()
        .map(|&metric| {
            let (mean, std) = match &summary {
                Some(s) if metric == "mean_structure_dice" => (Some(s.mean.mean_structure), Some(s.std.mean_structure)),
                Some(s) => (Some(s.mean.whole_cerebellum), Some(s.std.whole_cerebellum)),
                None => (None, None),
            };
            AblationRow {
                architecture: arch.name().into(),
                channels: variant.channels.name().into(),
                resolution: variant.resolution.name().into(),
                metric: metric.into(),
                mean,
                std,
                cases: summary.as_ref().map_or(0, |s| s.cases),
                status: if summary.is_some() { CellStatus::Ok } else { CellStatus::Absent },
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Every architecture × channel mode × resolution cell, two metrics each.
/// Cells without checkpoints are marked absent.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let ev = Evaluator::new(cfg)?;
    let mut rows = Vec::new();
    for channels in ChannelMode::ALL {
        for resolution in ResolutionMode::ALL {
            let variant = Variant::new(channels, resolution);
            for (arch, tables) in ev.score_variant(&variant, None)? {
                rows.extend(ablation_rows(&variant, arch, tables.as_deref()));
            }
        }
    }
    write_csv(&cfg.output_dir().join("ablation.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub architecture: String,
    pub channels: String,
    pub resolution: String,
    pub perturbation: String,
    pub mean_dice: Option<f64>,
    pub whole_cerebellum_dice: Option<f64>,
    /// Perturbed minus clean mean structure Dice.
    pub delta_mean_dice: Option<f64>,
    pub delta_whole_cerebellum: Option<f64>,
    pub status: CellStatus,
}

pub const CLEAN: &str = "clean";

/// Clean inputs, each configured perturbation and bad T2, for every trained
/// variant and architecture.
pub fn cmd_robustness(cfg: &RunConfig) -> Result<Vec<RobustnessRow>> {
    let ev = Evaluator::new(cfg)?;
    let mut sweep: Vec<Option<PerturbSpec>> = vec![None];
    sweep.extend(cfg.perturbations.iter().copied().map(Some));
    if !cfg.perturbations.iter().any(|p| p.kind == PerturbKind::BadT2) {
        sweep.push(Some(PerturbSpec::new(PerturbKind::BadT2, 0)));
    }
    let mut rows = Vec::new();
    for variant in &cfg.variants {
        let mut clean: BTreeMap<&'static str, (f64, f64)> = BTreeMap::new();
        for p in &sweep {
            let label = p.as_ref().map_or_else(|| CLEAN.to_string(), PerturbSpec::label);
            for (arch, tables) in ev.score_variant(variant, p.as_ref())? {
                let s = tables.as_deref().and_then(summarize);
                let now = s.as_ref().map(|s| (s.mean.mean_structure, s.mean.whole_cerebellum));
                if p.is_none() {
                    if let Some(n) = now {
                        clean.insert(arch.name(), n);
                    }
                }
                let base = clean.get(arch.name()).copied();
                let delta = now.zip(base).map(|(n, b)| (n.0 - b.0, n.1 - b.1));
                rows.push(RobustnessRow {
                    architecture: arch.name().into(),
                    channels: variant.channels.name().into(),
                    resolution: variant.resolution.name().into(),
                    perturbation: label.clone(),
                    mean_dice: now.map(|n| n.0),
                    whole_cerebellum_dice: now.map(|n| n.1),
                    delta_mean_dice: delta.map(|d| d.0),
                    delta_whole_cerebellum: delta.map(|d| d.1),
                    status: if now.is_some() { CellStatus::Ok } else { CellStatus::Absent },
                });
                log::info!("{} {} {label}: {:?}", variant.dir_name(), arch.name(), now);
            }
        }
    }
    write_csv(&cfg.output_dir().join("robustness.csv"), &rows)?;
    Ok(rows)
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}
