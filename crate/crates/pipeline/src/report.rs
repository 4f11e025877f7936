//! Volumetric report: per-structure volumes, ICV fractions, asymmetry indices
//! and optional population-bound flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lobeseg_core::evalstats::{aggregate_dice, PolyFit};
use lobeseg_core::volgrid::{Hemisphere, LabelGrid, LabelTaxonomy, LobuleClass, BACKGROUND, LABEL_COUNT};
use serde::{Deserialize, Serialize};

/// Population bounds are mean +- this many residual standard deviations.
pub const POPULATION_K: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Volume,
    Asymmetry,
    WholeCerebellum,
    Icv,
}

/// One CSV row. Fields that do not apply to a kind are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub kind: RecordKind,
    pub structure: String,
    pub label: Option<u8>,
    pub volume_cm3: Option<f64>,
    pub percent_icv: Option<f64>,
    pub asymmetry_index: Option<f64>,
    pub dice: Option<f64>,
    pub within_population: Option<bool>,
}

impl ReportRecord {
    fn empty(kind: RecordKind, structure: impl Into<String>) -> Self {
        Self {
            kind,
            structure: structure.into(),
            label: None,
            volume_cm3: None,
            percent_icv: None,
            asymmetry_index: None,
            dice: None,
            within_population: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub case: String,
    pub records: Vec<ReportRecord>,
}

/// Fitted age/volume curves keyed by structure name, volumes in cm³.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    pub structures: BTreeMap<String, PolyFit>,
}

impl PopulationModel {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading population model {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `200 (right - left) / (right + left)`; zero when both are empty.
pub fn asymmetry_index(left: f64, right: f64) -> f64 {
    if left + right == 0.0 {
        0.0
    } else {
        200.0 * (right - left) / (right + left)
    }
}

fn counts(labels: &LabelGrid) -> [usize; LABEL_COUNT] {
    let mut c = [0usize; LABEL_COUNT];
    for &l in &labels.labels {
        c[l as usize] += 1;
    }
    c
}

pub struct ReportInputs<'a> {
    pub case: &'a str,
    pub labels: &'a LabelGrid,
    pub icv: Option<&'a LabelGrid>,
    pub truth: Option<&'a LabelGrid>,
    pub population: Option<&'a PopulationModel>,
    pub age: Option<f64>,
}

pub fn build_report(inp: &ReportInputs) -> Result<Report> {
    let tax = LabelTaxonomy::cerebellum();
    let labels = inp.labels;
    let mm3_to_cm3 = labels.geometry.voxel_volume_mm3() / 1000.0;
    let c = counts(labels);
    let volume = |id: u8| c[id as usize] as f64 * mm3_to_cm3;
    let icv_cm3 = match inp.icv {
        Some(icv) => {
            icv.geometry.ensure_same(&labels.geometry, "report icv")?;
            Some(icv.labels.iter().filter(|&&l| l != BACKGROUND).count() as f64 * icv.geometry.voxel_volume_mm3() / 1000.0)
        }
        None => None,
    };
    let percent = |v: f64| icv_cm3.filter(|&i| i > 0.0).map(|i| 100.0 * v / i);
    let dice = inp.truth.map(|t| aggregate_dice(labels, t, &tax)).transpose()?;
    let population = match (inp.population, inp.age) {
        (Some(m), Some(age)) => Some((m, age)),
        (None, Some(_)) => {
            log::warn!("age given without a population model; population flags omitted");
            None
        }
        _ => None,
    };
    let flag = |name: &str, v: f64| population.and_then(|(m, age)| m.structures.get(name).map(|f| f.within(age, v, POPULATION_K)));

    let mut records = Vec::new();
    for e in tax.entries() {
        let v = volume(e.id);
        records.push(ReportRecord {
            label: Some(e.id),
            volume_cm3: Some(v),
            percent_icv: percent(v),
            dice: dice.as_ref().map(|d| d.per_label[e.id as usize - 1]),
            within_population: flag(&e.name, v),
            ..ReportRecord::empty(RecordKind::Volume, e.name.clone())
        });
    }
    let whole: f64 = tax.entries().iter().map(|e| volume(e.id)).sum();
    records.push(ReportRecord {
        volume_cm3: Some(whole),
        percent_icv: percent(whole),
        dice: dice.as_ref().map(|d| d.whole_cerebellum),
        within_population: flag("Whole cerebellum", whole),
        ..ReportRecord::empty(RecordKind::WholeCerebellum, "Whole cerebellum")
    });
    for class in LobuleClass::ALL {
        let l = volume(tax.lookup(Hemisphere::Left, class));
        let r = volume(tax.lookup(Hemisphere::Right, class));
        records.push(ReportRecord {
            asymmetry_index: Some(asymmetry_index(l, r)),
            ..ReportRecord::empty(RecordKind::Asymmetry, class.name())
        });
    }
    if let Some(i) = icv_cm3 {
        records.push(ReportRecord { volume_cm3: Some(i), ..ReportRecord::empty(RecordKind::Icv, "ICV") });
    }
    Ok(Report { case: inp.case.to_string(), records })
}

impl Report {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn from_csv(case: &str, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r.deserialize().collect::<std::result::Result<Vec<ReportRecord>, _>>()?;
        Ok(Self { case: case.to_string(), records })
    }

    pub fn records_of(&self, kind: RecordKind) -> impl Iterator<Item = &ReportRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.p$}"));
        let mut s = String::new();
        let _ = writeln!(s, "Cerebellum report: {}\n", self.case);
        let _ = writeln!(s, "{:<28} {:>10} {:>8} {:>7}  population", "structure", "cm3", "%ICV", "dice");
        for r in self.records.iter().filter(|r| matches!(r.kind, RecordKind::Volume | RecordKind::WholeCerebellum)) {
            let pop = match r.within_population {
                Some(true) => "inside",
                Some(false) => "OUTSIDE",
                None => "-",
            };
            let _ = writeln!(
                s,
                "{:<28} {:>10} {:>8} {:>7}  {pop}",
                r.structure,
                opt(r.volume_cm3, 3),
                opt(r.percent_icv, 3),
                opt(r.dice, 4)
            );
        }
        let _ = writeln!(s, "\nAsymmetry index, 200(R-L)/(R+L):");
        for r in self.records_of(RecordKind::Asymmetry) {
            let _ = writeln!(s, "  {:<24} {:>8}", r.structure, opt(r.asymmetry_index, 2));
        }
        if let Some(icv) = self.records_of(RecordKind::Icv).next() {
            let _ = writeln!(s, "\nICV: {} cm3", opt(icv.volume_cm3, 2));
        }
        s
    }

    /// Writes `report.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv()?)?;
        fs::write(dir.join("report.txt"), self.to_text())?;
        Ok(())
    }
}

pub fn check_bounds(report: &Report) -> Result<()> {
    for r in &report.records {
        if r.volume_cm3.is_some_and(|v| v < 0.0) {
            bail!("negative volume for {}", r.structure);
        }
        if r.asymmetry_index.is_some_and(|a| !(-200.0..=200.0).contains(&a)) {
            bail!("asymmetry index out of range for {}", r.structure);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lobeseg_core::volgrid::GridGeometry;

    fn grid(labels: Vec<u8>) -> LabelGrid {
        let n = labels.len();
        LabelGrid::new(GridGeometry::with_dims([n, 1, 1]), labels).unwrap()
    }

    #[test]
    fn asymmetry_sign_and_range() {
        assert_eq!(asymmetry_index(2.0, 2.0), 0.0);
        assert_eq!(asymmetry_index(0.0, 5.0), 200.0);
        assert_eq!(asymmetry_index(5.0, 0.0), -200.0);
        assert!(asymmetry_index(1.0, 3.0) > 0.0);
    }

    #[test]
    fn report_schema_and_round_trip() {
        let tax = LabelTaxonomy::cerebellum();
        let vi_l = tax.lookup(Hemisphere::Left, LobuleClass::VI);
        let vi_r = tax.lookup(Hemisphere::Right, LobuleClass::VI);
        let labels = grid(vec![0, vi_l, vi_l, vi_r, 0, 0]);
        let icv = grid(vec![1; 6]);
        let rep = build_report(&ReportInputs { case: "c", labels: &labels, icv: Some(&icv), truth: Some(&labels), population: None, age: None }).unwrap();
        assert_eq!(rep.records_of(RecordKind::Volume).count(), 26);
        assert_eq!(rep.records_of(RecordKind::WholeCerebellum).count(), 1);
        assert_eq!(rep.records_of(RecordKind::Asymmetry).count(), 13);
        let whole = rep.records_of(RecordKind::WholeCerebellum).next().unwrap();
        assert!((whole.percent_icv.unwrap() - 50.0).abs() < 1e-12);
        let vi = rep.records.iter().find(|r| r.kind == RecordKind::Asymmetry && r.structure == LobuleClass::VI.name()).unwrap();
        assert!((vi.asymmetry_index.unwrap() - asymmetry_index(2.0, 1.0)).abs() < 1e-12);
        let back = Report::from_csv("c", &rep.to_csv().unwrap()).unwrap();
        assert_eq!(back, rep);
        check_bounds(&rep).unwrap();
    }

    #[test]
    fn population_threshold() {
        let tax = LabelTaxonomy::cerebellum();
        let id = tax.lookup(Hemisphere::Left, LobuleClass::VI);
        let name = tax.name(id).to_string();
        let labels = grid(vec![id; 4]);
        let v = 4.0 * labels.geometry.voxel_volume_mm3() / 1000.0;
        let fit = |mean: f64| PolyFit { coefficients: vec![mean], center: 0.0, scale: 1.0, residual_std: 0.001 };
        let flag_for = |mean: f64, age: Option<f64>, with_model: bool| {
            let model = PopulationModel { structures: [(name.clone(), fit(mean))].into_iter().collect() };
            let rep = build_report(&ReportInputs {
                case: "c",
                labels: &labels,
                icv: None,
                truth: None,
                population: with_model.then_some(&model),
                age,
            })
            .unwrap();
            rep.records.iter().find(|r| r.label == Some(id)).unwrap().within_population
        };
        assert_eq!(flag_for(v, Some(30.0), true), Some(true));
        assert_eq!(flag_for(v - 0.003, Some(30.0), true), Some(false));
        assert_eq!(flag_for(v, Some(30.0), false), None);
        assert_eq!(flag_for(v, None, true), None);
    }
}
