use std::fs;
use std::path::Path;

use lobeseg::config::{ChannelMode, ResolutionMode, RunConfig, Variant};
use lobeseg::experiments::{cmd_ablate, cmd_robustness, CellStatus, ABLATION_METRICS, CLEAN};
use lobeseg::report::{build_report, RecordKind, Report, ReportInputs};
use lobeseg::segment::{case_volumes, cmd_segment, load_cascade, predict, with_atlas};
use lobeseg::train::{self, checkpoint_path, initial_network, Stage, KINDS};
use lobeseg::{atlas, library};
use lobeseg_core::augment::{PerturbKind, PerturbSpec};
use lobeseg_core::phantom::{generate, PhantomSpec};
use lobeseg_core::volgrid::{mirror_lr, LabelTaxonomy};
use lobeseg_nn::{checkpoint, NetworkKind};

fn tiny(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
seed = 7
variants = [{ channels = "t1_t2_atlas" }, { channels = "t1_t2" }]
perturbations = [{ kind = "gamma", gamma = 1.0, seed = 0 }]
[library]
subjects = 6
[library.phantom]
dims = [16, 16, 16]
[train]
adam_epochs = 3
adamax_epochs = 2
[widths]
levels = 3
"#,
    )
    .unwrap();
    cfg.root = root.to_path_buf();
    cfg
}

fn prepared(root: &Path) -> RunConfig {
    let cfg = tiny(root);
    let m = library::write_library(&cfg.library_dir(), cfg.library.subjects, cfg.seed, &cfg.library.phantom).unwrap();
    atlas::fuse_library(&cfg.library_dir(), &m, &cfg.fusion, &cfg.output_dir().join("atlas_quality.csv")).unwrap();
    cfg
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.train.adam_epochs = 0;
    cfg.train.adamax_epochs = 0;
    cfg.variants.truncate(1);
    train::run(&cfg).unwrap();
    let v = cfg.variants[0];
    for kind in KINDS {
        for stage in Stage::BOTH {
            let (net, _) = checkpoint::load(&checkpoint_path(&cfg.checkpoint_dir(), &v, kind, stage)).unwrap();
            let init = initial_network(&cfg, &v, kind, stage).unwrap();
            assert_eq!(net.store.params, init.store.params);
            assert_eq!(net.store.buffers, init.store.buffers);
        }
    }
}

#[test]
fn training_lowers_the_loss_and_logs_every_step() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.train.adam_epochs = 30;
    cfg.train.adamax_epochs = 10;
    cfg.widths.dropout_rate = 0.0;
    cfg.variants.truncate(1);
    let s = train::run(&cfg).unwrap();
    assert_eq!(s.jobs.len(), 4);
    let rows: Vec<train::LossRow> = lobeseg::experiments::read_csv(&cfg.output_dir().join("loss_curve.csv")).unwrap();
    assert_eq!(rows.len(), 4 * 40);
    assert!(rows.iter().any(|r| r.optimizer == "adamax"));
    for job in &cfg.variants {
        for kind in KINDS {
            for stage in Stage::BOTH {
                let curve: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.variant == job.dir_name() && r.network == kind.name() && r.stage == stage.number())
                    .map(|r| r.loss)
                    .collect();
                let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
                let tail: f64 = curve[curve.len() - 5..].iter().sum::<f64>() / 5.0;
                assert!(tail < head, "{kind:?} stage {}: {head} -> {tail}", stage.number());
            }
        }
    }
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    cfg.train.learning_rate = 1e30;
    cfg.train.adam_epochs = 20;
    cfg.variants.truncate(1);
    let err = train::run(&cfg).unwrap_err();
    let nf = err.downcast_ref::<train::NonFiniteLoss>().expect("non-finite loss error");
    let (net, _) = checkpoint::load(&nf.path).unwrap();
    assert!(nf.step > 0);
    assert!(net.store.buffers.iter().all(|b| b.is_finite()));
}

#[test]
fn segment_reports_errors_and_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    let case = "case005m";
    let err = cmd_segment(&cfg, case).err().unwrap();
    assert!(format!("{err:#}").contains("missing"), "{err:#}");

    train::run(&cfg).unwrap();
    let out = cmd_segment(&cfg, case).unwrap();
    assert_eq!(out.report.records_of(RecordKind::Volume).count(), 26);
    assert_eq!(out.report.records_of(RecordKind::WholeCerebellum).count(), 1);
    for f in ["labels.g3d", "report.csv", "report.txt", "dice.csv", "run_manifest.txt"] {
        assert!(out.dir.join(f).exists(), "{f}");
    }
    let back = Report::from_csv(case, &fs::read_to_string(out.dir.join("report.csv")).unwrap()).unwrap();
    assert_eq!(back, out.report);

    // a two-channel checkpoint placed where three channels are expected
    let atlas_variant = Variant::new(ChannelMode::T1T2Atlas, ResolutionMode::Full);
    let plain = Variant::new(ChannelMode::T1T2, ResolutionMode::Full);
    let dst = checkpoint_path(&cfg.checkpoint_dir(), &atlas_variant, NetworkKind::Dpn, Stage::Hemisphere);
    fs::copy(checkpoint_path(&cfg.checkpoint_dir(), &plain, NetworkKind::Dpn, Stage::Hemisphere), &dst).unwrap();
    let err = load_cascade(&cfg.checkpoint_dir(), &atlas_variant, NetworkKind::Dpn).err().unwrap();
    assert!(format!("{err:#}").contains("input channels"), "{err:#}");

    let mut no_lib = cfg.clone();
    no_lib.paths.library = tmp.path().join("nowhere");
    assert!(cmd_segment(&no_lib, case).is_err());
}

#[test]
fn harness_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = prepared(tmp.path());
    train::run(&cfg).unwrap();

    let rows = cmd_ablate(&cfg).unwrap();
    assert_eq!(rows.len(), 3 * 3 * 2 * ABLATION_METRICS.len());
    let ok: Vec<_> = rows.iter().filter(|r| r.status == CellStatus::Ok).collect();
    assert_eq!(ok.len(), 2 * 3 * ABLATION_METRICS.len());
    assert!(ok.iter().all(|r| r.resolution == "full" && r.channels != "t1"));
    assert!(rows.iter().filter(|r| r.status == CellStatus::Absent).all(|r| r.mean.is_none()));
    let on_disk: Vec<lobeseg::experiments::AblationRow> = lobeseg::experiments::read_csv(&cfg.output_dir().join("ablation.csv")).unwrap();
    assert_eq!(on_disk, rows);

    let rows = cmd_robustness(&cfg).unwrap();
    for v in &cfg.variants {
        for arch in ["dpn", "unet", "ensemble"] {
            let of = |p: &str| rows.iter().find(|r| r.channels == v.channels.name() && r.architecture == arch && r.perturbation == p).unwrap();
            let clean = of(CLEAN);
            let identity = of(&PerturbSpec::new(PerturbKind::Gamma { gamma: 1.0 }, 0).label());
            assert!((identity.mean_dice.unwrap() - clean.mean_dice.unwrap()).abs() <= 1e-6);
            assert!(of("bad_t2").delta_mean_dice.is_some());
        }
    }
}

#[test]
fn half_resolution_scores_downsampled_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = prepared(tmp.path());
    let half = Variant::new(ChannelMode::T1T2, ResolutionMode::Half);
    cfg.variants = vec![half];
    cfg.widths.levels = 2;
    train::run(&cfg).unwrap();
    let dir = cfg.library_dir();
    let m = library::load_manifest(&dir).unwrap();
    let case = library::load_case(&dir, &m, m.split.test[0]).unwrap();
    let bank = atlas::TemplateBank::load(&dir, &m).unwrap();
    let v = with_atlas(case_volumes(&case), &half, &bank, &m, &case, &cfg).unwrap();
    let models = vec![load_cascade(&cfg.checkpoint_dir(), &half, NetworkKind::Unet).unwrap()];
    let (run, truth) = predict(&models, &v, &half, "h").unwrap();
    assert_eq!(run.labels.dims(), [8, 8, 8]);
    assert_eq!(truth.labels.dims(), [8, 8, 8]);
}

#[test]
fn report_volumes_match_a_voxel_count() {
    let p = generate(&PhantomSpec { seed: 3, ..PhantomSpec::default() }).unwrap();
    let rep = build_report(&ReportInputs { case: "p", labels: &p.labels, icv: Some(&p.icv_mask), truth: None, population: None, age: None }).unwrap();
    let voxel_cm3 = p.labels.geometry.voxel_volume_mm3() / 1000.0;
    let mut sum = 0.0;
    for r in rep.records_of(RecordKind::Volume) {
        let id = r.label.unwrap();
        let mut n = 0usize;
        for &l in &p.labels.labels {
            if l == id {
                n += 1;
            }
        }
        assert_eq!(r.volume_cm3.unwrap(), n as f64 * voxel_cm3);
        sum += r.volume_cm3.unwrap();
    }
    let whole = rep.records_of(RecordKind::WholeCerebellum).next().unwrap().volume_cm3.unwrap();
    let fg = p.labels.labels.iter().filter(|&&l| l != 0).count() as f64 * voxel_cm3;
    assert!((sum - whole).abs() < 1e-9 && (whole - fg).abs() < 1e-9);
}

#[test]
fn asymmetry_of_symmetric_and_mirrored_phantoms() {
    let tax = LabelTaxonomy::cerebellum();
    let ai = |labels| {
        let rep = build_report(&ReportInputs { case: "p", labels, icv: None, truth: None, population: None, age: None }).unwrap();
        rep.records_of(RecordKind::Asymmetry).map(|r| r.asymmetry_index.unwrap()).collect::<Vec<_>>()
    };
    let ideal = generate(&PhantomSpec::ideal(48)).unwrap();
    assert!(ai(&ideal.labels).iter().all(|a| a.abs() <= 1.0), "{:?}", ai(&ideal.labels));

    let p = generate(&PhantomSpec { seed: 4, ..PhantomSpec::default() }).unwrap();
    let m = mirror_lr(&p.t1, &p.labels, &tax).unwrap().1;
    for (a, b) in ai(&p.labels).iter().zip(ai(&m)) {
        assert!((a + b).abs() < 1e-9, "{a} vs {b}");
    }
}
