//! Two-phase training of the stage networks with online augmentation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use lobeseg_core::augment::{apply_perturbation, apply_to_case, AugmentRanges, PerturbKind, PerturbSpec};
use lobeseg_core::volgrid::{LabelTaxonomy, STAGE1_CLASSES, STAGE2_CLASSES};
use lobeseg_nn::checkpoint;
use lobeseg_nn::optim::{self, Optimizer};
use lobeseg_nn::sampler::{Draw, MixedSampler};
use lobeseg_nn::{FeatureMap, Network, NetworkKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::data::{self, Volumes};
use crate::library::{self, LibraryManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Hemisphere,
    Lobule,
}

impl Stage {
    pub const BOTH: [Stage; 2] = [Stage::Hemisphere, Stage::Lobule];

    pub fn number(self) -> u8 {
        match self {
            Stage::Hemisphere => 1,
            Stage::Lobule => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Stage::Hemisphere => STAGE1_CLASSES,
            Stage::Lobule => STAGE2_CLASSES,
        }
    }
}

pub const KINDS: [NetworkKind; 2] = [NetworkKind::Dpn, NetworkKind::Unet];

pub fn checkpoint_path(dir: &Path, variant: &Variant, kind: NetworkKind, stage: Stage) -> PathBuf {
    dir.join(variant.dir_name()).join(format!("{}_stage{}.lfnn", kind.name(), stage.number()))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed for a (base, part...) tuple.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ p))
}

fn job_seed(cfg: &RunConfig, variant: &Variant, kind: NetworkKind, stage: Stage) -> u64 {
    derive_seed(
        cfg.train.seed,
        &[variant.channels as u64, variant.resolution as u64, kind as u64, stage.number() as u64],
    )
}

/// Applies perturbations in order. Elastic ones move every volume, including
/// labels and atlas, with the same field; intensity ones touch T1 and T2.
pub fn augment(v: &Volumes, specs: &[PerturbSpec]) -> Result<Volumes> {
    let mut out = v.clone();
    for spec in specs {
        let (ch, labels) = apply_to_case(&[out.t1.clone(), out.t2.clone()], &out.labels, spec)?;
        if spec.kind.is_geometric() {
            out.icv = apply_to_case(&[], &out.icv, spec)?.1;
            if let Some(a) = &out.atlas {
                out.atlas = Some(apply_to_case(&[], a, spec)?.1);
            }
        }
        let [t1, t2]: [_; 2] = ch.try_into().expect("two channels in, two out");
        out.t1 = t1;
        out.t2 = t2;
        out.labels = labels;
    }
    Ok(out)
}

/// Perturbations for one training draw. Geometric ones move every volume
/// together; intensity ones are drawn separately for each modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Draws {
    pub shared: Vec<PerturbSpec>,
    pub t1: Vec<PerturbSpec>,
    pub t2: Vec<PerturbSpec>,
}

pub fn augment_draws(v: &Volumes, d: &Draws) -> Result<Volumes> {
    let mut out = augment(v, &d.shared)?;
    for s in &d.t1 {
        out.t1 = apply_perturbation(&out.t1, s)?;
    }
    for s in &d.t2 {
        out.t2 = apply_perturbation(&out.t2, s)?;
    }
    Ok(out)
}

fn online_perturbations(cfg: &RunConfig, rng: &mut ChaCha8Rng, v: &Volumes) -> Draws {
    let a = &cfg.augment;
    let mut d = Draws::default();
    if rng.gen::<f64>() < a.elastic_probability {
        d.shared.push(a.ranges.sample_elastic(rng));
    }
    for channel in [&mut d.t1, &mut d.t2] {
        if rng.gen::<f64>() < a.intensity_probability {
            channel.push(a.ranges.sample_intensity(rng, &v.t1.geometry));
        }
    }
    d
}

/// The strongly perturbed copy that stands in for an additional dataset.
fn extended_perturbations(ranges: &AugmentRanges, seed: u64, v: &Volumes) -> Draws {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elastic = PerturbSpec::new(
        PerturbKind::Elastic { magnitude: ranges.elastic_magnitude_max, smoothness: ranges.elastic_smoothness },
        rng.gen(),
    );
    let g = v.t1.geometry;
    let mut pair = || vec![ranges.sample_intensity(&mut rng, &g), ranges.sample_intensity(&mut rng, &g)];
    let (t1, t2) = (pair(), pair());
    Draws { shared: vec![elastic], t1, t2 }
}

/// Network input and one-hot target for a stage.
pub fn stage_example(v: &Volumes, variant: &Variant, stage: Stage, tax: &LabelTaxonomy) -> Result<(FeatureMap<f32>, FeatureMap<f32>)> {
    let v = v.at_resolution(variant.resolution)?;
    let mut channels = data::input_channels(&v, variant.channels)?;
    let classes = match stage {
        Stage::Hemisphere => data::stage1_classes(&v.labels, tax),
        Stage::Lobule => {
            channels = data::gate(&channels, &v.labels.foreground_mask());
            data::stage2_classes(&v.labels, tax)
        }
    };
    Ok((FeatureMap::from_grids(&channels)?, data::target_map(&classes, stage.classes(), &v.labels)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub variant: String,
    pub network: String,
    pub stage: u8,
    pub step: usize,
    pub optimizer: String,
    pub source: String,
    pub case: usize,
    pub loss: f64,
    pub mean_dice: f64,
    pub bce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub variant: String,
    pub network: String,
    pub stage: u8,
    pub parameters: usize,
    pub steps: usize,
    pub seconds: f64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub threads: usize,
    pub total_seconds: f64,
    pub jobs: Vec<JobSummary>,
}

/// Error raised after the last good parameters were written.
#[derive(Debug, thiserror::Error)]
#[error("non-finite loss at step {step} of {job}; last good checkpoint kept at {path}")]
pub struct NonFiniteLoss {
    pub job: String,
    pub step: usize,
    pub path: PathBuf,
}

/// The seeded initialization `train_network` starts from.
pub fn initial_network(cfg: &RunConfig, variant: &Variant, kind: NetworkKind, stage: Stage) -> Result<Network<f32>> {
    let spec = cfg.network_spec(kind, variant.channels, stage.classes());
    Ok(Network::build(spec, derive_seed(job_seed(cfg, variant, kind, stage), &[0]))?)
}

/// Trains one network on `cases`. Writes the checkpoint to `out` and returns
/// the network with its loss rows.
pub fn train_network(
    cfg: &RunConfig,
    variant: &Variant,
    kind: NetworkKind,
    stage: Stage,
    cases: &[Volumes],
    out: &Path,
) -> Result<(Network<f32>, Vec<LossRow>, JobSummary)> {
    anyhow::ensure!(!cases.is_empty(), "no training cases");
    let tax = LabelTaxonomy::cerebellum();
    let seed = job_seed(cfg, variant, kind, stage);
    let mut net = initial_network(cfg, variant, kind, stage)?;
    let job = format!("{} {} stage {}", variant.dir_name(), kind.name(), stage.number());
    let tag = format!("variant={} network={} stage={} seed={}", variant.dir_name(), kind.name(), stage.number(), cfg.train.seed);
    let n = cases.len();
    let extended_len = n * cfg.augment.extended_copies.max(1);
    let mut sampler = MixedSampler::new(n, extended_len, cfg.train.mix_probability, derive_seed(seed, &[1]))?;
    let started = Instant::now();
    let mut rows = Vec::with_capacity(cfg.train.total_steps());
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }

    for step in 0..cfg.train.total_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, step as u64]));
        let optimizer = cfg.train.phase(step);
        if step == cfg.train.adam_epochs {
            net.store.reset_moments();
        }
        let (source, case, volumes) = match optimizer {
            Optimizer::Adam => {
                let i = rng.gen_range(0..n);
                let specs = online_perturbations(cfg, &mut rng, &cases[i]);
                ("primary", i, augment_draws(&cases[i], &specs)?)
            }
            Optimizer::Adamax => match sampler.draw() {
                Draw::Primary(i) => ("primary", i, cases[i].clone()),
                Draw::Extended(j) => {
                    let i = j % n;
                    let specs = extended_perturbations(&cfg.augment.ranges, derive_seed(seed, &[3, j as u64]), &cases[i]);
                    ("extended", i, augment_draws(&cases[i], &specs)?)
                }
            },
        };
        let (x, y) = stage_example(&volumes, variant, stage, &tax)?;
        let buffers = net.store.buffers.clone();
        match optim::train_step(&mut net, &x, &y, optimizer, cfg.train.learning_rate, rng.gen()) {
            Ok(parts) => {
                if step % 25 == 0 {
                    log::info!("{job}: step {step} loss {:.4} dice {:.4}", parts.value, parts.mean_dice);
                }
                rows.push(LossRow {
                    variant: variant.dir_name(),
                    network: kind.name().to_string(),
                    stage: stage.number(),
                    step,
                    optimizer: format!("{optimizer:?}").to_lowercase(),
                    source: source.to_string(),
                    case,
                    loss: parts.value,
                    mean_dice: parts.mean_dice,
                    bce: parts.bce,
                });
            }
            Err(e @ (lobeseg_nn::NnError::NonFinite(_) | lobeseg_nn::NnError::NonFiniteGradient(_))) => {
                net.store.buffers = buffers;
                checkpoint::save(out, &net, &tag)?;
                return Err(anyhow::Error::new(NonFiniteLoss { job, step, path: out.to_path_buf() }).context(e));
            }
            Err(e) => return Err(e.into()),
        }
    }
    checkpoint::save(out, &net, &tag).with_context(|| format!("writing {}", out.display()))?;
    let summary = JobSummary {
        variant: variant.dir_name(),
        network: kind.name().to_string(),
        stage: stage.number(),
        parameters: net.param_count(),
        steps: cfg.train.total_steps(),
        seconds: started.elapsed().as_secs_f64(),
        first_loss: rows.first().map(|r| r.loss),
        last_loss: rows.last().map(|r| r.loss),
    };
    Ok((net, rows, summary))
}

/// Raw training volumes, with atlases when any variant needs them.
pub fn load_training_cases(cfg: &RunConfig, manifest: &LibraryManifest) -> Result<Vec<Volumes>> {
    let dir = cfg.library_dir();
    let need_atlas = cfg.variants.iter().any(|v| v.channels.uses_atlas());
    manifest
        .split
        .train
        .iter()
        .map(|&i| {
            let c = library::load_case(&dir, manifest, i)?;
            let atlas = if need_atlas { Some(library::load_atlas(&dir, &c.name)?) } else { None };
            Ok(Volumes { t1: c.t1, t2: c.t2, labels: c.labels, icv: c.icv, atlas })
        })
        .collect()
}

/// Trains every configured variant, both architectures and both stages.
pub fn run(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = library::load_manifest(&cfg.library_dir())?;
    let cases = load_training_cases(cfg, &manifest)?;
    let ck = cfg.checkpoint_dir();
    let outputs = cfg.output_dir();
    fs::create_dir_all(&outputs)?;
    let started = Instant::now();
    let mut writer = csv::Writer::from_path(outputs.join("loss_curve.csv"))?;
    let mut jobs = Vec::new();
    for variant in &cfg.variants {
        for kind in KINDS {
            for stage in Stage::BOTH {
                let path = checkpoint_path(&ck, variant, kind, stage);
                let (_, rows, summary) = train_network(cfg, variant, kind, stage, &cases, &path)?;
                for r in &rows {
                    writer.serialize(r)?;
                }
                writer.flush()?;
                log::info!("trained {} in {:.1}s", path.display(), summary.seconds);
                jobs.push(summary);
            }
        }
    }
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        threads: lobeseg_core::par::current_threads(),
        total_seconds: started.elapsed().as_secs_f64(),
        jobs,
    };
    fs::write(outputs.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
