use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use lobeseg::report::{build_report, PopulationModel, ReportInputs};
use lobeseg::{atlas, experiments, library, segment, train, RunConfig};
use lobeseg_core::volgrid::read_label_grid;

#[derive(Parser)]
#[command(name = "lobeseg", version, about = "Cerebellum lobule segmentation pipeline")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom library.
    Phantom,
    /// Fuse a subject-specific atlas for every library case.
    Fuse,
    /// Train both architectures and both stages for each configured variant.
    Train,
    /// Segment one library case with the configured modes.
    Segment {
        #[arg(long)]
        case: String,
    },
    /// Evaluate every architecture × channel × resolution cell on the test split.
    Ablate,
    /// Evaluate trained variants under the perturbation sweep and bad T2.
    Robustness,
    /// Write a volumetric report for a label volume.
    Report {
        /// Label volume (.g3d).
        #[arg(long)]
        labels: PathBuf,
        /// Intracranial mask (.g3d) for ICV normalisation.
        #[arg(long)]
        icv: Option<PathBuf>,
        /// Ground-truth labels (.g3d) for per-label Dice.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Subject age, used with --population.
        #[arg(long)]
        age: Option<f64>,
        /// Population model JSON mapping structure names to fitted curves.
        #[arg(long)]
        population: Option<PathBuf>,
        /// Output directory for report.csv and report.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "subject")]
        name: String,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    lobeseg::init_threads(cli.threads)?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    match cli.cmd {
        Cmd::Phantom => {
            cfg.validate()?;
            let m = library::write_library(&cfg.library_dir(), cfg.library.subjects, cfg.seed, &cfg.library.phantom)?;
            println!("{} cases ({} train / {} val / {} test) in {}", m.records.len(), m.split.train.len(), m.split.val.len(), m.split.test.len(), cfg.library_dir().display());
        }
        Cmd::Fuse => {
            let dir = cfg.library_dir();
            let m = library::load_manifest(&dir)?;
            let csv = cfg.output_dir().join("atlas_quality.csv");
            let rows = atlas::fuse_library(&dir, &m, &cfg.fusion, &csv)?;
            let mean = rows.iter().map(|r| r.atlas_quality).sum::<f64>() / rows.len().max(1) as f64;
            println!("fused {} atlases, mean quality {mean:.4}; table in {}", rows.len(), csv.display());
        }
        Cmd::Train => {
            let s = train::run(&cfg)?;
            for j in &s.jobs {
                println!("{} {} stage {}: {} params, loss {:?} -> {:?}, {:.1}s", j.variant, j.network, j.stage, j.parameters, j.first_loss, j.last_loss, j.seconds);
            }
            println!("total {:.1}s", s.total_seconds);
        }
        Cmd::Segment { case } => {
            let out = segment::cmd_segment(&cfg, &case)?;
            println!("{case}: mean structure Dice {:.4}, whole cerebellum {:.4}; outputs in {}", out.dice.mean_structure, out.dice.whole_cerebellum, out.dir.display());
        }
        Cmd::Ablate => {
            let rows = experiments::cmd_ablate(&cfg)?;
            for r in rows {
                println!("{:<8} {:<12} {:<4} {:<22} {}", r.architecture, r.channels, r.resolution, r.metric, r.mean.map_or("absent".into(), |m| format!("{m:.4}")));
            }
        }
        Cmd::Robustness => {
            let rows = experiments::cmd_robustness(&cfg)?;
            for r in rows {
                println!(
                    "{:<8} {:<16} {:<28} {:>8} {:>8}",
                    r.architecture,
                    format!("{}_{}", r.channels, r.resolution),
                    r.perturbation,
                    r.mean_dice.map_or("absent".into(), |m| format!("{m:.4}")),
                    r.delta_mean_dice.map_or("-".into(), |d| format!("{d:+.4}"))
                );
            }
        }
        Cmd::Report { labels, icv, truth, age, population, out, name } => {
            let labels = read_label_grid(&labels)?;
            let icv = icv.map(read_label_grid).transpose()?;
            let truth = truth.map(read_label_grid).transpose()?;
            let population = population.map(|p| PopulationModel::load(&p)).transpose()?;
            let report = build_report(&ReportInputs {
                case: &name,
                labels: &labels,
                icv: icv.as_ref(),
                truth: truth.as_ref(),
                population: population.as_ref(),
                age,
            })?;
            report.write(&out)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}
