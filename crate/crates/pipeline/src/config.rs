//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lobeseg_core::augment::{AugmentRanges, PerturbKind, PerturbSpec};
use lobeseg_core::fusion::FusionConfig;
use lobeseg_core::phantom::PhantomSpec;
use lobeseg_nn::{NetworkKind, NetworkSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    T1,
    T1T2,
    T1T2Atlas,
}

impl ChannelMode {
    pub const ALL: [ChannelMode; 3] = [ChannelMode::T1, ChannelMode::T1T2, ChannelMode::T1T2Atlas];

    pub fn channels(self) -> usize {
        match self {
            ChannelMode::T1 => 1,
            ChannelMode::T1T2 => 2,
            ChannelMode::T1T2Atlas => 3,
        }
    }

    pub fn uses_t2(self) -> bool {
        self != ChannelMode::T1
    }

    pub fn uses_atlas(self) -> bool {
        self == ChannelMode::T1T2Atlas
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::T1 => "t1",
            ChannelMode::T1T2 => "t1_t2",
            ChannelMode::T1T2Atlas => "t1_t2_atlas",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionMode {
    Full,
    Half,
}

impl ResolutionMode {
    pub const ALL: [ResolutionMode; 2] = [ResolutionMode::Full, ResolutionMode::Half];

    pub fn factor(self) -> usize {
        match self {
            ResolutionMode::Full => 1,
            ResolutionMode::Half => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResolutionMode::Full => "full",
            ResolutionMode::Half => "half",
        }
    }
}

/// A trained model family: channel mode plus resolution mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub channels: ChannelMode,
    #[serde(default = "full")]
    pub resolution: ResolutionMode,
}

fn full() -> ResolutionMode {
    ResolutionMode::Full
}

impl Variant {
    pub fn new(channels: ChannelMode, resolution: ResolutionMode) -> Self {
        Self { channels, resolution }
    }

    pub fn dir_name(&self) -> String {
        format!("{}_{}", self.channels.name(), self.resolution.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub library: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { library: "library".into(), checkpoints: "checkpoints".into(), outputs: "outputs".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryConfig {
    /// Generated subjects; each is also stored mirrored.
    pub subjects: usize,
    pub phantom: PhantomSpec,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self { subjects: 10, phantom: PhantomSpec::default() }
    }
}

/// Layer widths shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    pub dpn_filters: usize,
    pub unet_base_filters: usize,
    pub levels: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
}

impl Default for Widths {
    fn default() -> Self {
        Self { dpn_filters: 8, unet_base_filters: 4, levels: 4, dropout_rate: 0.25, bn_momentum: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Chance of one random intensity perturbation per primary draw.
    pub intensity_probability: f64,
    /// Chance of an elastic deformation per primary draw.
    pub elastic_probability: f64,
    pub ranges: AugmentRanges,
    /// Extended-set copies per training case for the Adamax phase.
    pub extended_copies: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { intensity_probability: 0.5, elastic_probability: 0.3, ranges: AugmentRanges::default(), extended_copies: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub library: LibraryConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub widths: Widths,
    pub augment: AugmentConfig,
    /// Channel mode used by `segment`.
    pub channel_mode: ChannelMode,
    /// Resolution mode used by `segment`.
    pub resolution_mode: ResolutionMode,
    /// Variants built by `train`.
    pub variants: Vec<Variant>,
    /// Perturbations evaluated by `robustness` (bad T2 is always added).
    pub perturbations: Vec<PerturbSpec>,
    /// Directory relative paths are resolved against; the config file's
    /// directory when loaded from disk.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            library: LibraryConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig { adam_epochs: 300, adamax_epochs: 150, learning_rate: 3e-3, seed: 1, mix_probability: 0.5 },
            widths: Widths::default(),
            augment: AugmentConfig::default(),
            channel_mode: ChannelMode::T1T2Atlas,
            resolution_mode: ResolutionMode::Full,
            variants: vec![
                Variant::new(ChannelMode::T1T2Atlas, ResolutionMode::Full),
                Variant::new(ChannelMode::T1T2, ResolutionMode::Full),
            ],
            perturbations: vec![
                PerturbSpec::new(PerturbKind::Gamma { gamma: 1.0 }, 0),
                PerturbSpec::new(PerturbKind::Gamma { gamma: 1.4 }, 1),
                PerturbSpec::new(PerturbKind::BiasField { amplitude: 0.3, order: 3 }, 2),
                PerturbSpec::new(PerturbKind::Blur { sigma: 1.0 }, 3),
                PerturbSpec::new(PerturbKind::Ghosting { count: 2, amplitude: 0.2, axis: 1 }, 4),
                PerturbSpec::new(PerturbKind::Anisotropy { axis: 2, factor: 2 }, 5),
            ],
            root: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.root.as_os_str().is_empty() {
            cfg.root = PathBuf::from(".");
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Overrides the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.train.validate()?;
        self.library.phantom.validate()?;
        let f = self.library.phantom.dims;
        for v in &self.variants {
            let div = (1usize << (self.widths.levels.max(1) - 1)) * v.resolution.factor();
            if f.iter().any(|d| d % div != 0) {
                bail!("phantom dims {f:?} not divisible by {div} for variant {}", v.dir_name());
            }
        }
        for p in &self.perturbations {
            p.validate(&self.library.phantom.geometry())?;
        }
        for p in [self.augment.intensity_probability, self.augment.elastic_probability] {
            if !(0.0..=1.0).contains(&p) {
                bail!("augmentation probability {p} outside [0, 1]");
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn library_dir(&self) -> PathBuf {
        self.resolve(&self.paths.library)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoints)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.outputs)
    }

    pub fn network_spec(&self, kind: NetworkKind, channels: ChannelMode, out_classes: usize) -> NetworkSpec {
        NetworkSpec {
            dpn_filters: self.widths.dpn_filters,
            unet_base_filters: self.widths.unet_base_filters,
            levels: self.widths.levels,
            dropout_rate: self.widths.dropout_rate,
            bn_momentum: self.widths.bn_momentum,
            ..NetworkSpec::new(kind, channels.channels(), out_classes)
        }
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[train]\nadam_epochs = 0\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.adam_epochs, 0);
        assert_eq!(cfg.train.adamax_epochs, 1000);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.library.phantom.dims = [40, 40, 40];
        cfg.variants.push(Variant::new(ChannelMode::T1, ResolutionMode::Half));
        assert!(cfg.validate().is_err());
    }
}
