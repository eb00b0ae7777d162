//! Experiment configuration files.
//!
//! A configuration is a TOML document with the sections `[dataset]`,
//! `[model]`, `[loss]`, `[arcface]`, `[optimizer]`, `[train]`, `[tps]`,
//! `[perceptual]` and `[output]`. Only `dataset.kind`, `dataset.root` and
//! `output.dir` are required; every other key has a default, and the part
//! count and loss weights default per dataset kind. Unknown keys are
//! rejected. Relative paths resolve against the directory holding the file.
//!
//! ```toml
//! [dataset]
//! kind = "voc-sheep"
//! root = "data/VOCdevkit/VOC2012"
//!
//! [train]
//! batch_size = 32
//! epochs = 30
//!
//! [output]
//! dir = "runs/sheep"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bottleneck::{MassNormalization, ModelDims};
use crate::error::{Error, Result};
use crate::losses::{ArcFaceConfig, LossWeights};
use crate::networks::NetworkConfig;
use crate::optim::AdamConfig;
use crate::tps::TpsConfig;

/// Object categories of the segmentation benchmark that the experiments use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VocCategory {
    Aeroplane,
    Bus,
    Car,
    Cow,
    Horse,
    Motorbike,
    Sheep,
}

impl VocCategory {
    pub const ALL: [VocCategory; 7] = [
        Self::Aeroplane,
        Self::Bus,
        Self::Car,
        Self::Cow,
        Self::Horse,
        Self::Motorbike,
        Self::Sheep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Aeroplane => "aeroplane",
            Self::Bus => "bus",
            Self::Car => "car",
            Self::Cow => "cow",
            Self::Horse => "horse",
            Self::Motorbike => "motorbike",
            Self::Sheep => "sheep",
        }
    }

    /// Index in the 20-class label palette (0 is background).
    pub fn class_index(self) -> u8 {
        match self {
            Self::Aeroplane => 1,
            Self::Bus => 6,
            Self::Car => 7,
            Self::Cow => 10,
            Self::Horse => 13,
            Self::Motorbike => 14,
            Self::Sheep => 17,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "aeroplane" | "aero" => Self::Aeroplane,
            "bus" => Self::Bus,
            "car" => Self::Car,
            "cow" => Self::Cow,
            "horse" => Self::Horse,
            "motorbike" | "motor" => Self::Motorbike,
            "sheep" => Self::Sheep,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DatasetKind {
    CelebaWild,
    AflwUnaligned,
    CubCategory,
    VocCategory(VocCategory),
    Toy,
}

impl DatasetKind {
    /// Default `(K, loss weights)` for this kind.
    pub fn defaults(self) -> (usize, LossWeights) {
        use VocCategory::*;
        match self {
            Self::CelebaWild | Self::AflwUnaligned => (8, LossWeights::new(1.5, 1.5, 0.5, 1.0)),
            Self::CubCategory => (4, LossWeights::new(1.5, 1.5, 0.3, 1.0)),
            Self::VocCategory(c) => (
                4,
                match c {
                    Car => LossWeights::new(1.5, 1.0, 0.3, 0.1),
                    Bus => LossWeights::new(1.5, 1.0, 0.5, 0.1),
                    Horse | Aeroplane => LossWeights::new(1.5, 3.0, 0.3, 0.1),
                    Motorbike => LossWeights::new(1.0, 1.0, 0.3, 0.1),
                    Cow => LossWeights::new(1.5, 2.0, 0.3, 0.1),
                    Sheep => LossWeights::new(1.5, 2.0, 0.5, 0.1),
                },
            ),
            Self::Toy => (4, TOY_LOSS_WEIGHTS),
        }
    }

    pub fn default_image_size(self) -> usize {
        match self {
            Self::Toy => 64,
            _ => 128,
        }
    }

    pub fn has_landmarks(self) -> bool {
        !matches!(self, Self::VocCategory(_))
    }

    pub fn has_masks(self) -> bool {
        matches!(self, Self::VocCategory(_) | Self::Toy)
    }
}

/// Loss weights used for the synthetic dataset.
pub const TOY_LOSS_WEIGHTS: LossWeights = LossWeights::new(1.5, 1.5, 1.0, 1.0);

/// Default run length on the synthetic dataset.
pub const TOY_STEPS: u64 = 500;

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CelebaWild => f.write_str("celeba_wild"),
            Self::AflwUnaligned => f.write_str("aflw_unaligned"),
            Self::CubCategory => f.write_str("cub_category"),
            Self::VocCategory(c) => write!(f, "voc-{}", c.name()),
            Self::Toy => f.write_str("toy"),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "celeba" | "celeba_wild" => Self::CelebaWild,
            "aflw" | "aflw_unaligned" => Self::AflwUnaligned,
            "cub" | "cub_category" => Self::CubCategory,
            "toy" => Self::Toy,
            other => {
                let cat = other
                    .strip_prefix("voc-")
                    .or_else(|| other.strip_prefix("voc_"))
                    .and_then(VocCategory::parse);
                match cat {
                    Some(c) => Self::VocCategory(c),
                    None => {
                        return Err(Error::Config(format!(
                            "dataset.kind: unknown kind {s:?} (expected celeba, aflw, cub, toy or voc-<category>)"
                        )))
                    }
                }
            }
        })
    }
}

impl TryFrom<String> for DatasetKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DatasetKind> for String {
    fn from(k: DatasetKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Where a dataset lives and which subset of it to read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub split: Split,
    /// Category ids kept from the bird dataset (1-based).
    pub categories: Vec<u32>,
    /// Minimum face box area as a fraction of the image area.
    pub face_area_threshold: f64,
    pub image_size: usize,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            root: root.into(),
            split: Split::Train,
            categories: vec![1, 2, 3],
            face_area_threshold: 0.3,
            image_size: kind.default_image_size(),
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self { split, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.face_area_threshold) {
            return Err(Error::Config(format!(
                "dataset.face_area_threshold must lie in [0, 1], got {}",
                self.face_area_threshold
            )));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "dataset.image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Residual 34/18-layer trunks and the seven-block decoder.
    Full,
    /// Single-block trunks of width `base_width`.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub parts: usize,
    pub architecture: Architecture,
    pub base_width: usize,
    pub init_sigma: f64,
    pub mass_normalization: MassNormalization,
}

impl ModelConfig {
    pub fn network(&self) -> NetworkConfig {
        let mut net = match self.architecture {
            Architecture::Full => NetworkConfig::default(),
            Architecture::Compact => NetworkConfig::compact(self.base_width),
        };
        net.init_sigma = self.init_sigma;
        net
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` with an exact step count when set.
    pub steps: Option<u64>,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { batch_size: 32, epochs: 30, steps: None, seed: 0, checkpoint_every: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Pretrained VGG-19 feature weights (safetensors). When absent a fixed
    /// random extractor of `random_width` base channels is used.
    pub weights: Option<PathBuf>,
    pub random_width: usize,
    pub random_seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self { weights: None, random_width: 8, random_seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Defaults to `<dir>/checkpoints`.
    pub checkpoint_dir: PathBuf,
}

/// A fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub arcface: ArcFaceConfig,
    pub optimizer: AdamConfig,
    pub train: TrainSettings,
    pub tps: TpsConfig,
    pub perceptual: PerceptualConfig,
    pub output: OutputConfig,
}

impl TrainConfig {
    /// Defaults for `kind`, with data under `root` and outputs under `out`.
    pub fn for_dataset(kind: DatasetKind, root: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        let (parts, loss) = kind.defaults();
        let dir = out.into();
        let toy = kind == DatasetKind::Toy;
        let mut cfg = Self {
            dataset: DatasetSpec::new(kind, root),
            model: ModelConfig {
                parts,
                architecture: if toy { Architecture::Compact } else { Architecture::Full },
                base_width: 16,
                init_sigma: 0.01,
                mass_normalization: MassNormalization::default(),
            },
            loss,
            arcface: ArcFaceConfig::default(),
            optimizer: AdamConfig::default(),
            train: TrainSettings::default(),
            tps: TpsConfig::default(),
            perceptual: PerceptualConfig::default(),
            output: OutputConfig { checkpoint_dir: dir.join("checkpoints"), dir },
        };
        if toy {
            cfg.model.base_width = 8;
            cfg.model.mass_normalization = MassNormalization::Sum;
            cfg.optimizer.lr = 1e-3;
            cfg.train.batch_size = 8;
            cfg.train.steps = Some(TOY_STEPS);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.loss.validate()?;
        self.arcface.validate()?;
        self.optimizer.validate()?;
        self.tps.validate()?;
        if self.model.parts == 0 {
            return Err(Error::Config("model.parts must be positive".into()));
        }
        if self.model.base_width == 0 {
            return Err(Error::Config("model.base_width must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.train.steps == Some(0) {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        if self.perceptual.random_width == 0 {
            return Err(Error::Config("perceptual.random_width must be positive".into()));
        }
        self.model.network().validate()?;
        self.dims()?;
        Ok(())
    }

    pub fn dims(&self) -> Result<ModelDims> {
        self.model.network().dims(self.model.parts, self.dataset.image_size)
    }

    /// Digest of everything that determines the model and its objective.
    /// Paths, seeds and run length do not contribute, so a run can be
    /// resumed elsewhere or extended.
    pub fn hash(&self) -> String {
        let identity = serde_json::json!({
            "kind": self.dataset.kind,
            "image_size": self.dataset.image_size,
            "model": self.model,
            "loss": self.loss,
            "arcface": self.arcface,
            "optimizer": self.optimizer,
            "batch_size": self.train.batch_size,
            "tps": self.tps,
            "perceptual_width": self.perceptual.random_width,
            "perceptual_seed": self.perceptual.random_seed,
            "perceptual_pretrained": self.perceptual.weights.is_some(),
        });
        let digest = Sha256::digest(identity.to_string().as_bytes());
        hex::encode(digest)
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFile {
    dataset: RawDataset,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    loss: RawLoss,
    arcface: Option<toml::Table>,
    optimizer: Option<toml::Table>,
    train: Option<toml::Table>,
    tps: Option<toml::Table>,
    perceptual: Option<toml::Table>,
    output: RawOutput,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    kind: String,
    root: PathBuf,
    #[serde(default)]
    split: Split,
    categories: Option<Vec<u32>>,
    face_area_threshold: Option<f64>,
    image_size: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    parts: Option<usize>,
    architecture: Option<Architecture>,
    base_width: Option<usize>,
    init_sigma: Option<f64>,
    mass_normalization: Option<MassNormalization>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    rec: Option<f64>,
    cls: Option<f64>,
    fg: Option<f64>,
    bg: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: PathBuf,
    checkpoint_dir: Option<PathBuf>,
}

const REQUIRED_KEYS: [(&str, &str); 3] = [("dataset", "kind"), ("dataset", "root"), ("output", "dir")];

/// `base` with the keys present in `patch` replaced.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<toml::Table>) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(config_error)?;
    table.extend(patch.unwrap_or_default());
    toml::Value::Table(table).try_into().map_err(config_error)
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_config_str(&text, base)
}

/// Parses configuration text, resolving relative paths against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<TrainConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let missing: Vec<String> = REQUIRED_KEYS
        .iter()
        .filter(|(section, key)| table.get(*section).and_then(|s| s.get(*key)).is_none())
        .map(|(section, key)| format!("{section}.{key}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let raw: RawFile = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;

    let kind: DatasetKind = raw.dataset.kind.parse()?;
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    let mut cfg = TrainConfig::for_dataset(kind, resolve(raw.dataset.root), resolve(raw.output.dir));
    cfg.dataset.split = raw.dataset.split;
    if let Some(c) = raw.dataset.categories {
        cfg.dataset.categories = c;
    }
    if let Some(t) = raw.dataset.face_area_threshold {
        cfg.dataset.face_area_threshold = t;
    }
    if let Some(s) = raw.dataset.image_size {
        cfg.dataset.image_size = s;
    }
    let m = raw.model;
    cfg.model.parts = m.parts.unwrap_or(cfg.model.parts);
    cfg.model.architecture = m.architecture.unwrap_or(cfg.model.architecture);
    cfg.model.base_width = m.base_width.unwrap_or(cfg.model.base_width);
    cfg.model.init_sigma = m.init_sigma.unwrap_or(cfg.model.init_sigma);
    cfg.model.mass_normalization = m.mass_normalization.unwrap_or(cfg.model.mass_normalization);
    let l = raw.loss;
    cfg.loss = LossWeights::new(
        l.rec.unwrap_or(cfg.loss.rec),
        l.cls.unwrap_or(cfg.loss.cls),
        l.fg.unwrap_or(cfg.loss.fg),
        l.bg.unwrap_or(cfg.loss.bg),
    );
    cfg.arcface = overlay(&cfg.arcface, raw.arcface)?;
    cfg.optimizer = overlay(&cfg.optimizer, raw.optimizer)?;
    cfg.train = overlay(&cfg.train, raw.train)?;
    cfg.tps = overlay(&cfg.tps, raw.tps)?;
    cfg.perceptual = overlay(&cfg.perceptual, raw.perceptual)?;
    cfg.perceptual.weights = cfg.perceptual.weights.map(resolve);
    if let Some(c) = raw.output.checkpoint_dir {
        cfg.output.checkpoint_dir = resolve(c);
    }
    cfg.validate()?;
    Ok(cfg)
}
