//! Run configuration: one TOML file with `[model]`, `[train]` and `[data]`
//! sections, then named ablation presets, then `key.path=value` overrides.
//! Unknown keys are errors at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::kitti::{LabelMap, SynthConfig};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub train_seed: u64,
    pub val_scenes: usize,
    pub val_seed: u64,
    pub synth: SynthConfig,
    /// Dataset directories (`velodyne/`, `voxels/`, `labels/`); when set they
    /// replace the synthetic scenes.
    pub kitti_train: Option<PathBuf>,
    pub kitti_val: Option<PathBuf>,
    /// Raw dataset id to train id.
    pub learning_map: Option<LabelMap>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 4,
            train_seed: 0,
            val_scenes: 2,
            val_seed: 1000,
            synth: SynthConfig::default(),
            kitti_train: None,
            kitti_val: None,
            learning_map: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("override `{0}` is not KEY=VALUE")]
    Override(String),
    #[error("override `{key}`: `{segment}` is not a table")]
    NotATable { key: String, segment: String },
    #[error("unknown ablation preset `{0}` (expected one of {list})", list = Ablation::NAMES.join(", "))]
    Ablation(String),
    #[error(transparent)]
    Model(#[from] crate::model::ConfigError),
}

/// Rows of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// 2D only, completion cross-entropy.
    TwoDCe,
    /// 2D only, completion cross-entropy + lovasz.
    TwoDCeLvz,
    /// 3D branch with full segmentation supervision, completion cross-entropy.
    FullSegLvz,
    /// Unsupervised 3D encoder, completion cross-entropy.
    EncOnlyCe,
    /// Unsupervised 3D encoder, completion cross-entropy + lovasz.
    EncOnlyCeLvz,
    /// Everything on.
    Full,
}

impl Ablation {
    pub const NAMES: [&'static str; 6] = ["2d-ce", "2d-ce-lvz", "full-seg-lvz", "enc-only-ce", "enc-only-ce-lvz", "full"];
    pub const ALL: [Ablation; 6] = [
        Ablation::TwoDCe,
        Ablation::TwoDCeLvz,
        Ablation::FullSegLvz,
        Ablation::EncOnlyCe,
        Ablation::EncOnlyCeLvz,
        Ablation::Full,
    ];

    pub fn parse(name: &str) -> Result<Self, ConfigError> {
        Self::NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| ConfigError::Ablation(name.to_string()))
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[Self::ALL.iter().position(|&a| a == self).unwrap()]
    }

    /// `(3D branch, completion lovasz, segmentation CE, segmentation lovasz)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Ablation::TwoDCe => (false, false, false, false),
            Ablation::TwoDCeLvz => (false, true, false, false),
            Ablation::FullSegLvz => (true, false, true, true),
            Ablation::EncOnlyCe => (true, false, false, false),
            Ablation::EncOnlyCeLvz => (true, true, false, false),
            Ablation::Full => (true, true, true, true),
        }
    }

    pub fn apply(self, config: &mut RunConfig) {
        let (branch, com_lvz, seg_ce, seg_lvz) = self.flags();
        config.model.branch_3d = branch;
        config.train.loss = LossConfig {
            completion_ce: true,
            completion_lovasz: com_lvz,
            segmentation: seg_ce || seg_lvz,
            segmentation_ce: seg_ce,
            segmentation_lovasz: seg_lvz,
            exclude_invalid: config.train.loss.exclude_invalid,
        };
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `a.b.c=value` overrides. Values parse as TOML (`3`, `true`,
    /// `[1, 2]`, `"text"`); anything that does not parse is taken as a bare
    /// string. The result is re-validated against the schema.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root: toml::Value = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.to_string()))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Override(o.to_string()));
            }
            let value = parse_value(raw.trim());
            let segments: Vec<&str> = key.split('.').collect();
            let (last, parents) = segments.split_last().expect("split yields one segment");
            let mut node = &mut root;
            for seg in parents {
                let table = node.as_table_mut().ok_or_else(|| ConfigError::NotATable {
                    key: key.to_string(),
                    segment: seg.to_string(),
                })?;
                node = table
                    .entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
            let table = node.as_table_mut().ok_or_else(|| ConfigError::NotATable {
                key: key.to_string(),
                segment: parents.last().unwrap_or(last).to_string(),
            })?;
            table.insert(last.to_string(), value);
        }
        root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Synthetic scene settings on the model's grid and class count.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            grid: self.model.grid,
            class_count: self.model.class_count,
            ..self.data.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(ConfigError::Parse("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
