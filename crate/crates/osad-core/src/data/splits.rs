//! Published known/open class splits, embedded as a versioned resource.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SPLIT_TABLES: &str = include_str!("../../resources/splits.toml");

/// Datasets the pipeline knows how to serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Svhn,
    Cifar10,
    TinyImagenet,
    Toy,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] =
        [DatasetId::Svhn, DatasetId::Cifar10, DatasetId::TinyImagenet, DatasetId::Toy];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Svhn => "svhn",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::TinyImagenet => "tiny_imagenet",
            DatasetId::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "svhn" => Ok(DatasetId::Svhn),
            "cifar10" => Ok(DatasetId::Cifar10),
            "tiny_imagenet" => Ok(DatasetId::TinyImagenet),
            "toy" => Ok(DatasetId::Toy),
            other => Err(Error::config(format!(
                "unknown dataset `{other}`; valid options: svhn, cifar10, tiny_imagenet, toy"
            ))),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One known/open partition of a dataset's classes.
///
/// `known_classes` keeps the table's order; the label map sends the i-th
/// known class to label i+1, so labels live in 1..=C with C+1 reserved for
/// the open-set sentinel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub dataset: DatasetId,
    pub split_index: u32,
    pub known_classes: Vec<usize>,
    pub open_classes: Vec<usize>,
    pub input_size: usize,
    pub total_classes: usize,
}

impl OpenSetSplit {
    /// Number of known classes C.
    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    /// Sentinel label for open-set samples: C+1.
    pub fn open_label(&self) -> usize {
        self.num_known() + 1
    }

    /// Contiguous label in 1..=C for an original class id, if known.
    pub fn label_for(&self, original: usize) -> Option<usize> {
        self.known_classes.iter().position(|&c| c == original).map(|i| i + 1)
    }

    /// Original class id for a contiguous label in 1..=C.
    pub fn original_for(&self, label: usize) -> Option<usize> {
        if label >= 1 && label <= self.num_known() {
            Some(self.known_classes[label - 1])
        } else {
            None
        }
    }

    pub fn is_open_class(&self, original: usize) -> bool {
        self.open_classes.contains(&original)
    }
}

#[derive(Deserialize)]
struct TableFile {
    #[allow(dead_code)]
    version: u32,
    datasets: BTreeMap<String, DatasetMeta>,
    splits: Vec<SplitRow>,
}

#[derive(Deserialize)]
struct DatasetMeta {
    total_classes: usize,
    input_size: usize,
    #[serde(default)]
    class_names: Vec<String>,
}

#[derive(Deserialize)]
struct SplitRow {
    dataset: String,
    index: u32,
    known: Vec<usize>,
}

fn parse_tables() -> TableFile {
    toml::from_str(SPLIT_TABLES).expect("embedded split table is valid")
}

/// Load the published split for `(dataset, split_index)`.
pub fn load_split(dataset: DatasetId, split_index: u32) -> Result<OpenSetSplit> {
    let tables = parse_tables();
    let meta = tables
        .datasets
        .get(dataset.as_str())
        .ok_or_else(|| Error::config(format!("dataset `{dataset}` missing from split tables")))?;
    let row = tables
        .splits
        .iter()
        .find(|r| r.dataset == dataset.as_str() && r.index == split_index)
        .ok_or_else(|| {
            let valid: Vec<u32> = tables
                .splits
                .iter()
                .filter(|r| r.dataset == dataset.as_str())
                .map(|r| r.index)
                .collect();
            Error::config(format!(
                "unknown split index {split_index} for dataset `{dataset}`; valid options: {valid:?}"
            ))
        })?;
    let open_classes: Vec<usize> =
        (0..meta.total_classes).filter(|c| !row.known.contains(c)).collect();
    Ok(OpenSetSplit {
        dataset,
        split_index,
        known_classes: row.known.clone(),
        open_classes,
        input_size: meta.input_size,
        total_classes: meta.total_classes,
    })
}

/// Human-readable class names, where the table defines them.
pub fn class_names(dataset: DatasetId) -> Vec<String> {
    parse_tables()
        .datasets
        .get(dataset.as_str())
        .map(|m| m.class_names.clone())
        .unwrap_or_default()
}
