//! Dataset loading, open-set splits, rotation augmentation and evaluation
//! streams.

mod folder;
mod splits;
mod toy;

pub use folder::{load_image_folder, FolderPreproc};
pub use splits::{class_names, load_split, DatasetId, OpenSetSplit};
pub use toy::{generate_ood_fixture, toy_dataset};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::error::{Error, Result};

/// A batch of images plus labels.
///
/// Labels are contiguous known labels in 1..=C, or the open-set sentinel C+1.
/// Pixels are (n, channels, height, width) and must sit inside `pixel_range`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub labels: Vec<usize>,
    pub rotation_labels: Option<Vec<u8>>,
    pub pixel_range: (f64, f64),
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, labels: Vec<usize>, pixel_range: (f64, f64)) -> Result<Self> {
        if pixels.dim().0 != labels.len() {
            return Err(Error::shape(format!(
                "labels length {} does not match batch dimension {}",
                labels.len(),
                pixels.dim().0
            )));
        }
        let (lo, hi) = pixel_range;
        if let Some(&v) = pixels.iter().find(|&&v| v < lo || v > hi || !v.is_finite()) {
            return Err(Error::Data(format!(
                "pixel value {v} outside declared range [{lo}, {hi}]"
            )));
        }
        Ok(ImageBatch { pixels, labels, rotation_labels: None, pixel_range })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Select a sub-batch by sample indices.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let pixels = self.pixels.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let rotation_labels = self
            .rotation_labels
            .as_ref()
            .map(|r| indices.iter().map(|&i| r[i]).collect());
        ImageBatch { pixels, labels, rotation_labels, pixel_range: self.pixel_range }
    }
}

/// A rotation by 90°·r counter-clockwise, r in {0, 1, 2, 3}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationTag(u8);

impl RotationTag {
    pub fn new(r: u8) -> Result<Self> {
        if r < 4 {
            Ok(RotationTag(r))
        } else {
            Err(Error::contract(format!("rotation tag {r} outside {{0,1,2,3}}")))
        }
    }

    pub fn value(&self) -> u8 {
        self.0
    }
}

/// Rotate each image counter-clockwise by 90°·r_i and record the tags.
/// Images must be square; rotation is a lossless pixel permutation.
pub fn rotate_batch(batch: &ImageBatch, r_vector: &[RotationTag]) -> Result<ImageBatch> {
    let (n, c, h, w) = batch.pixels.dim();
    if h != w {
        return Err(Error::shape(format!("rotation requires square images, got {h}x{w}")));
    }
    if r_vector.len() != n {
        return Err(Error::shape(format!(
            "rotation vector length {} does not match batch {}",
            r_vector.len(),
            n
        )));
    }
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for (i, tag) in r_vector.iter().enumerate() {
        for ch in 0..c {
            for ii in 0..h {
                for jj in 0..w {
                    let src = match tag.value() {
                        0 => (ii, jj),
                        1 => (jj, w - 1 - ii),
                        2 => (h - 1 - ii, w - 1 - jj),
                        3 => (h - 1 - jj, ii),
                        _ => unreachable!(),
                    };
                    out[[i, ch, ii, jj]] = batch.pixels[[i, ch, src.0, src.1]];
                }
            }
        }
    }
    Ok(ImageBatch {
        pixels: out,
        labels: batch.labels.clone(),
        rotation_labels: Some(r_vector.iter().map(|t| t.value()).collect()),
        pixel_range: batch.pixel_range,
    })
}

/// Raw images of one dataset partition, labeled with original class ids.
#[derive(Debug, Clone, Default)]
pub struct RawPartition {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<usize>,
}

impl RawPartition {
    pub fn push(&mut self, image: Array3<f64>, label: usize) {
        self.images.push(image);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Train and test partitions of a dataset in original-label space.
#[derive(Debug, Clone)]
pub struct DatasetStore {
    pub train: RawPartition,
    pub test: RawPartition,
}

/// Load a dataset. The toy set is synthesized in memory; the others are read
/// from `<data.root>/<dataset>/{train,test}/<class_id>/*.png`.
pub fn load_dataset(cfg: &DataConfig, dataset: DatasetId) -> Result<DatasetStore> {
    match dataset {
        DatasetId::Toy => Ok(toy_dataset()),
        other => folder::load_class_tree(cfg, other),
    }
}

/// Evaluation partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Val,
    Test,
}

/// Relabeled image sets for one open-set split: train/val carry known-class
/// samples only, the test side keeps known and open samples separate.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub split: OpenSetSplit,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test_known: LabeledSet,
    pub test_open: LabeledSet,
}

/// Images with contiguous labels (1..=C known, C+1 open).
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Materialize a batch from sample indices.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        assert!(!indices.is_empty(), "empty batch request");
        let (c, h, w) = self.images[0].dim();
        let mut pixels = Array4::<f64>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            pixels.index_axis_mut(Axis(0), row).assign(&self.images[i]);
            labels.push(self.labels[i]);
        }
        ImageBatch { pixels, labels, rotation_labels: None, pixel_range: (0.0, 1.0) }
    }
}

/// Realize a split: relabel, carve out the validation hold-out from the
/// known-class training data (seeded), and bucket the test side.
pub fn prepare_split_data(
    store: &DatasetStore,
    split: &OpenSetSplit,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitData> {
    let mut train_all = LabeledSet::default();
    for (img, &orig) in store.train.images.iter().zip(&store.train.labels) {
        if let Some(label) = split.label_for(orig) {
            train_all.images.push(img.clone());
            train_all.labels.push(label);
        }
    }
    if train_all.is_empty() {
        return Err(Error::data(format!(
            "no known-class training samples for {} split {}",
            split.dataset, split.split_index
        )));
    }

    let mut indices: Vec<usize> = (0..train_all.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76616c5f73706c69); // "val_spli"
    indices.shuffle(&mut rng);
    let n_val = ((train_all.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.clamp(1, train_all.len().saturating_sub(1).max(1));
    let (val_idx, train_idx) = indices.split_at(n_val);

    let subset = |idx: &[usize]| {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        LabeledSet {
            images: sorted.iter().map(|&i| train_all.images[i].clone()).collect(),
            labels: sorted.iter().map(|&i| train_all.labels[i]).collect(),
        }
    };
    let train = subset(train_idx);
    let val = subset(val_idx);

    let mut test_known = LabeledSet::default();
    let mut test_open = LabeledSet::default();
    for (img, &orig) in store.test.images.iter().zip(&store.test.labels) {
        if let Some(label) = split.label_for(orig) {
            test_known.images.push(img.clone());
            test_known.labels.push(label);
        } else if split.is_open_class(orig) {
            test_open.images.push(img.clone());
            test_open.labels.push(split.open_label());
        }
    }

    Ok(SplitData { split: split.clone(), train, val, test_known, test_open })
}

/// Deterministic batched stream over an evaluation partition.
///
/// Known samples carry labels 1..=C, open-set samples the sentinel C+1.
/// Order is a seeded shuffle so it is reproducible for a fixed seed.
pub fn make_eval_stream(
    data: &SplitData,
    partition: Partition,
    include_open: bool,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ImageBatch>> {
    let mut images: Vec<&Array3<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let known = match partition {
        Partition::Val => &data.val,
        Partition::Test => &data.test_known,
    };
    for (img, &l) in known.images.iter().zip(&known.labels) {
        images.push(img);
        labels.push(l);
    }
    if include_open && partition == Partition::Test {
        for (img, &l) in data.test_open.images.iter().zip(&data.test_open.labels) {
            images.push(img);
            labels.push(l);
        }
    }
    if images.is_empty() {
        return Err(Error::data(format!("empty {partition:?} partition")));
    }

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576616c5f737472); // "eval_str"
    order.shuffle(&mut rng);

    let (c, h, w) = images[0].dim();
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size.max(1)) {
        let mut pixels = Array4::<f64>::zeros((chunk.len(), c, h, w));
        let mut blabels = Vec::with_capacity(chunk.len());
        for (row, &i) in chunk.iter().enumerate() {
            pixels.index_axis_mut(Axis(0), row).assign(images[i]);
            blabels.push(labels[i]);
        }
        batches.push(ImageBatch {
            pixels,
            labels: blabels,
            rotation_labels: None,
            pixel_range: (0.0, 1.0),
        });
    }
    Ok(batches)
}
