//! Persisted adversarial corpora: a binary pixel array plus a JSON manifest,
//! so black-box attacks can be generated once and replayed against any model.

use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, Provenance};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Ground-truth labels (1..=C known, C+1 open).
    pub true_labels: Vec<usize>,
    /// Labels the attack ascended (1-based).
    pub source_labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub attack: AttackConfig,
    /// Architecture id of the model the attack was generated against.
    pub generator_arch: String,
    pub generator_hash: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub pixels: Array4<f64>,
}

/// Write a corpus directory (manifest + little-endian f64 raster).
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let m = &corpus.manifest;
    let expected = m.count * m.channels * m.height * m.width;
    if corpus.pixels.len() != expected {
        return Err(Error::shape(format!(
            "corpus pixel count {} does not match manifest {expected}",
            corpus.pixels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(expected * 8);
    for &v in corpus.pixels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(SAMPLES_FILE), bytes)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(m)?)?;
    Ok(())
}

/// Read a corpus directory back.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CorpusManifest = serde_json::from_slice(&std::fs::read(&manifest_path).map_err(
        |e| Error::Data(format!("cannot read corpus manifest {}: {e}", manifest_path.display())),
    )?)?;
    let bytes = std::fs::read(dir.join(SAMPLES_FILE))?;
    let expected = manifest.count * manifest.channels * manifest.height * manifest.width;
    if bytes.len() != expected * 8 {
        return Err(Error::Data(format!(
            "corpus sample file has {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let pixels = Array4::from_shape_vec(
        (manifest.count, manifest.channels, manifest.height, manifest.width),
        values,
    )
    .map_err(|e| Error::Data(format!("corpus shape: {e}")))?;
    Ok(Corpus { manifest, pixels })
}
