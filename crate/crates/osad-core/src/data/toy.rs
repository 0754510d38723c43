//! Built-in synthetic datasets: a 4-class oriented-bar image set and an
//! out-of-distribution fixture, so the whole suite runs with no downloads.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetStore, RawPartition};
use crate::error::Result;

pub const TOY_SIZE: usize = 16;
pub const TOY_CLASSES: usize = 4;
const TRAIN_PER_CLASS: usize = 96;
const TEST_PER_CLASS: usize = 64;

/// The toy classes are bars at four orientations. Every image also carries a
/// bright corner marker at the top-left so the rotation pretext task stays
/// well-posed: rotating any image moves the marker to a different corner,
/// regardless of which bar class it shows.
fn toy_image(class: usize, sample: usize, partition: u64) -> Array3<f64> {
    let seed = 0x746f79 ^ (partition << 40) ^ ((class as u64) << 20) ^ sample as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = TOY_SIZE;
    let mut img = Array3::<f64>::zeros((3, n, n));

    // noisy background
    for ch in 0..3 {
        for i in 0..n {
            for j in 0..n {
                let noise: f64 = rng.gen_range(-0.09..0.09);
                img[[ch, i, j]] = (0.30 + noise).clamp(0.0, 1.0);
            }
        }
    }

    let intensity: f64 = rng.gen_range(0.65..0.90);
    let offset: i64 = rng.gen_range(-3..=3);
    let center = n as i64 / 2 + offset;
    let tint: [f64; 3] = [1.0, rng.gen_range(0.85..1.0), rng.gen_range(0.85..1.0)];

    let on_bar = |i: i64, j: i64| -> bool {
        match class {
            0 => (i - center).abs() <= 1,
            1 => (j - center).abs() <= 1,
            2 => (i - j - offset).abs() <= 1,
            3 => (i + j - (n as i64 - 1) - offset).abs() <= 1,
            _ => unreachable!("toy class out of range"),
        }
    };
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            if on_bar(i, j) {
                for ch in 0..3 {
                    let jitter: f64 = rng.gen_range(-0.05..0.05);
                    img[[ch, i as usize, j as usize]] =
                        (intensity * tint[ch] + jitter).clamp(0.0, 1.0);
                }
            }
        }
    }

    // orientation marker
    let marker: f64 = rng.gen_range(0.92..1.0);
    for ch in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                img[[ch, i, j]] = marker;
            }
        }
    }
    img
}

/// Synthesize the full toy dataset. Generation is a pure function of
/// (class, sample index, partition), so every run sees identical data.
pub fn toy_dataset() -> DatasetStore {
    let mut train = RawPartition::default();
    let mut test = RawPartition::default();
    for class in 0..TOY_CLASSES {
        for k in 0..TRAIN_PER_CLASS {
            train.push(toy_image(class, k, 0), class);
        }
        for k in 0..TEST_PER_CLASS {
            test.push(toy_image(class, k, 1), class);
        }
    }
    DatasetStore { train, test }
}

fn ood_image(kind: usize, sample: usize) -> Array3<f64> {
    let seed = 0x6f6f64 ^ ((kind as u64) << 20) ^ sample as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = TOY_SIZE;
    let mut img = Array3::<f64>::zeros((3, n, n));
    match kind {
        // checkerboard with random cell size and phase
        0 => {
            let cell = rng.gen_range(2..=4usize);
            let phase = rng.gen_range(0..2usize);
            let hi: f64 = rng.gen_range(0.7..0.95);
            let lo: f64 = rng.gen_range(0.05..0.3);
            for ch in 0..3 {
                for i in 0..n {
                    for j in 0..n {
                        let v = if (i / cell + j / cell + phase) % 2 == 0 { hi } else { lo };
                        let noise: f64 = rng.gen_range(-0.04..0.04);
                        img[[ch, i, j]] = (v + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
        // radial blob
        _ => {
            let cx = rng.gen_range(4.0..12.0);
            let cy = rng.gen_range(4.0..12.0);
            let radius = rng.gen_range(3.0..6.0);
            for ch in 0..3 {
                for i in 0..n {
                    for j in 0..n {
                        let d = ((i as f64 - cx).powi(2) + (j as f64 - cy).powi(2)).sqrt();
                        let v = 0.85 * (-d * d / (2.0 * radius * radius)).exp() + 0.1;
                        let noise: f64 = rng.gen_range(-0.04..0.04);
                        img[[ch, i, j]] = (v + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}

/// Write the synthetic OOD fixture (PNG files) under `cache_dir` and return
/// its directory. Idempotent: existing files are left alone.
pub fn generate_ood_fixture(cache_dir: &Path, count: usize) -> Result<PathBuf> {
    let dir = cache_dir.join("ood_fixture");
    std::fs::create_dir_all(&dir)?;
    for k in 0..count {
        let path = dir.join(format!("ood_{k:03}.png"));
        if path.exists() {
            continue;
        }
        let img = ood_image(k % 2, k);
        save_png(&img, &path)?;
    }
    Ok(dir)
}

pub(crate) fn save_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "png export expects 3 channels");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                (img[[0, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| crate::error::Error::Data(format!("png write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_is_deterministic() {
        let a = toy_dataset();
        let b = toy_dataset();
        assert_eq!(a.train.len(), TOY_CLASSES * TRAIN_PER_CLASS);
        assert_eq!(a.test.len(), TOY_CLASSES * TEST_PER_CLASS);
        assert_eq!(a.train.images[7], b.train.images[7]);
        assert_eq!(a.test.images[100], b.test.images[100]);
    }

    #[test]
    fn toy_pixels_in_unit_range() {
        let d = toy_dataset();
        for img in d.train.images.iter().take(20) {
            for &v in img.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn ood_fixture_written_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate_ood_fixture(dir.path(), 8).unwrap();
        let images = super::super::load_image_folder(
            &path,
            &super::super::FolderPreproc { center_crop: None, resize_to: Some(TOY_SIZE) },
        )
        .unwrap();
        assert_eq!(images.len(), 8);
        assert_eq!(images[0].dim(), (3, TOY_SIZE, TOY_SIZE));
    }
}
