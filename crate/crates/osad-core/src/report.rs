//! Report emission: metric tables (CSV), image triptychs, latent-feature
//! exports with a principal-component scatter, and feature-map grids.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};

use crate::attacks::{run_attack, AttackConfig, AttackHead, ModelCeLoss, Provenance};
use crate::autograd::Tape;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::networks::OsdnModel;

/// One metric-table row: a labeled run under one attack.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub label: String,
    pub attack: String,
    pub closed_set_acc: f64,
    pub auc_roc: f64,
    pub macro_f1: Option<f64>,
}

impl MetricsRow {
    pub fn from_report(label: impl Into<String>, report: &EvalReport) -> MetricsRow {
        MetricsRow {
            label: label.into(),
            attack: report.meta.attack.family.as_str().to_string(),
            closed_set_acc: report.closed_set_acc,
            auc_roc: report.auc_roc,
            macro_f1: report.macro_f1,
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip formatting keeps tables bit-stable across reruns
    format!("{v}")
}

/// Method-by-attack metric table, one row per (run, attack).
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("method,attack,closed_set_acc,auc_roc,macro_f1\n");
    for r in rows {
        let f1 = r.macro_f1.map(fmt_f64).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.attack,
            fmt_f64(r.closed_set_acc),
            fmt_f64(r.auc_roc),
            f1
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-sample score table for external analysis.
pub fn write_per_sample_csv(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("true_label,predicted_known,openmax_label,open_score\n");
    for r in &report.per_sample {
        writeln!(
            out,
            "{},{},{},{}",
            r.true_label,
            r.predicted_known,
            r.openmax_label,
            fmt_f64(r.open_score)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn to_gray_tile(plane: &Array2<f64>) -> Array2<f64> {
    let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    plane.mapv(|v| (v - min) / span)
}

fn save_rgb(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (c, h, w) = pixels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |ch: usize| {
                let v = if c == 1 { pixels[[0, i, j]] } else { pixels[[ch.min(c - 1), i, j]] };
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(j as u32, i as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("image write {}: {e}", path.display())))
}

/// Tile a list of equally-sized images into a grid with 1px separators.
fn tile_images(images: &[Array3<f64>], cols: usize) -> Array3<f64> {
    assert!(!images.is_empty());
    let (c, h, w) = images[0].dim();
    let rows = images.len().div_ceil(cols);
    let mut canvas = Array3::from_elem((c, rows * (h + 1) + 1, cols * (w + 1) + 1), 1.0);
    for (k, img) in images.iter().enumerate() {
        let r = k / cols;
        let cc = k % cols;
        let i0 = r * (h + 1) + 1;
        let j0 = cc * (w + 1) + 1;
        canvas
            .slice_mut(ndarray::s![.., i0..i0 + h, j0..j0 + w])
            .assign(img);
    }
    canvas
}

/// Clean / adversarial / reconstruction triptych grid. Requires the decoder;
/// callers should skip (with a note) when it is disabled.
pub fn render_triptych(
    model: &OsdnModel,
    batch: &crate::data::ImageBatch,
    attack: &AttackConfig,
    count: usize,
    path: &Path,
) -> Result<()> {
    if !model.toggles.dec {
        return Err(Error::config("triptych rendering requires the decoder (toggles.dec)"));
    }
    let n = batch.len().min(count.max(1));
    let idx: Vec<usize> = (0..n).collect();
    let sub = batch.select(&idx);
    let targets: Vec<usize> = sub.labels.iter().map(|&l| l.saturating_sub(1)).collect();
    let loss = ModelCeLoss::new(model, AttackHead::Known);
    let adv = run_attack(&loss, &sub, &targets, attack, Provenance::GroundTruth)?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.leaf(adv.pixels.clone().into_dyn());
    let latent = model.encode(&mut tape, &bound, x)?;
    let recon_var = model.decode(&mut tape, &bound, latent)?;
    let recon = tape
        .value(recon_var)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();

    let mut tiles = Vec::new();
    for i in 0..n {
        tiles.push(sub.pixels.index_axis(Axis(0), i).to_owned());
        tiles.push(adv.pixels.index_axis(Axis(0), i).to_owned());
        tiles.push(recon.index_axis(Axis(0), i).to_owned());
    }
    save_rgb(path, &tile_images(&tiles, 3))
}

/// Export per-sample latent features as CSV rows: label, then the vector.
pub fn export_latents(
    model: &OsdnModel,
    sets: &[(&LabeledSet, &str)],
    batch_size: usize,
    path: &Path,
) -> Result<usize> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("set,label");
    for d in 0..model.latent_dim() {
        write!(out, ",z{d}").unwrap();
    }
    out.push('\n');
    let mut rows = 0usize;
    for (set, name) in sets {
        let indices: Vec<usize> = (0..set.len()).collect();
        for chunk in indices.chunks(batch_size.max(1)) {
            let batch = set.batch(chunk);
            let (_, latent) = model.infer(&batch.pixels)?;
            for (r, &i) in chunk.iter().enumerate() {
                write!(out, "{},{}", name, set.labels[i]).unwrap();
                for &v in latent.row(r) {
                    write!(out, ",{}", fmt_f64(v)).unwrap();
                }
                out.push('\n');
                rows += 1;
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(rows)
}

/// Top-2 principal components by power iteration with deflation.
fn top2_components(data: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = data.dim();
    let mean: Vec<f64> = (0..d).map(|j| data.column(j).sum() / n as f64).collect();
    let centered = Array2::from_shape_fn((n, d), |(i, j)| data[[i, j]] - mean[j]);
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let power = |deflate: Option<&Vec<f64>>| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 / (j as f64 + 1.0)).collect();
        for _ in 0..200 {
            if let Some(u) = deflate {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, &u) in v.iter_mut().zip(u) {
                    *x -= dot * u;
                }
            }
            let mut next = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    next[i] += cov[[i, j]] * v[j];
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut next {
                *x /= norm;
            }
            v = next;
        }
        v
    };
    let first = power(None);
    let second = power(Some(&first));
    (first, second)
}

/// 2-D principal-component scatter of latent features, colored by label.
pub fn render_latent_scatter(
    model: &OsdnModel,
    sets: &[(&LabeledSet, &str)],
    batch_size: usize,
    path: &Path,
) -> Result<()> {
    let mut latents: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (set, _) in sets {
        let indices: Vec<usize> = (0..set.len()).collect();
        for chunk in indices.chunks(batch_size.max(1)) {
            let batch = set.batch(chunk);
            let (_, latent) = model.infer(&batch.pixels)?;
            for (r, &i) in chunk.iter().enumerate() {
                latents.push(latent.row(r).to_vec());
                labels.push(set.labels[i]);
            }
        }
    }
    if latents.is_empty() {
        return Err(Error::data("no latent features to plot"));
    }
    let d = latents[0].len();
    let data = Array2::from_shape_fn((latents.len(), d), |(i, j)| latents[i][j]);
    let (p1, p2) = top2_components(&data);
    let proj: Vec<(f64, f64)> = latents
        .iter()
        .map(|z| {
            let a: f64 = z.iter().zip(&p1).map(|(x, w)| x * w).sum();
            let b: f64 = z.iter().zip(&p2).map(|(x, w)| x * w).sum();
            (a, b)
        })
        .collect();

    let size = 256usize;
    let (min_x, max_x) = proj
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    let (min_y, max_y) = proj
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    let sx = (max_x - min_x).max(1e-9);
    let sy = (max_y - min_y).max(1e-9);
    let palette = [
        [0.89, 0.10, 0.11],
        [0.22, 0.49, 0.72],
        [0.30, 0.69, 0.29],
        [0.60, 0.31, 0.64],
        [1.00, 0.50, 0.00],
        [0.65, 0.34, 0.16],
        [0.97, 0.51, 0.75],
        [0.20, 0.20, 0.20],
    ];
    let mut canvas = Array3::from_elem((3, size, size), 1.0);
    for (&(x, y), &label) in proj.iter().zip(&labels) {
        let col = palette[(label - 1) % palette.len()];
        let px = ((x - min_x) / sx * (size - 5) as f64) as usize + 2;
        let py = ((y - min_y) / sy * (size - 5) as f64) as usize + 2;
        for di in 0..2 {
            for dj in 0..2 {
                for c in 0..3 {
                    canvas[[c, py + di, px + dj]] = col[c];
                }
            }
        }
    }
    save_rgb(path, &canvas)
}

/// Per-stage feature maps before and after denoising for one image, tiled
/// into a grid: rows = stages, columns = (pre, post) for the first channels.
pub fn render_feature_maps(
    model: &OsdnModel,
    image: &Array3<f64>,
    channels: usize,
    path: &Path,
) -> Result<()> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (c, h, w) = image.dim();
    let mut x4 = Array4::zeros((1, c, h, w));
    x4.index_axis_mut(Axis(0), 0).assign(image);
    let x = tape.leaf(x4.into_dyn());
    let stages = model.stage_features(&mut tape, &bound, x)?;

    let mut tiles = Vec::new();
    let mut cols = 0usize;
    for (pre, post) in &stages {
        let pre_v = tape.value(*pre);
        let post_v = tape.value(*post);
        let nch = pre_v.shape()[1].min(channels);
        cols = cols.max(2 * nch);
        let side = pre_v.shape()[2];
        for k in 0..nch {
            for arr in [pre_v, post_v] {
                let plane = Array2::from_shape_fn((side, side), |(i, j)| {
                    arr[ndarray::IxDyn(&[0, k, i, j])]
                });
                let gray = to_gray_tile(&plane);
                // upsample small maps to the input size for a readable grid
                let scale = (h / side).max(1);
                let big = Array3::from_shape_fn((1, side * scale, side * scale), |(_, i, j)| {
                    gray[[i / scale, j / scale]]
                });
                tiles.push(big);
            }
        }
    }
    // pad tiles to a uniform size
    let max_side = tiles.iter().map(|t| t.dim().1).max().unwrap();
    let padded: Vec<Array3<f64>> = tiles
        .into_iter()
        .map(|t| {
            let (_, th, tw) = t.dim();
            if th == max_side && tw == max_side {
                t
            } else {
                let mut p = Array3::zeros((1, max_side, max_side));
                p.slice_mut(ndarray::s![.., ..th, ..tw]).assign(&t);
                p
            }
        })
        .collect();
    save_rgb(path, &tile_images(&padded, cols.max(1)))
}
