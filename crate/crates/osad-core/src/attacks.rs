//! Adversarial example generation: FGSM, PGD and the rectangular occlusion
//! attack, against any differentiable model-and-loss pair.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::config::AttackSettings;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::networks::OsdnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Roa,
    None,
}

impl AttackFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackFamily::Fgsm),
            "pgd" => Ok(AttackFamily::Pgd),
            "roa" => Ok(AttackFamily::Roa),
            "none" => Ok(AttackFamily::None),
            other => Err(Error::config(format!(
                "unknown attack family `{other}`; valid options: fgsm, pgd, roa, none"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::Roa => "roa",
            AttackFamily::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoaSearch {
    Grid,
    GradientGuided,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoaRect {
    pub height: usize,
    pub width: usize,
    pub search: RoaSearch,
    pub inner_steps: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub pixel_range: (f64, f64),
    pub roa_rect: RoaRect,
}

impl AttackConfig {
    /// Resolve config-level settings against a concrete image size: the ROA
    /// rectangle defaults to 1/8 of the image side (min 2 px) and the grid
    /// stride to the rectangle size.
    pub fn from_settings(s: &AttackSettings, image_size: usize) -> Result<AttackConfig> {
        let family = AttackFamily::parse(&s.family)?;
        let default_side = (image_size / 8).max(2);
        let height = if s.roa.height == 0 { default_side } else { s.roa.height };
        let width = if s.roa.width == 0 { default_side } else { s.roa.width };
        let stride = if s.roa.stride == 0 { height.min(width) } else { s.roa.stride };
        let search = match s.roa.search.as_str() {
            "grid" => RoaSearch::Grid,
            "gradient_guided" => RoaSearch::GradientGuided,
            other => {
                return Err(Error::config(format!(
                    "unknown roa.search `{other}`; valid options: grid, gradient_guided"
                )))
            }
        };
        let cfg = AttackConfig {
            family,
            epsilon: s.epsilon,
            step_size: s.step_size,
            iterations: s.iterations,
            pixel_range: (s.pixel_min, s.pixel_max),
            roa_rect: RoaRect { height, width, search, inner_steps: s.roa.inner_steps, stride },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::config("attack epsilon must be nonnegative"));
        }
        if self.pixel_range.0 >= self.pixel_range.1 {
            return Err(Error::config("pixel_range.low must be below pixel_range.high"));
        }
        if self.family == AttackFamily::Pgd {
            if self.iterations == 0 {
                return Err(Error::config("pgd requires iterations >= 1"));
            }
            if self.step_size <= 0.0 {
                return Err(Error::config("pgd requires a positive step size"));
            }
            if self.step_size > self.epsilon {
                return Err(Error::config(format!(
                    "pgd step size {} exceeds epsilon {}",
                    self.step_size, self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// Who supplied the labels the attack ascended against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    ModelPrediction,
}

/// An attacked batch plus the labels used to craft it.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub pixels: Array4<f64>,
    pub source_labels: Vec<usize>,
    pub provenance: Provenance,
}

/// A differentiable loss over pixel batches. `targets` are 0-based class
/// indices into the loss's output dimension.
pub trait AttackLoss {
    fn loss(&self, pixels: &Array4<f64>, targets: &[usize]) -> Result<f64>;
    fn loss_grad(&self, pixels: &Array4<f64>, targets: &[usize]) -> Result<(f64, Array4<f64>)>;
    /// Per-sample losses, needed by ROA placement search.
    fn per_sample_loss(&self, pixels: &Array4<f64>, targets: &[usize]) -> Result<Vec<f64>>;
}

/// Which classifier head an attack ascends.
#[derive(Debug, Clone, Copy)]
pub enum AttackHead {
    Known,
    Rotation,
}

/// Mean softmax cross-entropy of a model head, differentiated w.r.t. pixels.
pub struct ModelCeLoss<'a> {
    pub model: &'a OsdnModel,
    pub head: AttackHead,
}

impl<'a> ModelCeLoss<'a> {
    pub fn new(model: &'a OsdnModel, head: AttackHead) -> Self {
        ModelCeLoss { model, head }
    }

    fn build(
        &self,
        pixels: &Array4<f64>,
        targets: &[usize],
    ) -> Result<(crate::autograd::Tape, crate::autograd::Var, crate::autograd::Var, Vec<f64>)>
    {
        let mut tape = crate::autograd::Tape::new();
        let bound = self.model.bind(&mut tape);
        let x = tape.leaf(pixels.clone().into_dyn());
        let latent = self.model.encode(&mut tape, &bound, x)?;
        let logits = match self.head {
            AttackHead::Known => self.model.classify_known(&mut tape, &bound, latent),
            AttackHead::Rotation => self.model.classify_rotation(&mut tape, &bound, latent)?,
        };
        let classes = tape.shape(logits)[1];
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::contract(format!(
                    "attack target {t} out of range for {classes} classes (sample {i})"
                )));
            }
        }
        let lsm = tape.log_softmax_rows(logits);
        let per_sample: Vec<f64> = {
            let v = tape.value(lsm);
            targets
                .iter()
                .enumerate()
                .map(|(i, &t)| -v[ndarray::IxDyn(&[i, t])])
                .collect()
        };
        let picked = tape.select_rows(lsm, targets.to_vec());
        let s = tape.sum_all(picked);
        let loss = tape.affine(s, -1.0 / targets.len() as f64, 0.0);
        Ok((tape, x, loss, per_sample))
    }
}

impl AttackLoss for ModelCeLoss<'_> {
    fn loss(&self, pixels: &Array4<f64>, targets: &[usize]) -> Result<f64> {
        let (tape, _, loss, _) = self.build(pixels, targets)?;
        Ok(tape.scalar(loss))
    }

    fn loss_grad(&self, pixels: &Array4<f64>, targets: &[usize]) -> Result<(f64, Array4<f64>)> {
        let (tape, x, loss, _) = self.build(pixels, targets)?;
        let grads = tape.backward(loss)?;
        let g = grads
            .get_or_zeros(x, pixels.shape())
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        Ok((tape.scalar(loss), g))
    }

    fn per_sample_loss(&self, pixels: &Array4<f64>, targets: &[usize]) -> Result<Vec<f64>> {
        let (_, _, _, per_sample) = self.build(pixels, targets)?;
        Ok(per_sample)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite_grad(grad: &Array4<f64>) -> Result<()> {
    let n = grad.dim().0;
    for i in 0..n {
        if grad.index_axis(ndarray::Axis(0), i).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient at batch index {i}")));
        }
    }
    Ok(())
}

/// Fast gradient sign method: one signed step from the clean input,
/// projected into the valid pixel range.
pub fn fgsm(
    loss: &dyn AttackLoss,
    batch: &ImageBatch,
    targets: &[usize],
    cfg: &AttackConfig,
    provenance: Provenance,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let (lo, hi) = cfg.pixel_range;
    let (_, grad) = loss.loss_grad(&batch.pixels, targets)?;
    check_finite_grad(&grad)?;
    let mut adv = batch.pixels.clone();
    ndarray::Zip::from(&mut adv).and(&grad).for_each(|x, &g| {
        *x = (*x + cfg.epsilon * sign(g)).clamp(lo, hi);
    });
    Ok(AdversarialBatch { pixels: adv, source_labels: targets.to_vec(), provenance })
}

/// Projected gradient descent: `iterations` signed steps from the clean
/// input, each projected onto the ε-ball intersected with the pixel range.
/// The final iterate is returned.
pub fn pgd(
    loss: &dyn AttackLoss,
    batch: &ImageBatch,
    targets: &[usize],
    cfg: &AttackConfig,
    provenance: Provenance,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let (lo, hi) = cfg.pixel_range;
    let clean = &batch.pixels;
    let mut adv = clean.clone();
    for _ in 0..cfg.iterations {
        let (_, grad) = loss.loss_grad(&adv, targets)?;
        check_finite_grad(&grad)?;
        ndarray::Zip::from(&mut adv).and(clean).and(&grad).for_each(|x, &x0, &g| {
            let stepped = *x + cfg.step_size * sign(g);
            let ball_lo = (x0 - cfg.epsilon).max(lo);
            let ball_hi = (x0 + cfg.epsilon).min(hi);
            *x = stepped.clamp(ball_lo, ball_hi);
        });
    }
    Ok(AdversarialBatch { pixels: adv, source_labels: targets.to_vec(), provenance })
}

fn roa_positions(extent: usize, rect: usize, stride: usize) -> Vec<usize> {
    (0..=extent - rect).step_by(stride.max(1)).collect()
}

/// Rectangular occlusion attack: one adversarially placed and optimized
/// rectangle per image; all other pixels stay bit-identical to the input.
pub fn roa(
    loss: &dyn AttackLoss,
    batch: &ImageBatch,
    targets: &[usize],
    cfg: &AttackConfig,
    provenance: Provenance,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let (n, _c, h, w) = batch.pixels.dim();
    let rect = cfg.roa_rect;
    if rect.height > h || rect.width > w {
        return Err(Error::config(format!(
            "roa rectangle {}x{} larger than {h}x{w} image",
            rect.height, rect.width
        )));
    }
    let (lo, hi) = cfg.pixel_range;
    let mid = 0.5 * (lo + hi);
    let rows = roa_positions(h, rect.height, rect.stride);
    let cols = roa_positions(w, rect.width, rect.stride);
    let candidates: Vec<(usize, usize)> =
        rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).collect();

    // Optional gradient guidance: per image, keep only the top candidates by
    // gradient mass inside the rectangle.
    let allowed: Vec<Vec<bool>> = match rect.search {
        RoaSearch::Grid => vec![vec![true; candidates.len()]; n],
        RoaSearch::GradientGuided => {
            let (_, grad) = loss.loss_grad(&batch.pixels, targets)?;
            check_finite_grad(&grad)?;
            let keep = candidates.len().div_ceil(4).max(1);
            (0..n)
                .map(|img| {
                    let mut scored: Vec<(usize, f64)> = candidates
                        .iter()
                        .enumerate()
                        .map(|(k, &(i, j))| {
                            let mut mass = 0.0;
                            for di in 0..rect.height {
                                for dj in 0..rect.width {
                                    for ch in 0..batch.pixels.dim().1 {
                                        mass += grad[[img, ch, i + di, j + dj]].abs();
                                    }
                                }
                            }
                            (k, mass)
                        })
                        .collect();
                    scored.sort_by(|a, b| {
                        b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
                    });
                    let mut mask = vec![false; candidates.len()];
                    for &(k, _) in scored.iter().take(keep) {
                        mask[k] = true;
                    }
                    mask
                })
                .collect()
        }
    };

    // Placement: evaluate the midpoint fill at every candidate, tracking the
    // per-image loss maximizer among its allowed candidates.
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut best_pos = vec![(0usize, 0usize); n];
    for (k, &(i, j)) in candidates.iter().enumerate() {
        let mut probe = batch.pixels.clone();
        probe
            .slice_mut(ndarray::s![.., .., i..i + rect.height, j..j + rect.width])
            .fill(mid);
        let losses = loss.per_sample_loss(&probe, targets)?;
        for img in 0..n {
            if allowed[img][k] && losses[img] > best_loss[img] {
                best_loss[img] = losses[img];
                best_pos[img] = (i, j);
            }
        }
    }

    // Fill each image's chosen rectangle with the midpoint...
    let mut adv = batch.pixels.clone();
    for img in 0..n {
        let (i, j) = best_pos[img];
        adv.slice_mut(ndarray::s![img, .., i..i + rect.height, j..j + rect.width])
            .fill(mid);
    }

    // ...then optimize its contents by signed gradient steps, constrained
    // only by the pixel range. Step size spans the range in `inner_steps`.
    if rect.inner_steps > 0 {
        let step = (hi - lo) / rect.inner_steps as f64;
        for _ in 0..rect.inner_steps {
            let (_, grad) = loss.loss_grad(&adv, targets)?;
            check_finite_grad(&grad)?;
            for img in 0..n {
                let (i, j) = best_pos[img];
                let mut window =
                    adv.slice_mut(ndarray::s![img, .., i..i + rect.height, j..j + rect.width]);
                let gwin = grad.slice(ndarray::s![img, .., i..i + rect.height, j..j + rect.width]);
                ndarray::Zip::from(&mut window).and(&gwin).for_each(|x, &g| {
                    *x = (*x + step * sign(g)).clamp(lo, hi);
                });
            }
        }
    }

    Ok(AdversarialBatch { pixels: adv, source_labels: targets.to_vec(), provenance })
}

/// Dispatch on the configured family. `none` returns the clean pixels.
pub fn run_attack(
    loss: &dyn AttackLoss,
    batch: &ImageBatch,
    targets: &[usize],
    cfg: &AttackConfig,
    provenance: Provenance,
) -> Result<AdversarialBatch> {
    match cfg.family {
        AttackFamily::Fgsm => fgsm(loss, batch, targets, cfg, provenance),
        AttackFamily::Pgd => pgd(loss, batch, targets, cfg, provenance),
        AttackFamily::Roa => roa(loss, batch, targets, cfg, provenance),
        AttackFamily::None => Ok(AdversarialBatch {
            pixels: batch.pixels.clone(),
            source_labels: targets.to_vec(),
            provenance,
        }),
    }
}

/// Labels used to craft evaluation-time attacks: ground truth for known
/// samples, the model's own prediction (over known classes, from the clean
/// input) for open-set samples. Returned labels are 1-based dataset labels.
pub fn attack_labels(
    model: &OsdnModel,
    batch: &ImageBatch,
    is_known: bool,
) -> Result<(Vec<usize>, Provenance)> {
    if is_known {
        return Ok((batch.labels.clone(), Provenance::GroundTruth));
    }
    let (logits, _) = model.infer(&batch.pixels)?;
    let labels = argmax_rows(&logits).iter().map(|&k| k + 1).collect();
    Ok((labels, Provenance::ModelPrediction))
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            best_k
        })
        .collect()
}
