//! OpenMax open-set inference: per-class mean activations, Weibull tail
//! models over matched distances, logit recalibration and C+1-way scoring.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::argmax_rows;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::networks::OsdnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    Latent,
    Logits,
}

impl FeatureSpace {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(FeatureSpace::Latent),
            "logits" => Ok(FeatureSpace::Logits),
            other => Err(Error::config(format!(
                "unknown feature space `{other}`; valid options: latent, logits"
            ))),
        }
    }
}

/// Calibrated OpenMax parameters: one (mean, Weibull shape, Weibull scale)
/// triple per known class. Immutable once fitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpenMaxModel {
    pub class_means: Vec<Vec<f64>>,
    /// (shape m_i, scale eta_i) per class.
    pub weibull: Vec<(f64, f64)>,
    pub sigma: usize,
    pub tail_size: usize,
    pub threshold: f64,
    pub feature_space: FeatureSpace,
}

/// C+1-way OpenMax scores for one sample.
#[derive(Debug, Clone)]
pub struct OpenMaxScores {
    /// Probabilities over classes 1..=C plus the open slot at index C.
    pub probs: Vec<f64>,
    pub recalibrated_logits: Vec<f64>,
}

const ETA_FLOOR: f64 = 1e-6;
const SHAPE_FLOOR: f64 = 0.05;
const SHAPE_CAP: f64 = 1e3;

/// Maximum-likelihood Weibull fit via safeguarded bisection on the shape
/// profile likelihood. Returns (shape, scale).
pub fn weibull_mle(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::calibration(format!(
            "weibull fit needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::calibration("weibull fit requires finite nonnegative samples"));
    }
    let max = samples.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        log::warn!("weibull fit on all-zero distances; using floor parameters");
        return Ok((SHAPE_CAP, ETA_FLOOR));
    }
    // scale-normalize for numerical stability; the shape is scale invariant
    let xs: Vec<f64> = samples.iter().map(|v| (v / max).max(1e-300)).collect();
    let spread = {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        1.0 - lo
    };
    if spread < 1e-9 {
        log::warn!("weibull fit on (near) identical distances; using capped shape");
        return Ok((SHAPE_CAP, (max).max(ETA_FLOOR)));
    }

    let mean_ln: f64 = xs.iter().map(|v| v.ln()).sum::<f64>() / xs.len() as f64;
    let profile = |m: f64| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &x in &xs {
            let p = x.powf(m);
            num += p * x.ln();
            den += p;
        }
        num / den - 1.0 / m - mean_ln
    };

    // profile(m) is increasing; bracket the root then bisect
    let mut lo = 1e-3;
    let mut hi = 1.0;
    while profile(hi) < 0.0 && hi < SHAPE_CAP {
        hi *= 2.0;
    }
    if profile(hi) < 0.0 {
        log::warn!("weibull shape exceeded cap; clamping");
        let eta = scale_for(&xs, SHAPE_CAP) * max;
        return Ok((SHAPE_CAP, eta.max(ETA_FLOOR)));
    }
    let mut iterations = 0;
    while hi - lo > 1e-9 && iterations < 200 {
        let mid = 0.5 * (lo + hi);
        if profile(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let shape = (0.5 * (lo + hi)).clamp(SHAPE_FLOOR, SHAPE_CAP);
    let eta = scale_for(&xs, shape) * max;
    Ok((shape, eta.max(ETA_FLOOR)))
}

fn scale_for(xs: &[f64], shape: f64) -> f64 {
    let mean_pow: f64 = xs.iter().map(|v| v.powf(shape)).sum::<f64>() / xs.len() as f64;
    mean_pow.powf(1.0 / shape)
}

fn euclidean(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Fit the EVT calibration from correctly-classified training features.
///
/// `features` and `logits` are row-per-sample; `labels` are 1..=C. Per class
/// the mean activation is computed, distances to it collected, and the
/// `tail_size` largest distances fitted with a Weibull by maximum likelihood.
pub fn fit_evt(
    features: &Array2<f64>,
    logits: &Array2<f64>,
    labels: &[usize],
    num_known: usize,
    tail_size: usize,
    sigma: usize,
    threshold: f64,
    feature_space: FeatureSpace,
) -> Result<OpenMaxModel> {
    if tail_size < 2 {
        return Err(Error::config("openmax.tail_size must be at least 2"));
    }
    if sigma < 1 {
        return Err(Error::config("openmax.sigma must be at least 1"));
    }
    if features.nrows() != labels.len() || logits.nrows() != labels.len() {
        return Err(Error::shape("features/logits/labels row mismatch".to_string()));
    }
    let predictions = argmax_rows(logits);
    let mut class_means = Vec::with_capacity(num_known);
    let mut weibull = Vec::with_capacity(num_known);
    for class in 1..=num_known {
        let rows: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] == class && predictions[i] + 1 == class)
            .collect();
        if rows.len() < tail_size {
            return Err(Error::calibration(format!(
                "class {class} has {} correctly-classified samples, needs at least {tail_size}",
                rows.len()
            )));
        }
        let dim = features.ncols();
        let mut mean = vec![0.0; dim];
        for &r in &rows {
            for (m, &v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        let mut distances: Vec<f64> =
            rows.iter().map(|&r| euclidean(features.row(r), &mean)).collect();
        distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let tail = &distances[distances.len() - tail_size..];
        let (m, eta) = weibull_mle(tail)?;
        class_means.push(mean);
        weibull.push((m, eta));
    }
    Ok(OpenMaxModel { class_means, weibull, sigma, tail_size, threshold, feature_space })
}

/// Descending-order ranks of a logit row: the top class gets rank 1.
pub fn logit_ranks(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0; logits.len()];
    for (pos, &class) in order.iter().enumerate() {
        ranks[class] = pos + 1;
    }
    ranks
}

impl OpenMaxModel {
    pub fn num_known(&self) -> usize {
        self.class_means.len()
    }

    /// Belief that the sample belongs to known class `i` (0-based):
    /// `w_i = 1 - max(0, (σ - rank(i))/σ) · exp(-(‖v-μ_i‖₂/η_i)^{m_i})`.
    pub fn belief(&self, v: ArrayView1<f64>, rank: usize, i: usize) -> Result<f64> {
        let mean = self
            .class_means
            .get(i)
            .ok_or_else(|| Error::calibration(format!("class index {i} not calibrated")))?;
        let (m, eta) = self.weibull[i];
        let rank_factor = ((self.sigma as f64 - rank as f64) / self.sigma as f64).max(0.0);
        let d = euclidean(v, mean);
        let wscore = (-(d / eta).powf(m)).exp();
        Ok(1.0 - rank_factor * wscore)
    }

    /// Recalibrate one logit row into C+1 probabilities (Eqs. 3-4).
    pub fn openmax_probs(&self, logits: &[f64], v: ArrayView1<f64>) -> Result<OpenMaxScores> {
        let c = self.num_known();
        if logits.len() != c {
            return Err(Error::shape(format!(
                "expected {c} logits, got {}",
                logits.len()
            )));
        }
        let ranks = logit_ranks(logits);
        let mut recal = Vec::with_capacity(c + 1);
        let mut open_logit = 0.0;
        for i in 0..c {
            let w = self.belief(v, ranks[i], i)?;
            recal.push(logits[i] * w);
            open_logit += logits[i] * (1.0 - w);
        }
        recal.push(open_logit);

        let max = recal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = recal.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|&e| e / total).collect();
        Ok(OpenMaxScores { probs, recalibrated_logits: recal })
    }

    /// Thresholded prediction: a 1-based known label, or C+1 for open.
    ///
    /// A sample is open when the open slot is the row argmax (ties break to
    /// open) or the best known probability falls below `threshold` times the
    /// row maximum.
    pub fn predict(&self, scores: &OpenMaxScores) -> usize {
        let c = self.num_known();
        let open_p = scores.probs[c];
        let (mut best_known, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (k, &p) in scores.probs[..c].iter().enumerate() {
            if p > best_p {
                best_p = p;
                best_known = k;
            }
        }
        let row_max = best_p.max(open_p);
        if open_p >= best_p || best_p < self.threshold * row_max {
            c + 1
        } else {
            best_known + 1
        }
    }
}

/// Run the model over the training set and fit the calibration. `v(x)` is the
/// pooled latent by default, or the logit vector when configured.
pub fn calibrate_model(
    model: &OsdnModel,
    train: &LabeledSet,
    tail_size: usize,
    sigma: usize,
    threshold: f64,
    feature_space: FeatureSpace,
    batch_size: usize,
) -> Result<OpenMaxModel> {
    let n = train.len();
    if n == 0 {
        return Err(Error::calibration("empty calibration set"));
    }
    let mut features_rows: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut logits_rows: Vec<Array1<f64>> = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = train.batch(chunk);
        let (logits, latent) = model.infer(&batch.pixels)?;
        for r in 0..chunk.len() {
            let v = match feature_space {
                FeatureSpace::Latent => latent.row(r).to_owned(),
                FeatureSpace::Logits => logits.row(r).to_owned(),
            };
            features_rows.push(v);
            logits_rows.push(logits.row(r).to_owned());
        }
    }
    let dim = features_rows[0].len();
    let mut features = Array2::zeros((n, dim));
    let mut logits = Array2::zeros((n, model.num_known));
    for (i, (f, l)) in features_rows.iter().zip(&logits_rows).enumerate() {
        features.index_axis_mut(Axis(0), i).assign(f);
        logits.index_axis_mut(Axis(0), i).assign(l);
    }
    fit_evt(
        &features,
        &logits,
        &train.labels,
        model.num_known,
        tail_size,
        sigma,
        threshold,
        feature_space,
    )
}
