//! Metrics and evaluation protocols: closed-set accuracy, open-set AUC-ROC,
//! OOD macro-F1, attacked evaluation streams and black-box transfer runs.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    argmax_rows, attack_labels, run_attack, AttackConfig, AttackHead, ModelCeLoss,
};
use crate::data::{ImageBatch, LabeledSet, SplitData};
use crate::error::{Error, Result};
use crate::networks::OsdnModel;
use crate::openmax::OpenMaxModel;

/// One scored evaluation sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerSample {
    /// Ground truth: 1..=C known, C+1 open.
    pub true_label: usize,
    /// Argmax over known classes (the open slot is ignored for accuracy).
    pub predicted_known: usize,
    /// Thresholded OpenMax prediction over C+1 labels.
    pub openmax_label: usize,
    /// OpenMax open-set probability.
    pub open_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMeta {
    pub dataset: String,
    pub split_index: u32,
    pub attack: AttackConfig,
    pub checkpoint_hash: String,
    pub seed: u64,
}

/// The evaluation artifact: aggregate metrics plus per-sample records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentage over known-class samples only.
    pub closed_set_acc: f64,
    /// Open-vs-known separability of the open score.
    pub auc_roc: f64,
    /// Macro-averaged F1 over the C+1 label set (OOD protocol).
    pub macro_f1: Option<f64>,
    pub per_sample: Vec<PerSample>,
    pub meta: EvalMeta,
}

/// Closed-set accuracy over known-class records: `100 * correct / total`.
pub fn closed_set_accuracy(records: &[PerSample]) -> Result<f64> {
    let known: Vec<&PerSample> = records.iter().filter(|r| r.true_label != 0).collect();
    if known.is_empty() {
        return Err(Error::data("closed-set accuracy over an empty record set"));
    }
    let correct = known
        .iter()
        .filter(|r| r.predicted_known == r.true_label)
        .count();
    Ok(100.0 * correct as f64 / known.len() as f64)
}

/// Tie-aware AUC-ROC with the open set as the positive class. Equals the
/// Mann-Whitney statistic `P(open > known) + P(open = known)/2`.
pub fn auc_roc(scores: &[f64], is_open: &[bool]) -> Result<f64> {
    if scores.len() != is_open.len() {
        return Err(Error::shape("scores/labels length mismatch".to_string()));
    }
    let n_open = is_open.iter().filter(|&&o| o).count();
    let n_known = is_open.len() - n_open;
    if n_open == 0 || n_known == 0 {
        return Err(Error::data("auc needs both open and known samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tie groups (1-based)
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let r_open: f64 = ranks
        .iter()
        .zip(is_open)
        .filter(|(_, &o)| o)
        .map(|(r, _)| r)
        .sum();
    let u = r_open - (n_open * (n_open + 1)) as f64 / 2.0;
    Ok(u / (n_open as f64 * n_known as f64))
}

/// Macro-averaged F1 over the C+1 label set. Classes with neither instances
/// nor predictions are excluded; zero-division F1 counts as 0.
pub fn ood_macro_f1(predictions: &[usize], truth: &[usize], open_label: usize) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::shape("predictions/truth length mismatch".to_string()));
    }
    if predictions.is_empty() {
        return Err(Error::data("macro-F1 over an empty record set"));
    }
    for (&p, &t) in predictions.iter().zip(truth) {
        if p == 0 || p > open_label || t == 0 || t > open_label {
            return Err(Error::contract(format!(
                "label outside 1..={open_label}: prediction {p}, truth {t}"
            )));
        }
    }
    let mut f1s = Vec::new();
    for class in 1..=open_label {
        let tp = predictions
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p == class && t == class)
            .count();
        let fp = predictions
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p == class && t != class)
            .count();
        let fn_ = predictions
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p != class && t == class)
            .count();
        if tp + fp + fn_ == 0 {
            continue;
        }
        f1s.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    }
    Ok(f1s.iter().sum::<f64>() / f1s.len() as f64)
}

fn batches_of(set: &LabeledSet, batch_size: usize) -> Vec<ImageBatch> {
    let indices: Vec<usize> = (0..set.len()).collect();
    indices
        .chunks(batch_size.max(1))
        .map(|chunk| set.batch(chunk))
        .collect()
}

/// Score one (possibly attacked) evaluation stream. `attack_model` crafts
/// the adversarial examples — it equals `model` for white-box evaluation and
/// a substitute for black-box transfer.
fn score_stream(
    model: &OsdnModel,
    attack_model: &OsdnModel,
    calib: &OpenMaxModel,
    set: &LabeledSet,
    is_known: bool,
    attack: &AttackConfig,
    batch_size: usize,
) -> Result<Vec<PerSample>> {
    let mut records = Vec::with_capacity(set.len());
    for batch in batches_of(set, batch_size) {
        let (labels, provenance) = attack_labels(attack_model, &batch, is_known)?;
        let targets: Vec<usize> = labels.iter().map(|&l| l - 1).collect();
        let loss = ModelCeLoss::new(attack_model, AttackHead::Known);
        let adv = run_attack(&loss, &batch, &targets, attack, provenance)?;
        let (logits, latent) = model.infer(&adv.pixels)?;
        let preds = argmax_rows(&logits);
        for (row, &true_label) in batch.labels.iter().enumerate() {
            let v = match calib.feature_space {
                crate::openmax::FeatureSpace::Latent => latent.row(row),
                crate::openmax::FeatureSpace::Logits => logits.row(row),
            };
            let logit_row: Vec<f64> = logits.row(row).to_vec();
            let scores = calib.openmax_probs(&logit_row, v)?;
            records.push(PerSample {
                true_label,
                predicted_known: preds[row] + 1,
                openmax_label: calib.predict(&scores),
                open_score: scores.probs[calib.num_known()],
            });
        }
    }
    Ok(records)
}

fn assemble_report(
    records: Vec<PerSample>,
    open_label: usize,
    compute_f1: bool,
    meta: EvalMeta,
) -> Result<EvalReport> {
    let known: Vec<PerSample> = records
        .iter()
        .copied()
        .filter(|r| r.true_label < open_label)
        .collect();
    let closed_set_acc = closed_set_accuracy(&known)?;
    let scores: Vec<f64> = records.iter().map(|r| r.open_score).collect();
    let flags: Vec<bool> = records.iter().map(|r| r.true_label == open_label).collect();
    let auc = auc_roc(&scores, &flags)?;
    let macro_f1 = if compute_f1 {
        let preds: Vec<usize> = records.iter().map(|r| r.openmax_label).collect();
        let truth: Vec<usize> = records.iter().map(|r| r.true_label).collect();
        Some(ood_macro_f1(&preds, &truth, open_label)?)
    } else {
        None
    };
    Ok(EvalReport { closed_set_acc, auc_roc: auc, macro_f1, per_sample: records, meta })
}

/// White-box evaluation: every known and open test sample is attacked
/// against the evaluated model itself, then scored through OpenMax.
pub fn evaluate_split(
    model: &OsdnModel,
    calib: &OpenMaxModel,
    data: &SplitData,
    attack: &AttackConfig,
    batch_size: usize,
    meta: EvalMeta,
) -> Result<EvalReport> {
    evaluate_sets(model, model, calib, &data.test_known, &data.test_open, attack, batch_size, meta)
}

/// Evaluation over explicit known/open sets, with a separate attack model
/// (black-box when it differs from the scored model).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_sets(
    model: &OsdnModel,
    attack_model: &OsdnModel,
    calib: &OpenMaxModel,
    known: &LabeledSet,
    open: &LabeledSet,
    attack: &AttackConfig,
    batch_size: usize,
    meta: EvalMeta,
) -> Result<EvalReport> {
    if known.is_empty() {
        return Err(Error::data("empty known-class evaluation set"));
    }
    let open_label = model.num_known + 1;
    let mut records = score_stream(model, attack_model, calib, known, true, attack, batch_size)?;
    if !open.is_empty() {
        records.extend(score_stream(
            model,
            attack_model,
            calib,
            open,
            false,
            attack,
            batch_size,
        )?);
    }
    assemble_report(records, open_label, true, meta)
}

/// Out-of-distribution evaluation: the split's known test samples against an
/// external folder of open images, macro-F1 as the headline metric.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_ood(
    model: &OsdnModel,
    calib: &OpenMaxModel,
    known: &LabeledSet,
    ood_images: Vec<Array3<f64>>,
    open_label: usize,
    attack: &AttackConfig,
    batch_size: usize,
    meta: EvalMeta,
) -> Result<EvalReport> {
    let open = LabeledSet {
        labels: vec![open_label; ood_images.len()],
        images: ood_images,
    };
    evaluate_sets(model, model, calib, known, &open, attack, batch_size, meta)
}

/// Score pre-generated pixels (e.g. a persisted attack corpus) without any
/// further attack generation.
pub fn evaluate_pixels(
    model: &OsdnModel,
    calib: &OpenMaxModel,
    pixels: &ndarray::Array4<f64>,
    true_labels: &[usize],
    batch_size: usize,
    meta: EvalMeta,
) -> Result<EvalReport> {
    if pixels.dim().0 != true_labels.len() {
        return Err(Error::shape("pixels/labels length mismatch".to_string()));
    }
    let open_label = model.num_known + 1;
    let mut records = Vec::with_capacity(true_labels.len());
    let indices: Vec<usize> = (0..true_labels.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let sub = pixels.select(ndarray::Axis(0), chunk);
        let (logits, latent) = model.infer(&sub)?;
        let preds = argmax_rows(&logits);
        for (row, &i) in chunk.iter().enumerate() {
            let v = match calib.feature_space {
                crate::openmax::FeatureSpace::Latent => latent.row(row),
                crate::openmax::FeatureSpace::Logits => logits.row(row),
            };
            let logit_row: Vec<f64> = logits.row(row).to_vec();
            let scores = calib.openmax_probs(&logit_row, v)?;
            records.push(PerSample {
                true_label: true_labels[i],
                predicted_known: preds[row] + 1,
                openmax_label: calib.predict(&scores),
                open_score: scores.probs[calib.num_known()],
            });
        }
    }
    assemble_report(records, open_label, true, meta)
}

/// Black-box transfer: adversarial test data is generated against the
/// substitute; the target model never participates in attack generation.
#[allow(clippy::too_many_arguments)]
pub fn run_blackbox(
    target: &OsdnModel,
    target_calib: &OpenMaxModel,
    substitute: &OsdnModel,
    data: &SplitData,
    attack: &AttackConfig,
    batch_size: usize,
    meta: EvalMeta,
) -> Result<EvalReport> {
    if substitute.arch_id == target.arch_id {
        return Err(Error::config(format!(
            "substitute must differ structurally from the target (both are `{}`)",
            target.arch_id
        )));
    }
    if substitute.num_known != target.num_known {
        return Err(Error::config(
            "substitute and target must share the known-class set",
        ));
    }
    evaluate_sets(
        target,
        substitute,
        target_calib,
        &data.test_known,
        &data.test_open,
        attack,
        batch_size,
        meta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{AttackFamily, RoaRect, RoaSearch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(true_label: usize, predicted: usize) -> PerSample {
        PerSample {
            true_label,
            predicted_known: predicted,
            openmax_label: predicted,
            open_score: 0.0,
        }
    }

    #[test]
    fn accuracy_exact_fixtures() {
        let all = vec![rec(1, 1), rec(2, 2), rec(1, 1)];
        assert_eq!(closed_set_accuracy(&all).unwrap(), 100.0);
        let three_of_four = vec![rec(1, 1), rec(2, 2), rec(1, 2), rec(2, 2)];
        assert_eq!(closed_set_accuracy(&three_of_four).unwrap(), 75.0);
        assert!(closed_set_accuracy(&[]).is_err());
    }

    #[test]
    fn auc_perfect_and_ties() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let flags = [false, false, true, true];
        assert_eq!(auc_roc(&scores, &flags).unwrap(), 1.0);
        let all_same = [0.5; 6];
        let flags = [true, false, true, false, true, false];
        assert_eq!(auc_roc(&all_same, &flags).unwrap(), 0.5);
        assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n: usize = rng.gen_range(5..60);
            // quantized scores force ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0.0..1.0f64) * 8.0).round() / 8.0)
                .collect();
            let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if flags.iter().all(|&f| f) || flags.iter().all(|&f| !f) {
                continue;
            }
            let fast = auc_roc(&scores, &flags).unwrap();
            // O(n^2) pair counting
            let mut num = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                if !flags[i] {
                    continue;
                }
                for j in 0..n {
                    if flags[j] {
                        continue;
                    }
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
            let slow = num / pairs;
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let flags: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let base = auc_roc(&scores, &flags).unwrap();
        // strictly increasing transform
        let transformed: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp()).collect();
        assert!((auc_roc(&transformed, &flags).unwrap() - base).abs() < 1e-12);
        // label flip complements
        let flipped: Vec<bool> = flags.iter().map(|&f| !f).collect();
        assert!((auc_roc(&scores, &flipped).unwrap() + base - 1.0).abs() < 1e-12);
        // permutation invariance
        let mut perm: Vec<usize> = (0..40).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pf: Vec<bool> = perm.iter().map(|&i| flags[i]).collect();
        assert!((auc_roc(&ps, &pf).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_hand_computations() {
        // perfect predictions
        let truth = vec![1, 2, 3, 3, 2, 1];
        assert_eq!(ood_macro_f1(&truth, &truth, 3).unwrap(), 1.0);

        // 3-class confusion-matrix hand computation:
        // truth:  1 1 2 2 3 3 ; pred: 1 2 2 2 3 1
        let truth = vec![1, 1, 2, 2, 3, 3];
        let preds = vec![1, 2, 2, 2, 3, 1];
        // class 1: tp=1 fp=1 fn=1 -> f1 = 2/4 = 0.5
        // class 2: tp=2 fp=1 fn=0 -> f1 = 4/5 = 0.8
        // class 3: tp=1 fp=0 fn=1 -> f1 = 2/3
        let expect = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
        assert!((ood_macro_f1(&preds, &truth, 3).unwrap() - expect).abs() < 1e-12);

        // degenerate all-open predictor on balanced data
        let truth = vec![1, 2, 3, 3];
        let preds = vec![3, 3, 3, 3];
        // class 1: f1 0; class 2: f1 0; class 3 (open): tp=2 fp=2 fn=0 -> 2/3
        let expect = (0.0 + 0.0 + 2.0 / 3.0) / 3.0;
        assert!((ood_macro_f1(&preds, &truth, 3).unwrap() - expect).abs() < 1e-12);

        // absent-everywhere class excluded from the mean
        let truth = vec![1, 1, 3];
        let preds = vec![1, 1, 3];
        assert_eq!(ood_macro_f1(&preds, &truth, 3).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_rejects_bad_labels() {
        assert!(ood_macro_f1(&[4], &[1], 3).is_err());
        assert!(ood_macro_f1(&[1], &[0], 3).is_err());
    }

    // protocol-level tests on a tiny trained-ish setup
    use crate::config::RunConfig;
    use crate::data::{load_split, prepare_split_data, toy_dataset, DatasetId};
    use crate::networks::{ModelBlueprint, SubstituteSpec, Toggles};
    use crate::openmax::{calibrate_model, FeatureSpace};

    fn toy_setup() -> &'static (OsdnModel, OpenMaxModel, SplitData) {
        use std::sync::OnceLock;
        static SETUP: OnceLock<(OsdnModel, OpenMaxModel, SplitData)> = OnceLock::new();
        SETUP.get_or_init(|| {
            let mut cfg = RunConfig::default();
            cfg.model.profile = "toy".to_string();
            cfg.dadl.spatial_kernel = 3;
            let mut bp = ModelBlueprint::from_config(&cfg, 2, 16).unwrap();
            bp.toggles = Toggles::all_off();
            bp.denoiser_variant = crate::config::DenoiserVariant::None;
            let model = bp.build(7).unwrap();
            let store = toy_dataset();
            let split = load_split(DatasetId::Toy, 1).unwrap();
            let data = prepare_split_data(&store, &split, 0.1, 7).unwrap();
            // one clean epoch is enough to calibrate against
            let fit_cfg = crate::training::FitConfig {
                epochs: 1,
                learning_rate: 1e-3,
                batch_size: 32,
                seed: 7,
                attack: none_attack(),
                val_attack: false,
            };
            let out = crate::training::fit(model, &data.train, &data.val, &fit_cfg).unwrap();
            let model = out.model;
            let calib =
                calibrate_model(&model, &data.train, 5, 3, 0.95, FeatureSpace::Latent, 64)
                    .unwrap();
            (model, calib, data)
        })
    }

    fn meta(attack: &AttackConfig) -> EvalMeta {
        EvalMeta {
            dataset: "toy".into(),
            split_index: 1,
            attack: attack.clone(),
            checkpoint_hash: "test".into(),
            seed: 0,
        }
    }

    fn none_attack() -> AttackConfig {
        AttackConfig {
            family: AttackFamily::None,
            epsilon: 0.0,
            step_size: 0.01,
            iterations: 1,
            pixel_range: (0.0, 1.0),
            roa_rect: RoaRect {
                height: 2,
                width: 2,
                search: RoaSearch::Grid,
                inner_steps: 0,
                stride: 2,
            },
        }
    }

    #[test]
    fn evaluate_split_produces_consistent_report() {
        let (model, calib, data) = toy_setup();
        let attack = none_attack();
        let report =
            evaluate_split(model, calib, data, &attack, 64, meta(&attack)).unwrap();
        assert_eq!(report.per_sample.len(), data.test_known.len() + data.test_open.len());
        assert!((0.0..=100.0).contains(&report.closed_set_acc));
        assert!((0.0..=1.0).contains(&report.auc_roc));
        assert!(report.macro_f1.is_some());
        // determinism
        let again = evaluate_split(model, calib, data, &attack, 64, meta(&attack)).unwrap();
        assert_eq!(report.closed_set_acc, again.closed_set_acc);
        assert_eq!(report.auc_roc, again.auc_roc);
    }

    #[test]
    fn blackbox_rejects_identical_architecture() {
        let (model, calib, data) = toy_setup();
        let attack = none_attack();
        let err = run_blackbox(model, calib, model, data, &attack, 64, meta(&attack))
            .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn blackbox_zero_budget_equals_clean_report() {
        let (model, calib, data) = toy_setup();
        let cfg = RunConfig::default();
        let bp = ModelBlueprint::substitute(
            SubstituteSpec::ToyAlt,
            &cfg.model,
            &cfg.dadl,
            2,
            16,
        )
        .unwrap();
        let substitute = bp.build(9).unwrap();

        let mut fgsm_zero = none_attack();
        fgsm_zero.family = AttackFamily::Fgsm;
        fgsm_zero.epsilon = 0.0;
        let black = run_blackbox(
            model,
            calib,
            &substitute,
            data,
            &fgsm_zero,
            64,
            meta(&fgsm_zero),
        )
        .unwrap();
        let clean_attack = none_attack();
        let clean =
            evaluate_split(model, calib, data, &clean_attack, 64, meta(&clean_attack))
                .unwrap();
        assert_eq!(black.closed_set_acc, clean.closed_set_acc);
        assert_eq!(black.auc_roc, clean.auc_roc);
    }
}
