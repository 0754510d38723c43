//! Loss functions and the alternating main/peer training loop with
//! on-the-fly adversarial example generation.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig, AttackHead, ModelCeLoss, Provenance};
use crate::autograd::params::Bound;
use crate::autograd::{Adam, Tape, Var};
use crate::data::{rotate_batch, ImageBatch, LabeledSet, RotationTag};
use crate::error::{Error, Result};
use crate::networks::OsdnModel;

const PROB_FLOOR: f64 = 1e-12;

/// Per-step loss values. Disabled terms are exactly zero and the totals are
/// the exact f64 sums of their terms in declaration order.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_adv: f64,
    pub rec: f64,
    pub ssd: f64,
    #[serde(rename = "mut")]
    pub mut_main: f64,
    pub total_main: f64,
    pub cls_clean: f64,
    pub mut_peer: f64,
    pub total_peer: f64,
}

/// Inputs of one optimization step after attack generation: the clean batch,
/// the adversarial batch crafted against (encoder, open-set head) with true
/// labels, and — when self-supervision is on — the rotated adversarial batch
/// crafted against (encoder, transformation head) with rotation labels.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub clean: Array4<f64>,
    pub targets: Vec<usize>,
    pub adv: Array4<f64>,
    pub rot: Option<(Array4<f64>, Vec<usize>)>,
}

/// Generate the adversarial inputs for one step against the current
/// parameters.
pub fn prepare_batch(
    model: &OsdnModel,
    batch: &ImageBatch,
    attack: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    let targets: Vec<usize> = batch
        .labels
        .iter()
        .map(|&l| {
            if l >= 1 && l <= model.num_known {
                Ok(l - 1)
            } else {
                Err(Error::contract(format!(
                    "training label {l} outside 1..={}",
                    model.num_known
                )))
            }
        })
        .collect::<Result<_>>()?;

    let cls_loss = ModelCeLoss::new(model, AttackHead::Known);
    let adv = run_attack(&cls_loss, batch, &targets, attack, Provenance::GroundTruth)?;

    let rot = if model.toggles.ssd {
        let tags: Vec<RotationTag> = (0..batch.len())
            .map(|_| RotationTag::new(rng.gen_range(0..4u8)).unwrap())
            .collect();
        let rotated = rotate_batch(batch, &tags)?;
        let rot_targets: Vec<usize> = tags.iter().map(|t| t.value() as usize).collect();
        let rot_loss = ModelCeLoss::new(model, AttackHead::Rotation);
        let rot_adv =
            run_attack(&rot_loss, &rotated, &rot_targets, attack, Provenance::GroundTruth)?;
        Some((rot_adv.pixels, rot_targets))
    } else {
        None
    };

    Ok(PreparedBatch { clean: batch.pixels.clone(), targets, adv: adv.pixels, rot })
}

/// Mean softmax cross-entropy: -mean_i log p(target_i).
fn ce_mean(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.select_rows(lsm, targets.to_vec());
    let s = tape.sum_all(picked);
    tape.affine(s, -1.0 / targets.len() as f64, 0.0)
}

/// Mean KL(target || learner) with the target rows held constant; the
/// learner enters through its log-softmax node so gradients flow to it only.
fn kl_mean(tape: &mut Tape, target_probs: &Array2<f64>, learner_lsm: Var) -> Var {
    let n = target_probs.nrows() as f64;
    let p = tape.constant(target_probs.clone().into_dyn());
    let ln_p = tape.constant(
        target_probs.mapv(|v| v.max(PROB_FLOOR).ln()).into_dyn(),
    );
    let diff = tape.sub(ln_p, learner_lsm);
    let weighted = tape.mul(p, diff);
    let s = tape.sum_all(weighted);
    tape.affine(s, 1.0 / n, 0.0)
}

/// Sum of squared pixel errors per image, averaged over the batch.
fn rec_loss_from(tape: &mut Tape, clean: Var, recon: Var) -> Var {
    let n = tape.shape(clean)[0] as f64;
    let diff = tape.sub(clean, recon);
    let sq = tape.mul(diff, diff);
    let s = tape.sum_all(sq);
    tape.affine(s, 1.0 / n, 0.0)
}

fn softmax_rows_of(tape: &Tape, lsm: Var) -> Array2<f64> {
    tape.value(lsm)
        .mapv(f64::exp)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

struct MainGraph {
    tape: Tape,
    bound: Bound,
    cls_adv: Var,
    rec: Option<Var>,
    ssd: Option<Var>,
    mutual: Option<Var>,
    total: Var,
    main_probs_adv: Array2<f64>,
}

/// Build the main objective: `L_cls(adv) + L_rec + L_ssd + L_mut`, with the
/// peer's clean-image prediction as the constant KL target.
fn build_main_graph(
    model: &OsdnModel,
    prep: &PreparedBatch,
    peer_probs: Option<&Array2<f64>>,
) -> Result<MainGraph> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);

    let adv = tape.leaf(prep.adv.clone().into_dyn());
    let latent = model.encode(&mut tape, &bound, adv)?;
    let logits = model.classify_known(&mut tape, &bound, latent);
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.select_rows(lsm, prep.targets.clone());
    let s = tape.sum_all(picked);
    let cls_adv = tape.affine(s, -1.0 / prep.targets.len() as f64, 0.0);
    let main_probs_adv = softmax_rows_of(&tape, lsm);

    let rec = if model.toggles.dec {
        let clean = tape.constant(prep.clean.clone().into_dyn());
        let recon = model.decode(&mut tape, &bound, latent)?;
        Some(rec_loss_from(&mut tape, clean, recon))
    } else {
        None
    };

    let ssd = match (&prep.rot, model.toggles.ssd) {
        (Some((rot_pixels, rot_targets)), true) => {
            let rx = tape.leaf(rot_pixels.clone().into_dyn());
            let rlatent = model.encode(&mut tape, &bound, rx)?;
            let rlogits = model.classify_rotation(&mut tape, &bound, rlatent)?;
            Some(ce_mean(&mut tape, rlogits, rot_targets))
        }
        (None, true) => {
            return Err(Error::contract("ssd enabled but no rotated batch prepared"))
        }
        _ => None,
    };

    let mutual = match (peer_probs, model.toggles.caml) {
        (Some(p), true) => Some(kl_mean(&mut tape, p, lsm)),
        (None, true) => {
            return Err(Error::contract("caml enabled but no peer predictions supplied"))
        }
        _ => None,
    };

    let mut total = cls_adv;
    for term in [rec, ssd, mutual].into_iter().flatten() {
        total = tape.add(total, term);
    }

    Ok(MainGraph { tape, bound, cls_adv, rec, ssd, mutual, total, main_probs_adv })
}

struct PeerGraph {
    tape: Tape,
    bound: Bound,
    cls_clean: Var,
    mutual: Var,
    total: Var,
    peer_probs_clean: Array2<f64>,
    peer_lsm: Var,
}

/// Build the peer objective up to (but not including) its KL term; the KL
/// target (the main branch's adversarial prediction) is attached later so
/// both branches see pre-update predictions.
fn build_peer_graph_base(model: &OsdnModel, prep: &PreparedBatch) -> Result<PeerGraph> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let clean = tape.leaf(prep.clean.clone().into_dyn());
    let logits = model.peer_forward(&mut tape, &bound, clean)?;
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.select_rows(lsm, prep.targets.clone());
    let s = tape.sum_all(picked);
    let cls_clean = tape.affine(s, -1.0 / prep.targets.len() as f64, 0.0);
    let peer_probs_clean = softmax_rows_of(&tape, lsm);
    Ok(PeerGraph {
        tape,
        bound,
        cls_clean,
        mutual: cls_clean, // placeholder until the KL target is attached
        total: cls_clean,
        peer_probs_clean,
        peer_lsm: lsm,
    })
}

impl PeerGraph {
    fn attach_kl(&mut self, main_probs_adv: &Array2<f64>) {
        let kl = kl_mean(&mut self.tape, main_probs_adv, self.peer_lsm);
        self.mutual = kl;
        self.total = self.tape.add(self.cls_clean, kl);
    }
}

/// The adversarial classification loss on a prepared batch (value only).
pub fn loss_cls_adv(model: &OsdnModel, x_adv: &Array4<f64>, labels: &[usize]) -> Result<f64> {
    let targets: Vec<usize> = labels
        .iter()
        .map(|&l| {
            if l >= 1 && l <= model.num_known {
                Ok(l - 1)
            } else {
                Err(Error::contract(format!("label {l} outside 1..={}", model.num_known)))
            }
        })
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.leaf(x_adv.clone().into_dyn());
    let latent = model.encode(&mut tape, &bound, x)?;
    let logits = model.classify_known(&mut tape, &bound, latent);
    let loss = ce_mean(&mut tape, logits, &targets);
    Ok(tape.scalar(loss))
}

/// The reconstruction loss `mean_i ||x_i - G(F(x_i^adv))||²` (value only).
pub fn loss_rec(model: &OsdnModel, x_clean: &Array4<f64>, x_adv: &Array4<f64>) -> Result<f64> {
    if !model.toggles.dec {
        return Err(Error::config("reconstruction loss requires the decoder (toggles.dec)"));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.leaf(x_adv.clone().into_dyn());
    let latent = model.encode(&mut tape, &bound, x)?;
    let recon = model.decode(&mut tape, &bound, latent)?;
    let clean = tape.constant(x_clean.clone().into_dyn());
    let loss = rec_loss_from(&mut tape, clean, recon);
    Ok(tape.scalar(loss))
}

/// The self-supervised denoising loss: sample rotations, rotate, attack the
/// rotated batch against the transformation head, score its cross-entropy.
pub fn loss_ssd(
    model: &OsdnModel,
    batch: &ImageBatch,
    attack: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !model.toggles.ssd {
        return Err(Error::config("ssd loss requires the transformation head (toggles.ssd)"));
    }
    let tags: Vec<RotationTag> = (0..batch.len())
        .map(|_| RotationTag::new(rng.gen_range(0..4u8)).unwrap())
        .collect();
    let rotated = rotate_batch(batch, &tags)?;
    let rot_targets: Vec<usize> = tags.iter().map(|t| t.value() as usize).collect();
    let rot_loss = ModelCeLoss::new(model, AttackHead::Rotation);
    let rot_adv = run_attack(&rot_loss, &rotated, &rot_targets, attack, Provenance::GroundTruth)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.leaf(rot_adv.pixels.into_dyn());
    let latent = model.encode(&mut tape, &bound, x)?;
    let logits = model.classify_rotation(&mut tape, &bound, latent)?;
    let loss = ce_mean(&mut tape, logits, &rot_targets);
    Ok(tape.scalar(loss))
}

/// Mean KL divergence between probability rows:
/// `mean_i Σ_k p_target ln(p_target / p_learner)`.
pub fn loss_mutual(p_target: &Array2<f64>, p_learner: &Array2<f64>) -> Result<f64> {
    if p_target.dim() != p_learner.dim() {
        return Err(Error::shape(format!(
            "distribution shape mismatch: {:?} vs {:?}",
            p_target.dim(),
            p_learner.dim()
        )));
    }
    for (name, p) in [("target", p_target), ("learner", p_learner)] {
        for row in p.rows() {
            let total: f64 = row.sum();
            if (total - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::contract(format!(
                    "{name} rows must be probability distributions (sum {total})"
                )));
            }
        }
    }
    let n = p_target.nrows() as f64;
    let mut total = 0.0;
    for (pt_row, pl_row) in p_target.rows().into_iter().zip(p_learner.rows()) {
        for (&pt, &pl) in pt_row.iter().zip(pl_row.iter()) {
            total += pt * (pt.max(PROB_FLOOR).ln() - pl.max(PROB_FLOOR).ln());
        }
    }
    Ok(total / n)
}

/// Value of the main objective on fixed prepared inputs. Used by gradient
/// checks: attacks are treated as constants of the step.
pub fn main_loss_value(
    model: &OsdnModel,
    prep: &PreparedBatch,
    peer_probs: Option<&Array2<f64>>,
) -> Result<f64> {
    let g = build_main_graph(model, prep, peer_probs)?;
    Ok(g.tape.scalar(g.total))
}

/// Gradients of the main objective for every `main.*` parameter.
pub fn main_loss_grads(
    model: &OsdnModel,
    prep: &PreparedBatch,
    peer_probs: Option<&Array2<f64>>,
) -> Result<(f64, std::collections::BTreeMap<String, ndarray::ArrayD<f64>>)> {
    let g = build_main_graph(model, prep, peer_probs)?;
    let grads = g.tape.backward(g.total)?;
    let collected = g.bound.collect_grads(&g.tape, &grads, "main.");
    Ok((g.tape.scalar(g.total), collected))
}

/// Value of the peer objective (Eq. 17) on fixed inputs.
pub fn peer_loss_value(
    model: &OsdnModel,
    prep: &PreparedBatch,
    main_probs_adv: &Array2<f64>,
) -> Result<f64> {
    let mut g = build_peer_graph_base(model, prep)?;
    g.attach_kl(main_probs_adv);
    Ok(g.tape.scalar(g.total))
}

/// Gradients of the peer objective for every `peer.*` parameter.
pub fn peer_loss_grads(
    model: &OsdnModel,
    prep: &PreparedBatch,
    main_probs_adv: &Array2<f64>,
) -> Result<(f64, std::collections::BTreeMap<String, ndarray::ArrayD<f64>>)> {
    let mut g = build_peer_graph_base(model, prep)?;
    g.attach_kl(main_probs_adv);
    let grads = g.tape.backward(g.total)?;
    let collected = g.bound.collect_grads(&g.tape, &grads, "peer.");
    Ok((g.tape.scalar(g.total), collected))
}

/// One alternating optimization step: generate adversarial inputs, update
/// the main part (encoder, decoder, heads) on its objective with the peer's
/// prediction held constant, then update the peer on its objective with the
/// main branch's prediction held constant. Returns the pre-update losses.
pub fn train_step(
    model: &mut OsdnModel,
    batch: &ImageBatch,
    attack: &AttackConfig,
    opt_main: &mut Adam,
    opt_peer: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let prep = prepare_batch(model, batch, attack, rng)?;

    // pre-update peer prediction (KL target for the main step)
    let mut peer_graph = if model.toggles.caml {
        Some(build_peer_graph_base(model, &prep)?)
    } else {
        None
    };
    let peer_probs = peer_graph.as_ref().map(|g| g.peer_probs_clean.clone());

    let main = build_main_graph(model, &prep, peer_probs.as_ref())?;
    let mut breakdown = LossBreakdown {
        cls_adv: main.tape.scalar(main.cls_adv),
        rec: main.rec.map_or(0.0, |v| main.tape.scalar(v)),
        ssd: main.ssd.map_or(0.0, |v| main.tape.scalar(v)),
        mut_main: main.mutual.map_or(0.0, |v| main.tape.scalar(v)),
        total_main: main.tape.scalar(main.total),
        ..Default::default()
    };
    if !breakdown.total_main.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite main loss {}",
            breakdown.total_main
        )));
    }
    let grads = main.tape.backward(main.total)?;
    let main_grads = main.bound.collect_grads(&main.tape, &grads, "main.");
    opt_main.step(&mut model.store, &main_grads);

    if let Some(ref mut g) = peer_graph {
        g.attach_kl(&main.main_probs_adv);
        breakdown.cls_clean = g.tape.scalar(g.cls_clean);
        breakdown.mut_peer = g.tape.scalar(g.mutual);
        breakdown.total_peer = g.tape.scalar(g.total);
        if !breakdown.total_peer.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite peer loss {}",
                breakdown.total_peer
            )));
        }
        let grads = g.tape.backward(g.total)?;
        let peer_grads = g.bound.collect_grads(&g.tape, &grads, "peer.");
        opt_peer.step(&mut model.store, &peer_grads);
    }

    Ok(breakdown)
}

/// Training-run parameters for [`fit`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub attack: AttackConfig,
    /// Attack the validation images during checkpoint selection.
    pub val_attack: bool,
}

/// One history row per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_accuracy: f64,
}

/// Result of a training run: the best-validation checkpoint and the history.
pub struct FitOutcome {
    pub model: OsdnModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Set when training aborted early; the best checkpoint so far is kept.
    pub aborted: Option<String>,
}

/// Closed-set accuracy of argmax-over-known predictions on (optionally
/// attacked) known-class images.
pub fn closed_set_accuracy_on(
    model: &OsdnModel,
    set: &LabeledSet,
    attack: Option<&AttackConfig>,
    batch_size: usize,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk);
        let targets: Vec<usize> = batch.labels.iter().map(|&l| l - 1).collect();
        let pixels = match attack {
            Some(cfg) => {
                let loss = ModelCeLoss::new(model, AttackHead::Known);
                run_attack(&loss, &batch, &targets, cfg, Provenance::GroundTruth)?.pixels
            }
            None => batch.pixels.clone(),
        };
        let (logits, _) = model.infer(&pixels)?;
        for (pred, &target) in crate::attacks::argmax_rows(&logits).iter().zip(&targets) {
            if pred == &target {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / set.len() as f64)
}

/// Epoch loop of [`train_step`] with best-checkpoint retention. After each
/// epoch, closed-set accuracy is measured on the validation hold-out
/// (attacked when `val_attack` is set) and the best checkpoint kept.
pub fn fit(mut model: OsdnModel, train: &LabeledSet, val: &LabeledSet, cfg: &FitConfig) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let mut opt_main = Adam::new(cfg.learning_rate);
    let mut opt_peer = Adam::new(cfg.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, OsdnModel)> = None;
    let mut aborted = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x657063 + epoch as u64) << 8);
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut step_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x737465700000 ^ epoch as u64);

        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = train.batch(chunk);
            match train_step(&mut model, &batch, &cfg.attack, &mut opt_main, &mut opt_peer, &mut step_rng)
            {
                Ok(b) => {
                    sums.cls_adv += b.cls_adv;
                    sums.rec += b.rec;
                    sums.ssd += b.ssd;
                    sums.mut_main += b.mut_main;
                    sums.total_main += b.total_main;
                    sums.cls_clean += b.cls_clean;
                    sums.mut_peer += b.mut_peer;
                    sums.total_peer += b.total_peer;
                    steps += 1;
                }
                Err(e @ Error::Numeric(_)) => {
                    aborted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let k = steps.max(1) as f64;
        let mean = LossBreakdown {
            cls_adv: sums.cls_adv / k,
            rec: sums.rec / k,
            ssd: sums.ssd / k,
            mut_main: sums.mut_main / k,
            total_main: sums.total_main / k,
            cls_clean: sums.cls_clean / k,
            mut_peer: sums.mut_peer / k,
            total_peer: sums.total_peer / k,
        };

        let val_attack = if cfg.val_attack { Some(&cfg.attack) } else { None };
        let val_accuracy = closed_set_accuracy_on(&model, val, val_attack, cfg.batch_size)?;
        history.push(EpochRecord { epoch, losses: mean, val_accuracy });
        let improved = best.as_ref().map_or(true, |(_, acc, _)| val_accuracy > *acc);
        if improved {
            best = Some((epoch, val_accuracy, model.clone()));
        }
    }

    let (best_epoch, best_val_accuracy, best_model) = best.ok_or_else(|| {
        Error::data(format!(
            "no completed epochs{}",
            aborted.as_deref().map(|a| format!(" ({a})")).unwrap_or_default()
        ))
    })?;
    Ok(FitOutcome { model: best_model, history, best_epoch, best_val_accuracy, aborted })
}
