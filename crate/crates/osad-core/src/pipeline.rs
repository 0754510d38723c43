//! Run orchestration: the train / calibrate / attack / eval / ablate / report
//! flows behind the CLI. Every run owns one directory containing its resolved
//! config, checkpoint, calibration, history and report artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_labels, run_attack, AttackConfig, AttackHead, ModelCeLoss};
use crate::checkpoint::{CalibrationArtifact, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{read_corpus, write_corpus, Corpus, CorpusManifest};
use crate::data::{
    load_dataset, load_split, prepare_split_data, DatasetId, FolderPreproc, SplitData,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_ood, evaluate_pixels, evaluate_split, run_blackbox, EvalMeta, EvalReport,
};
use crate::networks::{ModelBlueprint, OsdnModel, SubstituteSpec, Toggles};
use crate::openmax::{calibrate_model, FeatureSpace, OpenMaxModel};
use crate::report::{write_metrics_csv, write_per_sample_csv, MetricsRow};
use crate::training::{fit, FitConfig, FitOutcome};

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: PathBuf) -> Self {
        RunPaths { dir }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn calibration(&self) -> PathBuf {
        self.dir.join("calibration.json")
    }
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.jsonl")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }
    pub fn tables_dir(&self) -> PathBuf {
        self.report_dir().join("tables")
    }
    pub fn figures_dir(&self) -> PathBuf {
        self.report_dir().join("figures")
    }
    pub fn corpus_dir(&self, name: &str) -> PathBuf {
        self.dir.join("corpus").join(name)
    }
}

/// Loaded evaluation context for a config: the split and its realized data.
pub struct Workspace {
    pub dataset: DatasetId,
    pub data: SplitData,
    pub input_size: usize,
}

pub fn load_workspace(cfg: &RunConfig) -> Result<Workspace> {
    let dataset = DatasetId::parse(&cfg.data.dataset)?;
    let split = load_split(dataset, cfg.data.split_index)?;
    let store = load_dataset(&cfg.data, dataset)?;
    let data = prepare_split_data(&store, &split, cfg.data.val_fraction, cfg.seed)?;
    Ok(Workspace { dataset, input_size: split.input_size, data })
}

pub fn resolved_attack(cfg: &RunConfig, input_size: usize) -> Result<AttackConfig> {
    AttackConfig::from_settings(&cfg.attack, input_size)
}

fn fit_config(cfg: &RunConfig, attack: AttackConfig) -> FitConfig {
    FitConfig {
        epochs: cfg.train.epochs,
        learning_rate: cfg.train.learning_rate,
        batch_size: cfg.data.batch_size,
        seed: cfg.seed,
        attack,
        val_attack: cfg.train.val_attack,
    }
}

/// Train the configured model and persist the run directory.
pub fn train_run(cfg: &RunConfig) -> Result<RunPaths> {
    let ws = load_workspace(cfg)?;
    let bp = ModelBlueprint::from_config(cfg, ws.data.split.num_known(), ws.input_size)?;
    let model = bp.build(cfg.seed)?;
    let attack = resolved_attack(cfg, ws.input_size)?;
    let outcome = fit(model, &ws.data.train, &ws.data.val, &fit_config(cfg, attack))?;
    persist_training(cfg, &outcome)
}

/// Train a substitute classifier (adversarial training, defenses off) for
/// black-box attack generation.
pub fn train_substitute_run(cfg: &RunConfig, spec: SubstituteSpec) -> Result<RunPaths> {
    let ws = load_workspace(cfg)?;
    let bp = ModelBlueprint::substitute(
        spec,
        &cfg.model,
        &cfg.dadl,
        ws.data.split.num_known(),
        ws.input_size,
    )?;
    let model = bp.build(cfg.seed)?;
    let attack = resolved_attack(cfg, ws.input_size)?;
    let outcome = fit(model, &ws.data.train, &ws.data.val, &fit_config(cfg, attack))?;
    persist_training(cfg, &outcome)
}

fn persist_training(cfg: &RunConfig, outcome: &FitOutcome) -> Result<RunPaths> {
    let paths = RunPaths::new(cfg.run_dir());
    std::fs::create_dir_all(&paths.dir)?;
    std::fs::write(paths.config(), cfg.to_toml())?;
    let ck = Checkpoint::from_model(
        &outcome.model,
        outcome.best_epoch,
        outcome.best_val_accuracy,
        cfg.hash(),
    );
    ck.save(&paths.checkpoint())?;
    let mut history = String::new();
    for record in &outcome.history {
        history.push_str(&serde_json::to_string(record)?);
        history.push('\n');
    }
    if let Some(reason) = &outcome.aborted {
        log::warn!("training aborted early: {reason}; best checkpoint retained");
        writeln!(history, "{}", serde_json::to_string(&serde_json::json!({"aborted": reason}))?)
            .unwrap();
    }
    std::fs::write(paths.history(), history)?;
    Ok(paths)
}

pub fn load_model(paths: &RunPaths) -> Result<(OsdnModel, Checkpoint)> {
    let ck = Checkpoint::load(&paths.checkpoint())?;
    let model = ck.to_model()?;
    Ok((model, ck))
}

pub fn load_calibration(paths: &RunPaths) -> Result<OpenMaxModel> {
    Ok(CalibrationArtifact::load(&paths.calibration())?.openmax)
}

/// Fit the OpenMax calibration for a trained run and persist it.
pub fn calibrate_run(cfg: &RunConfig, paths: &RunPaths) -> Result<OpenMaxModel> {
    let ws = load_workspace(cfg)?;
    let (model, _) = load_model(paths)?;
    let calib = calibrate_model(
        &model,
        &ws.data.train,
        cfg.openmax.tail_size,
        cfg.openmax.sigma,
        cfg.openmax.threshold,
        FeatureSpace::parse(&cfg.openmax.feature_space)?,
        cfg.data.batch_size,
    )?;
    CalibrationArtifact::new(calib.clone(), cfg.hash()).save(&paths.calibration())?;
    Ok(calib)
}

/// Evaluation variants beyond the plain white-box protocol.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Replay a persisted adversarial corpus instead of attacking.
    pub corpus: Option<PathBuf>,
    /// Generate attacks against this substitute run (black-box transfer).
    pub substitute: Option<PathBuf>,
    /// Treat this folder of images as the open set (OOD protocol).
    pub ood_dir: Option<PathBuf>,
}

fn eval_tag(cfg: &RunConfig, opts: &EvalOptions) -> String {
    let family = cfg.attack.family.as_str();
    if opts.corpus.is_some() {
        format!("{family}_corpus")
    } else if opts.substitute.is_some() {
        format!("{family}_blackbox")
    } else if opts.ood_dir.is_some() {
        format!("{family}_ood")
    } else {
        family.to_string()
    }
}

/// Evaluate a trained+calibrated run and persist the report artifacts.
pub fn eval_run(cfg: &RunConfig, paths: &RunPaths, opts: &EvalOptions) -> Result<EvalReport> {
    let ws = load_workspace(cfg)?;
    let (model, ck) = load_model(paths)?;
    let calib = load_calibration(paths)?;
    let attack = resolved_attack(cfg, ws.input_size)?;
    let meta = EvalMeta {
        dataset: cfg.data.dataset.clone(),
        split_index: cfg.data.split_index,
        attack: attack.clone(),
        checkpoint_hash: ck.hash(),
        seed: cfg.seed,
    };

    let report = if let Some(corpus_dir) = &opts.corpus {
        let corpus = read_corpus(corpus_dir)?;
        evaluate_pixels(
            &model,
            &calib,
            &corpus.pixels,
            &corpus.manifest.true_labels,
            cfg.data.batch_size,
            meta,
        )?
    } else if let Some(sub_dir) = &opts.substitute {
        let (substitute, _) = load_model(&RunPaths::new(sub_dir.clone()))?;
        run_blackbox(
            &model,
            &calib,
            &substitute,
            &ws.data,
            &attack,
            cfg.data.batch_size,
            meta,
        )?
    } else if let Some(ood_dir) = &opts.ood_dir {
        let preproc = FolderPreproc {
            center_crop: cfg.data.ood_center_crop,
            resize_to: Some(cfg.data.ood_resize.unwrap_or(ws.input_size)),
        };
        let images = crate::data::load_image_folder(ood_dir, &preproc)?;
        evaluate_ood(
            &model,
            &calib,
            &ws.data.test_known,
            images,
            model.num_known + 1,
            &attack,
            cfg.data.batch_size,
            meta,
        )?
    } else {
        evaluate_split(&model, &calib, &ws.data, &attack, cfg.data.batch_size, meta)?
    };

    let tag = eval_tag(cfg, opts);
    let report_dir = paths.report_dir();
    std::fs::create_dir_all(&report_dir)?;
    std::fs::write(
        report_dir.join(format!("eval_{tag}.json")),
        serde_json::to_vec_pretty(&report)?,
    )?;
    write_per_sample_csv(&report_dir.join(format!("per_sample_{tag}.csv")), &report)?;
    refresh_metrics_table(paths)?;
    Ok(report)
}

/// Rebuild the run's metric table from every eval artifact present, sorted
/// by tag so reruns are byte-stable.
pub fn refresh_metrics_table(paths: &RunPaths) -> Result<PathBuf> {
    let report_dir = paths.report_dir();
    let mut rows = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&report_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".json"))
        })
        .collect();
    entries.sort();
    let run_label = paths
        .dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("run")
        .to_string();
    for path in entries {
        let report: EvalReport = serde_json::from_slice(&std::fs::read(&path)?)?;
        let tag = path
            .file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or("eval")
            .trim_start_matches("eval_")
            .to_string();
        let mut row = MetricsRow::from_report(run_label.clone(), &report);
        row.attack = tag;
        rows.push(row);
    }
    let table = paths.tables_dir().join("metrics.csv");
    write_metrics_csv(&table, &rows)?;
    Ok(table)
}

/// Generate an adversarial corpus over the test stream (known samples with
/// ground-truth labels, open samples with model-predicted labels) and
/// persist it for replay.
pub fn attack_run(cfg: &RunConfig, paths: &RunPaths, out: Option<PathBuf>) -> Result<PathBuf> {
    let ws = load_workspace(cfg)?;
    let (model, ck) = load_model(paths)?;
    let attack = resolved_attack(cfg, ws.input_size)?;

    let mut pixel_batches = Vec::new();
    let mut true_labels = Vec::new();
    let mut source_labels = Vec::new();
    let mut provenance = Vec::new();
    for (set, is_known) in [(&ws.data.test_known, true), (&ws.data.test_open, false)] {
        if set.is_empty() {
            continue;
        }
        let indices: Vec<usize> = (0..set.len()).collect();
        for chunk in indices.chunks(cfg.data.batch_size.max(1)) {
            let batch = set.batch(chunk);
            let (labels, prov) = attack_labels(&model, &batch, is_known)?;
            let targets: Vec<usize> = labels.iter().map(|&l| l - 1).collect();
            let loss = ModelCeLoss::new(&model, AttackHead::Known);
            let adv = run_attack(&loss, &batch, &targets, &attack, prov)?;
            pixel_batches.push(adv.pixels);
            true_labels.extend(batch.labels.iter().copied());
            source_labels.extend(labels);
            provenance.extend(std::iter::repeat(prov).take(chunk.len()));
        }
    }
    if pixel_batches.is_empty() {
        return Err(Error::data("no test samples to attack"));
    }
    let views: Vec<_> = pixel_batches.iter().map(|b| b.view()).collect();
    let pixels = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::shape(format!("corpus concat: {e}")))?;
    let (count, channels, height, width) = pixels.dim();
    let corpus = Corpus {
        manifest: CorpusManifest {
            version: 1,
            count,
            channels,
            height,
            width,
            true_labels,
            source_labels,
            provenance,
            attack: attack.clone(),
            generator_arch: model.arch_id.clone(),
            generator_hash: ck.hash(),
        },
        pixels,
    };
    let dir = out.unwrap_or_else(|| paths.corpus_dir(attack.family.as_str()));
    write_corpus(&dir, &corpus)?;
    Ok(dir)
}

/// The component grid of the ablation study: every published row, encoder
/// always on.
pub fn ablation_grid() -> Vec<Toggles> {
    vec![
        Toggles { dec: false, dadl: false, ssd: false, caml: false },
        Toggles { dec: false, dadl: true, ssd: false, caml: false },
        Toggles { dec: true, dadl: false, ssd: false, caml: false },
        Toggles { dec: true, dadl: true, ssd: false, caml: false },
        Toggles { dec: false, dadl: true, ssd: true, caml: false },
        Toggles { dec: true, dadl: false, ssd: true, caml: false },
        Toggles { dec: true, dadl: false, ssd: true, caml: true },
        Toggles { dec: true, dadl: true, ssd: true, caml: false },
        Toggles { dec: true, dadl: true, ssd: true, caml: true },
    ]
}

/// Parse one grid row like `enc+dec+dadl`. The encoder token is mandatory.
pub fn parse_grid_row(row: &str) -> Result<Toggles> {
    let mut toggles = Toggles::all_off();
    let mut saw_enc = false;
    for token in row.split('+').map(str::trim).filter(|t| !t.is_empty()) {
        match token.to_ascii_lowercase().as_str() {
            "enc" => saw_enc = true,
            "dec" => toggles.dec = true,
            "dadl" => toggles.dadl = true,
            "ssd" => toggles.ssd = true,
            "caml" => toggles.caml = true,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation component `{other}`; valid: enc, dec, dadl, ssd, caml"
                )))
            }
        }
    }
    if !saw_enc {
        return Err(Error::config(format!("ablation row `{row}` must include `enc`")));
    }
    Ok(toggles)
}

/// One trained+calibrated+evaluated cell, fully in memory.
pub fn run_cell(cfg: &RunConfig) -> Result<EvalReport> {
    let ws = load_workspace(cfg)?;
    let bp = ModelBlueprint::from_config(cfg, ws.data.split.num_known(), ws.input_size)?;
    let model = bp.build(cfg.seed)?;
    let attack = resolved_attack(cfg, ws.input_size)?;
    let outcome = fit(model, &ws.data.train, &ws.data.val, &fit_config(cfg, attack.clone()))?;
    let calib = calibrate_model(
        &outcome.model,
        &ws.data.train,
        cfg.openmax.tail_size,
        cfg.openmax.sigma,
        cfg.openmax.threshold,
        FeatureSpace::parse(&cfg.openmax.feature_space)?,
        cfg.data.batch_size,
    )?;
    let meta = EvalMeta {
        dataset: cfg.data.dataset.clone(),
        split_index: cfg.data.split_index,
        attack: attack.clone(),
        checkpoint_hash: cfg.hash(),
        seed: cfg.seed,
    };
    evaluate_split(&outcome.model, &calib, &ws.data, &attack, cfg.data.batch_size, meta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dec: bool,
    pub dadl: bool,
    pub ssd: bool,
    pub caml: bool,
    pub auc_roc: Option<f64>,
    pub closed_set_acc: Option<f64>,
    pub status: String,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Train and evaluate every grid row under identical attack and derived
/// seeds, reporting per-row medians. Failed rows are recorded and the rest
/// continue.
pub fn ablate_run(
    base: &RunConfig,
    grid: &[Toggles],
    seeds: usize,
) -> Result<(Vec<AblationRow>, PathBuf)> {
    if seeds == 0 {
        return Err(Error::config("ablate needs at least one seed"));
    }
    let paths = RunPaths::new(base.run_dir());
    std::fs::create_dir_all(paths.tables_dir())?;
    std::fs::write(paths.config(), base.to_toml())?;

    let mut rows = Vec::new();
    for toggles in grid {
        let label = toggles.label();
        let mut accs = Vec::new();
        let mut aucs = Vec::new();
        let mut failure = None;
        for k in 0..seeds {
            let mut cfg = base.clone();
            cfg.model.dec = toggles.dec;
            cfg.model.dadl = toggles.dadl;
            cfg.model.ssd = toggles.ssd;
            cfg.model.caml = toggles.caml;
            cfg.seed = base.seed + k as u64;
            match run_cell(&cfg) {
                Ok(report) => {
                    accs.push(report.closed_set_acc);
                    aucs.push(report.auc_roc);
                }
                Err(e) => {
                    log::warn!("ablation row {label} seed {k} failed: {e}");
                    failure = Some(e.to_string());
                }
            }
        }
        let row = if accs.is_empty() {
            AblationRow {
                label,
                dec: toggles.dec,
                dadl: toggles.dadl,
                ssd: toggles.ssd,
                caml: toggles.caml,
                auc_roc: None,
                closed_set_acc: None,
                status: failure.unwrap_or_else(|| "no results".to_string()),
            }
        } else {
            AblationRow {
                label,
                dec: toggles.dec,
                dadl: toggles.dadl,
                ssd: toggles.ssd,
                caml: toggles.caml,
                auc_roc: Some(median(&mut aucs)),
                closed_set_acc: Some(median(&mut accs)),
                status: if failure.is_some() { "partial".into() } else { "ok".into() },
            }
        };
        rows.push(row);
    }

    let table = paths.tables_dir().join("ablation.csv");
    let mut out = String::from("enc,dec,dadl,ssd,caml,auc_roc,closed_set_acc,status\n");
    for r in &rows {
        let mark = |b: bool| if b { "x" } else { "" };
        writeln!(
            out,
            "x,{},{},{},{},{},{},{}",
            mark(r.dec),
            mark(r.dadl),
            mark(r.ssd),
            mark(r.caml),
            r.auc_roc.map(|v| format!("{v}")).unwrap_or_default(),
            r.closed_set_acc.map(|v| format!("{v}")).unwrap_or_default(),
            r.status
        )
        .unwrap();
    }
    std::fs::write(&table, out)?;
    Ok((rows, table))
}

/// Summary of report emission: artifacts written and items skipped.
#[derive(Debug, Clone, Default)]
pub struct ReportSummary {
    pub written: Vec<PathBuf>,
    pub notes: Vec<String>,
}

/// Emit tables and figures for a set of completed runs: a combined metric
/// table, clean/adversarial/reconstruction triptychs, latent exports with a
/// principal-component scatter, and pre/post denoising feature-map grids.
pub fn report_run(run_dirs: &[PathBuf], out: Option<PathBuf>) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::config("report needs at least one --run directory"));
    }
    let mut summary = ReportSummary::default();
    let mut all_rows = Vec::new();

    for dir in run_dirs {
        let paths = RunPaths::new(dir.clone());
        let run_label = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();

        // metric rows from every eval artifact present
        let report_dir = paths.report_dir();
        if report_dir.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&report_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".json"))
                })
                .collect();
            entries.sort();
            for path in entries {
                let report: EvalReport = serde_json::from_slice(&std::fs::read(&path)?)?;
                let tag = path
                    .file_stem()
                    .and_then(|n| n.to_str())
                    .unwrap_or("eval")
                    .trim_start_matches("eval_")
                    .to_string();
                let mut row = MetricsRow::from_report(run_label.clone(), &report);
                row.attack = tag;
                all_rows.push(row);
            }
        } else {
            summary.notes.push(format!("{run_label}: no eval artifacts found"));
        }

        // figures need the checkpoint and the run's own config
        let cfg = match RunConfig::load(Some(&paths.config()), &[]) {
            Ok(c) => c,
            Err(e) => {
                summary.notes.push(format!("{run_label}: config missing ({e})"));
                continue;
            }
        };
        let (model, _) = match load_model(&paths) {
            Ok(m) => m,
            Err(e) => {
                summary.notes.push(format!("{run_label}: checkpoint missing ({e})"));
                continue;
            }
        };
        let ws = load_workspace(&cfg)?;
        let figures = paths.figures_dir();
        std::fs::create_dir_all(&figures)?;
        let attack = resolved_attack(&cfg, ws.input_size)?;

        if model.toggles.dec {
            let batch = ws.data.test_known.batch(
                &(0..ws.data.test_known.len().min(cfg.eval.report_samples)).collect::<Vec<_>>(),
            );
            let path = figures.join("triptych.png");
            crate::report::render_triptych(&model, &batch, &attack, cfg.eval.report_samples, &path)?;
            summary.written.push(path);
        } else {
            summary
                .notes
                .push(format!("{run_label}: decoder disabled, triptych omitted"));
        }

        let latents = figures.join("latents.csv");
        crate::report::export_latents(
            &model,
            &[(&ws.data.test_known, "known"), (&ws.data.test_open, "open")],
            cfg.data.batch_size,
            &latents,
        )?;
        summary.written.push(latents);
        let scatter = figures.join("latent_scatter.png");
        crate::report::render_latent_scatter(
            &model,
            &[(&ws.data.test_known, "known"), (&ws.data.test_open, "open")],
            cfg.data.batch_size,
            &scatter,
        )?;
        summary.written.push(scatter);

        let fm = figures.join("feature_maps.png");
        crate::report::render_feature_maps(&model, &ws.data.test_known.images[0], 4, &fm)?;
        summary.written.push(fm);
    }

    let out_dir = out.unwrap_or_else(|| RunPaths::new(run_dirs[0].clone()).tables_dir());
    std::fs::create_dir_all(&out_dir)?;
    let combined = out_dir.join("metrics.csv");
    write_metrics_csv(&combined, &all_rows)?;
    summary.written.push(combined);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.output_dir = dir.to_path_buf();
        cfg.data.cache_dir = dir.join("cache");
        cfg.data.batch_size = 32;
        cfg.train.epochs = 1;
        cfg.model.profile = "toy".to_string();
        cfg.model.dec = false;
        cfg.model.dadl = false;
        cfg.model.ssd = false;
        cfg.model.caml = false;
        cfg.dadl.spatial_kernel = 3;
        cfg.attack.family = "fgsm".to_string();
        cfg.attack.epsilon = 0.05;
        cfg.openmax.tail_size = 5;
        cfg
    }

    #[test]
    fn train_calibrate_eval_attack_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = toy_cfg(tmp.path());
        let paths = train_run(&cfg).unwrap();
        assert!(paths.checkpoint().exists());
        assert!(paths.config().exists());
        assert!(paths.history().exists());

        calibrate_run(&cfg, &paths).unwrap();
        assert!(paths.calibration().exists());

        let report = eval_run(&cfg, &paths, &EvalOptions::default()).unwrap();
        assert!(paths.report_dir().join("eval_fgsm.json").exists());
        assert!(paths.tables_dir().join("metrics.csv").exists());
        assert!((0.0..=100.0).contains(&report.closed_set_acc));

        // corpus generation + replay matches direct evaluation
        let corpus_dir = attack_run(&cfg, &paths, None).unwrap();
        let replay = eval_run(
            &cfg,
            &paths,
            &EvalOptions { corpus: Some(corpus_dir), ..Default::default() },
        )
        .unwrap();
        assert_eq!(replay.closed_set_acc, report.closed_set_acc);
        assert_eq!(replay.auc_roc, report.auc_roc);
    }

    #[test]
    fn grid_row_parsing() {
        let t = parse_grid_row("enc+dec+dadl").unwrap();
        assert!(t.dec && t.dadl && !t.ssd && !t.caml);
        assert!(parse_grid_row("dec").is_err(), "enc is mandatory");
        assert!(parse_grid_row("enc+bogus").is_err());
        assert_eq!(ablation_grid().len(), 9);
    }
}
