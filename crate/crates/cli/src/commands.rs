use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use oodlab::analysis::{self, mean_contribution, pattern_report, PatternReport};
use oodlab::dataset::{
    gen_blobs, gen_far_ood, gen_gaussian_noise, gen_near_ood, load_labeled_csv, load_unlabeled_csv,
    save_labeled_csv, save_unlabeled_csv, stratified_split, BlobSpec, LabeledSet, UnlabeledSet,
};
use oodlab::io::atomic_write;
use oodlab::metrics::{accuracy, auroc, fpr_at_tpr, EvalReport, Groups, OodGroup, OodResult};
use oodlab::network::{self, Model};
use oodlab::scoring::{predict_batch, score_batch, Pathway, ScoreFn, ScoreKind};
use oodlab::trainer::{train, TrainConfig, TrainLog};

use crate::config::RunConfig;

const TPR_LEVEL: f64 = 0.95;

/// Independent seeds for the generated sets, all derived from the run seed.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_add(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

mod purpose {
    pub const TEST: u64 = 1;
    pub const NEAR: u64 = 2;
    pub const FAR: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const VAL_NOISE: u64 = 6;
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_config_echo(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    let path = dir.join(format!("{command}_config.txt"));
    atomic_write(&path, cfg.to_text().as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

pub struct GeneratedData {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub near: UnlabeledSet,
    pub far: UnlabeledSet,
    pub noise: UnlabeledSet,
}

/// Synthetic benchmark: Gaussian blobs with random means, midpoint near-OOD,
/// a uniform box minus the ID ball as far-OOD, and Gaussian noise.
pub fn generate(cfg: &RunConfig) -> Result<GeneratedData> {
    let seed = cfg.seed()?;
    let k: usize = cfg.parse("data.num_classes")?;
    let d: usize = cfg.parse("data.dim")?;
    let n_ood: usize = cfg.parse("data.n_ood")?;
    let blobs = BlobSpec::with_random_means(
        k,
        d,
        cfg.parse("data.mean_scale")?,
        cfg.parse("data.sigma")?,
        cfg.parse("data.n_per_class")?,
        seed,
    );
    let train_set = gen_blobs(&blobs)?;
    let test_blobs = BlobSpec {
        n_per_class: cfg.parse("data.n_test_per_class")?,
        seed: derive_seed(seed, purpose::TEST),
        ..blobs.clone()
    };
    let test = gen_blobs(&test_blobs)?;
    let near = gen_near_ood(&blobs, n_ood, derive_seed(seed, purpose::NEAR))?;
    let radius = train_set.radius();
    let halfwidth = cfg.parse::<f64>("data.far_halfwidth")? * radius;
    let far = gen_far_ood(d, n_ood, halfwidth, radius, derive_seed(seed, purpose::FAR))?;
    let noise = gen_gaussian_noise(d, n_ood, derive_seed(seed, purpose::NOISE))?;
    Ok(GeneratedData {
        train: train_set,
        test,
        near,
        far,
        noise,
    })
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = generate(cfg)?;
    let dir = cfg.data_dir();
    ensure_dir(&dir)?;
    let paths = vec![
        dir.join("id_train.csv"),
        dir.join("id_test.csv"),
        dir.join("near.csv"),
        dir.join("far.csv"),
        dir.join("noise.csv"),
    ];
    save_labeled_csv(&data.train, &paths[0])?;
    save_labeled_csv(&data.test, &paths[1])?;
    save_unlabeled_csv(&data.near, &paths[2])?;
    save_unlabeled_csv(&data.far, &paths[3])?;
    save_unlabeled_csv(&data.noise, &paths[4])?;
    write_config_echo(cfg, &dir, "gen")?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(paths)
}

fn load_train(cfg: &RunConfig) -> Result<LabeledSet> {
    let path = cfg.train_path();
    load_labeled_csv(&path, None).with_context(|| format!("loading training set {}", path.display()))
}

fn load_test(cfg: &RunConfig, num_classes: usize) -> Result<LabeledSet> {
    let path = cfg.test_path();
    load_labeled_csv(&path, Some(num_classes)).with_context(|| format!("loading test set {}", path.display()))
}

fn load_oods(cfg: &RunConfig) -> Result<Vec<UnlabeledSet>> {
    cfg.ood_paths()
        .iter()
        .map(|p| load_unlabeled_csv(p).with_context(|| format!("loading OOD set {}", p.display())))
        .collect()
}

#[derive(Serialize)]
struct TrainLogFile<'a> {
    config: serde_json::Value,
    #[serde(flatten)]
    log: &'a TrainLog,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(Model, TrainLog)> {
    let tc = cfg.train_config()?;
    let train_set = load_train(cfg)?;
    let val_id = match cfg.optional_path("data.val") {
        Some(p) => Some(load_labeled_csv(&p, Some(train_set.num_classes()))?),
        None => None,
    };
    let val_ood = match cfg.optional_path("data.val_ood") {
        Some(p) => Some(load_unlabeled_csv(&p)?),
        None => None,
    };
    let (model, log) = train(&tc, &train_set, val_id.as_ref(), val_ood.as_ref()).context("training")?;
    for e in &log.epochs {
        let mut line = format!(
            "epoch {:>3}/{} loss {:.6} acc {:.4} lr {:.6}",
            e.epoch + 1,
            tc.epochs,
            e.loss,
            e.train_acc,
            e.lr
        );
        if let Some(l) = e.lambda {
            line.push_str(&format!(" lambda {l:.6}"));
        }
        if let Some(a) = e.val_auroc {
            line.push_str(&format!(" val_auroc {a:.4}"));
        }
        println!("{line}");
    }
    match model.lambda_final.value() {
        Some(l) => println!("lambda_final {l}"),
        None => println!("lambda_final none"),
    }
    eprintln!("trained in {:.2?}", log.wall_time);

    let out = cfg.out_dir();
    ensure_dir(&out)?;
    network::serialize(&model, &out.join("model.json"))?;
    write_json(
        &TrainLogFile {
            config: cfg.to_json(),
            log: &log,
        },
        &out.join("train_log.json"),
    )?;
    write_config_echo(cfg, &out, "train")?;
    Ok((model, log))
}

/// Truncated pathway iff the model carries a threshold and was configured to
/// truncate at inference.
pub fn auto_pathway(model: &Model) -> Pathway {
    let infer = model.config.as_ref().is_none_or(|c| c.spcp.truncate_infer);
    if model.lambda_final.is_enabled() && infer {
        Pathway::Spcp
    } else {
        Pathway::Vanilla
    }
}

fn score_kind(model: &Model, cfg: &RunConfig) -> Result<ScoreKind> {
    Ok(match &model.config {
        Some(c) => c.score_fn,
        None => cfg.parse("train.score_fn")?,
    })
}

/// ID accuracy and per-OOD-set AUROC/FPR95 through one pathway.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    test: &LabeledSet,
    oods: &[UnlabeledSet],
    score_fn: ScoreFn,
    near_names: &[String],
    far_names: &[String],
    config: serde_json::Value,
) -> Result<EvalReport> {
    let preds = predict_batch(model, score_fn.pathway, test.features())?;
    let id_acc = accuracy(&preds, test.labels())?;
    let id_scores = score_batch(model, score_fn, test.features())?;
    let per_set: Vec<Result<OodResult>> = oods
        .par_iter()
        .map(|o| {
            let s = score_batch(model, score_fn, &o.features)?;
            let group = if near_names.contains(&o.name) {
                Some(OodGroup::Near)
            } else if far_names.contains(&o.name) {
                Some(OodGroup::Far)
            } else {
                None
            };
            Ok(OodResult {
                name: o.name.clone(),
                auroc: auroc(&id_scores, &s)?,
                fpr95: fpr_at_tpr(&id_scores, &s, TPR_LEVEL)?,
                group,
            })
        })
        .collect();
    let mut report = EvalReport {
        id_acc,
        score_fn: score_fn.kind.to_string(),
        pathway: score_fn.pathway.to_string(),
        lambda: match score_fn.pathway {
            Pathway::Spcp => model.lambda_final.value(),
            Pathway::Vanilla => None,
        },
        ood: per_set.into_iter().collect::<Result<_>>()?,
        groups: Groups::default(),
        config,
    };
    report.fill_groups();
    Ok(report)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.model_path();
    network::deserialize(&path).with_context(|| format!("loading model {}", path.display()))
}

fn resolve_pathway(cfg: &RunConfig, key: &str, model: &Model) -> Result<Pathway> {
    let pathway = cfg.pathway(key)?.unwrap_or_else(|| auto_pathway(model));
    if pathway == Pathway::Spcp && !model.lambda_final.is_enabled() {
        bail!("pathway spcp requested but the model has no frozen threshold (trained with rho_norm = 0?)");
    }
    Ok(pathway)
}

fn report_config(cfg: &RunConfig, model: &Model) -> serde_json::Value {
    serde_json::json!({ "run": cfg.to_json(), "model": model.config })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let model = load_model(cfg)?;
    let test = load_test(cfg, model.num_classes())?;
    let oods = load_oods(cfg)?;
    let score_fn = ScoreFn {
        kind: score_kind(&model, cfg)?,
        pathway: resolve_pathway(cfg, "eval.pathway", &model)?,
    };
    let report = evaluate(
        &model,
        &test,
        &oods,
        score_fn,
        &cfg.list("ood.near"),
        &cfg.list("ood.far"),
        report_config(cfg, &model),
    )?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    write_json(&report, &out.join("report.json"))?;
    print!("{}", report_table(&report));
    Ok(report)
}

pub fn report_table(r: &EvalReport) -> String {
    let mut out = format!("{:<12} {:<6} {:>8} {:>8}\n", "ood set", "group", "AUROC", "FPR95");
    for o in &r.ood {
        let g = match o.group {
            Some(OodGroup::Near) => "near",
            Some(OodGroup::Far) => "far",
            None => "-",
        };
        out.push_str(&format!("{:<12} {:<6} {:>8.4} {:>8.4}\n", o.name, g, o.auroc, o.fpr95));
    }
    for (name, g) in [("near avg", &r.groups.near), ("far avg", &r.groups.far)] {
        if let Some(g) = g {
            out.push_str(&format!("{:<12} {:<6} {:>8.4} {:>8.4}\n", name, "", g.auroc, g.fpr95));
        }
    }
    out.push_str(&format!(
        "ID accuracy {:.4} (score {}, pathway {})\n",
        r.id_acc, r.score_fn, r.pathway
    ));
    out
}

pub struct AnalyzeOutcome {
    pub pattern: PatternReport,
    pub files: Vec<PathBuf>,
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalyzeOutcome> {
    let model = load_model(cfg)?;
    let test = load_test(cfg, model.num_classes())?;
    let oods = load_oods(cfg)?;
    let pathway = resolve_pathway(cfg, "analyze.pathway", &model)?;
    let bins: usize = cfg.parse("analyze.bins")?;
    let mean = mean_contribution(&model, &test, pathway, cfg.averaging()?)?;
    let pattern = pattern_report(&mean)?;

    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let mut files = vec![out.join("pattern.csv")];
    analysis::export_pattern_csv(&pattern, &files[0])?;
    let score_fn = ScoreFn {
        kind: score_kind(&model, cfg)?,
        pathway,
    };
    let id_scores = score_batch(&model, score_fn, test.features())?;
    for o in &oods {
        let s = score_batch(&model, score_fn, &o.features)?;
        let path = out.join(format!("hist_{}.csv", o.name));
        analysis::export_score_histogram(&id_scores, &s, bins, &path)?;
        files.push(path);
    }
    write_config_echo(cfg, &out, "analyze")?;
    for c in &pattern.classes {
        let g = c.gini.map_or("-".to_string(), |g| format!("{g:.4}"));
        let e = c.effective_count_90.map_or("-".to_string(), |e| e.to_string());
        println!("class {} gini {g} eff90 {e}", c.class);
    }
    if let Some(g) = pattern.mean_gini {
        println!("mean gini {g:.4} (pathway {pathway})");
    }
    Ok(AnalyzeOutcome { pattern, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rho_norm: f64,
    pub val_auroc: f64,
    pub val_fpr95: f64,
    pub id_acc: f64,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub best: usize,
    pub best_model: Model,
}

/// Validation sets for the sweep: `data.val`/`data.val_ood` when given,
/// otherwise a stratified hold-out of the training set and Gaussian noise.
pub fn sweep_sets(cfg: &RunConfig, full_train: &LabeledSet) -> Result<(LabeledSet, LabeledSet, UnlabeledSet)> {
    let seed = cfg.seed()?;
    let (train_part, val_id) = match cfg.optional_path("data.val") {
        Some(p) => (full_train.clone(), load_labeled_csv(&p, Some(full_train.num_classes()))?),
        None => stratified_split(full_train, cfg.parse("sweep.val_fraction")?, derive_seed(seed, purpose::SPLIT))?,
    };
    let val_ood = match cfg.optional_path("data.val_ood") {
        Some(p) => load_unlabeled_csv(&p)?,
        None => gen_gaussian_noise(full_train.dim(), cfg.parse("sweep.val_noise")?, derive_seed(seed, purpose::VAL_NOISE))?,
    };
    Ok((train_part, val_id, val_ood))
}

/// Validation metrics of one trained model through its automatic pathway.
pub fn validation_row(model: &Model, rho_norm: f64, val_id: &LabeledSet, val_ood: &UnlabeledSet) -> Result<SweepRow> {
    let kind = model.config.as_ref().map_or(ScoreKind::Energy, |c| c.score_fn);
    let score_fn = ScoreFn {
        kind,
        pathway: auto_pathway(model),
    };
    let id = score_batch(model, score_fn, val_id.features())?;
    let ood = score_batch(model, score_fn, &val_ood.features)?;
    let preds = predict_batch(model, score_fn.pathway, val_id.features())?;
    Ok(SweepRow {
        rho_norm,
        val_auroc: auroc(&id, &ood)?,
        val_fpr95: fpr_at_tpr(&id, &ood, TPR_LEVEL)?,
        id_acc: accuracy(&preds, val_id.labels())?,
    })
}

/// Highest validation AUROC; ties go to the smaller rho_norm.
pub fn select_best(rows: &[SweepRow]) -> usize {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if r.val_auroc > b.val_auroc || (r.val_auroc == b.val_auroc && r.rho_norm < b.rho_norm) {
            best = i;
        }
    }
    best
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("rho_norm,val_auroc,val_fpr95,id_acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.rho_norm, r.val_auroc, r.val_fpr95, r.id_acc));
    }
    out
}

pub fn run_sweep(cfg: &RunConfig, full_train: &LabeledSet) -> Result<SweepOutcome> {
    let grid: Vec<f64> = cfg.parse_list("sweep.rho_norms")?;
    if grid.is_empty() {
        bail!("sweep.rho_norms is empty");
    }
    let base: TrainConfig = cfg.train_config()?;
    let (train_part, val_id, val_ood) = sweep_sets(cfg, full_train)?;
    let results: Vec<Result<(SweepRow, Model)>> = grid
        .par_iter()
        .map(|&rho| {
            let mut tc = base.clone();
            tc.spcp.rho_norm = rho;
            let (model, _) = train(&tc, &train_part, None, None).with_context(|| format!("training rho_norm = {rho}"))?;
            let row = validation_row(&model, rho, &val_id, &val_ood)?;
            Ok((row, model))
        })
        .collect();
    let mut rows = Vec::with_capacity(grid.len());
    let mut models = Vec::with_capacity(grid.len());
    for r in results {
        let (row, model) = r?;
        rows.push(row);
        models.push(model);
    }
    let best = select_best(&rows);
    Ok(SweepOutcome {
        best_model: models.swap_remove(best),
        rows,
        best,
    })
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    let full_train = load_train(cfg)?;
    let outcome = run_sweep(cfg, &full_train)?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    atomic_write(&out.join("sweep.csv"), sweep_csv(&outcome.rows).as_bytes())?;
    network::serialize(&outcome.best_model, &out.join("best_model.json"))?;
    write_config_echo(cfg, &out, "sweep")?;
    println!("{:>9} {:>9} {:>9} {:>8}", "rho_norm", "val_auroc", "val_fpr95", "id_acc");
    for (i, r) in outcome.rows.iter().enumerate() {
        let mark = if i == outcome.best { " *" } else { "" };
        println!(
            "{:>9} {:>9.4} {:>9.4} {:>8.4}{mark}",
            r.rho_norm, r.val_auroc, r.val_fpr95, r.id_acc
        );
    }
    println!("selected rho_norm = {}", outcome.rows[outcome.best].rho_norm);
    Ok(outcome)
}
