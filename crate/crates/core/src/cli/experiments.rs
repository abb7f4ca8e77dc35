use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{
    binarize, drop_ineligible_users, k_core_filter, load_ratings, popularity_partition, InteractionMatrix,
    RawRatings, SplitDataset,
};
use crate::evaluator::{evaluate_model, itempop_baseline, EvalReport};
use crate::models::{Model, ModelKind};
use crate::trainer::{
    finetune, pretrain_all, pretrain_tower, train, train_with_pretraining, PretrainedTowers, TrainConfig, TrainRun,
};

use super::{CliError, ExperimentConfig, ExperimentKind};

/// A finished run with the label it gets in summary tables.
#[derive(Clone, Debug)]
pub struct LabeledRun {
    pub label: String,
    pub run: TrainRun,
    pub model: Model<f32>,
}

impl LabeledRun {
    pub fn hr(&self) -> f64 {
        self.run.best_hr()
    }

    pub fn ndcg(&self) -> f64 {
        self.run.best_ndcg()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn load_raw(cfg: &ExperimentConfig) -> Result<RawRatings, CliError> {
    let raw = load_ratings(&cfg.data, cfg.format)?;
    if !cfg.k_core {
        return Ok(raw);
    }
    let filtered = k_core_filter(&raw, cfg.min_user_ratings, cfg.min_item_raters);
    log::info!("k-core filter kept {} of {} records", filtered.len(), raw.len());
    Ok(filtered)
}

/// Raw log after the optional k-core filter and removal of users that cannot be held out.
pub fn load_filtered(cfg: &ExperimentConfig) -> Result<RawRatings, CliError> {
    let filtered = load_raw(cfg)?;
    let (eligible, dropped) = drop_ineligible_users(&filtered, cfg.test_negatives);
    if dropped > 0 {
        log::warn!("dropped {dropped} users that cannot supply a held-out item and {} negatives", cfg.test_negatives);
    }
    Ok(eligible)
}

pub fn load_split(cfg: &ExperimentConfig) -> Result<SplitDataset, CliError> {
    let raw = load_filtered(cfg)?;
    Ok(SplitDataset::from_raw(&raw, cfg.test_negatives, cfg.train.seed)?)
}

fn run_dir(cfg: &TrainConfig, out: Option<&Path>, label: &str) -> Result<(TrainConfig, Option<PathBuf>), CliError> {
    match out {
        Some(out) => {
            let dir = out.join(label);
            create_dir(&dir)?;
            Ok((
                TrainConfig {
                    checkpoint_dir: Some(dir.clone()),
                    ..cfg.clone()
                },
                Some(dir),
            ))
        }
        None => Ok((cfg.clone(), None)),
    }
}

fn persist(run: &LabeledRun, dir: Option<&Path>) -> Result<(), CliError> {
    if let Some(dir) = dir {
        run.run.write(dir, "train")?;
        if let Some(report) = &run.run.best_report {
            report.write(dir, "eval")?;
        }
    }
    Ok(())
}

/// Trains one model: the pretrain-then-fuse pipeline when `pretrain` is set
/// and `kind` is fused, otherwise a single run from scratch with the
/// configured optimizer.
pub fn train_pipeline(
    split: &SplitDataset,
    cfg: &TrainConfig,
    kind: ModelKind,
    pretrain: bool,
    out: Option<&Path>,
    label: &str,
) -> Result<LabeledRun, CliError> {
    let (cfg, dir) = run_dir(cfg, out, label)?;
    let run = if pretrain && kind == ModelKind::Fused {
        let full = train_with_pretraining(split, &cfg)?;
        if let Some(dir) = &dir {
            for p in [Some(&full.towers.rl), Some(&full.towers.ml), full.towers.bm.as_ref()].into_iter().flatten() {
                p.run.write(dir, &format!("pretrain-{}", p.run.model))?;
            }
        }
        LabeledRun {
            label: label.to_string(),
            run: full.run,
            model: full.model,
        }
    } else {
        let mut model = Model::new(kind, cfg.model_config(split.num_users(), split.num_items()), cfg.seed)?;
        let run = train(&mut model, split, &cfg)?;
        LabeledRun {
            label: label.to_string(),
            run,
            model,
        }
    };
    persist(&run, dir.as_deref())?;
    Ok(run)
}

fn with_flags(cfg: &TrainConfig, attention: bool, balance: bool) -> TrainConfig {
    TrainConfig {
        attention,
        balance,
        ..cfg.clone()
    }
}

/// Full model and its three ablations under one seed and config. With
/// `pretrain`, towers are pretrained once per attention setting and shared
/// between the variants that use them.
pub fn ablation_suite(
    split: &SplitDataset,
    cfg: &TrainConfig,
    pretrain: bool,
    out: Option<&Path>,
) -> Result<Vec<LabeledRun>, CliError> {
    let variants = [
        ("bcfnet", true, true),
        ("bcfnet-without-a", false, true),
        ("bcfnet-without-b", true, false),
        ("bcfnet-without-ab", false, false),
    ];
    if !pretrain {
        return variants
            .iter()
            .map(|&(label, a, b)| train_pipeline(split, &with_flags(cfg, a, b), ModelKind::Fused, false, out, label))
            .collect();
    }
    let with_att = with_flags(cfg, true, true);
    let without_att = with_flags(cfg, false, true);
    let bm = pretrain_tower(ModelKind::Bm, split, &with_att)?;
    let shared = |c: &TrainConfig| -> Result<PretrainedTowers, CliError> {
        Ok(PretrainedTowers {
            rl: pretrain_tower(ModelKind::Rl, split, c)?,
            ml: pretrain_tower(ModelKind::Ml, split, c)?,
            bm: Some(bm.clone()),
        })
    };
    let towers_att = shared(&with_att)?;
    let towers_plain = shared(&without_att)?;
    let mut runs = Vec::with_capacity(4);
    for (label, a, b) in variants {
        let mut towers = if a { towers_att.clone() } else { towers_plain.clone() };
        if !b {
            towers.bm = None;
        }
        let (c, dir) = run_dir(&with_flags(cfg, a, b), out, label)?;
        let done = finetune(split, &c, towers)?;
        let run = LabeledRun {
            label: label.to_string(),
            run: done.run,
            model: done.model,
        };
        persist(&run, dir.as_deref())?;
        runs.push(run);
    }
    Ok(runs)
}

pub fn sweep_rho(
    split: &SplitDataset,
    cfg: &TrainConfig,
    grid: &[usize],
    pretrain: bool,
    out: Option<&Path>,
) -> Result<Vec<LabeledRun>, CliError> {
    grid.iter()
        .map(|&rho| {
            let c = TrainConfig { rho, ..cfg.clone() };
            train_pipeline(split, &c, ModelKind::Fused, pretrain, out, &format!("rho-{rho}"))
        })
        .collect()
}

pub fn sweep_factors(
    split: &SplitDataset,
    cfg: &TrainConfig,
    grid: &[usize],
    pretrain: bool,
    out: Option<&Path>,
) -> Result<Vec<LabeledRun>, CliError> {
    grid.iter()
        .map(|&factors| {
            let c = TrainConfig {
                factors,
                encoder_dim: None,
                embedding_dim: None,
                ..cfg.clone()
            };
            train_pipeline(split, &c, ModelKind::Fused, pretrain, out, &format!("factors-{factors}"))
        })
        .collect()
}

/// Per popularity level: the level's interactions are re-split leave-one-out
/// (users that cannot be held out are skipped) and the full model plus the
/// variant without the balance module are trained on it.
pub fn popularity_experiment(
    raw: &RawRatings,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<(usize, Result<Vec<LabeledRun>, String>)>, CliError> {
    let full: InteractionMatrix = binarize(raw)?;
    let levels = popularity_partition(&full, cfg.levels)?;
    let mut results = Vec::with_capacity(levels.len());
    for (k, sub) in levels.iter().enumerate() {
        let level = k + 1;
        let sub_raw = raw.restrict_to(sub);
        let (eligible, dropped) = drop_ineligible_users(&sub_raw, cfg.test_negatives);
        log::info!(
            "popularity level {level}: {} items, {} interactions, {dropped} of {} users skipped",
            sub.num_items(),
            sub.nnz(),
            sub.num_users()
        );
        if eligible.is_empty() {
            results.push((level, Err(format!("no user satisfies the {}-negative condition", cfg.test_negatives))));
            continue;
        }
        let split = SplitDataset::from_raw(&eligible, cfg.test_negatives, cfg.train.seed)?;
        let level_out = match out {
            Some(o) => {
                let d = o.join(format!("level-{level}"));
                create_dir(&d)?;
                Some(d)
            }
            None => None,
        };
        let mut runs = Vec::with_capacity(2);
        for (label, balance) in [("bcfnet", true), ("bcfnet-without-b", false)] {
            let c = with_flags(&cfg.train, cfg.train.attention, balance);
            runs.push(train_pipeline(&split, &c, ModelKind::Fused, cfg.pretrain, level_out.as_deref(), label)?);
        }
        results.push((level, Ok(runs)));
    }
    Ok(results)
}

fn table(header: &str, rows: &[(String, f64, f64)]) -> String {
    let mut out = format!("| {header} | HR@10 | NDCG@10 |\n|---|---|---|\n");
    for (label, hr, ndcg) in rows {
        let _ = writeln!(out, "| {label} | {hr:.4} | {ndcg:.4} |");
    }
    out
}

fn run_rows(runs: &[LabeledRun]) -> Vec<(String, f64, f64)> {
    runs.iter().map(|r| (r.label.clone(), r.hr(), r.ndcg())).collect()
}

/// Rows keyed by the swept value alone, e.g. `4` rather than `rho-4`.
fn sweep_rows(runs: &[LabeledRun], grid: &[usize]) -> Vec<(String, f64, f64)> {
    runs.iter().zip(grid).map(|(r, v)| (v.to_string(), r.hr(), r.ndcg())).collect()
}

fn report_row(r: &EvalReport) -> (String, f64, f64) {
    (r.model.clone(), r.hr, r.ndcg)
}

fn dataset_name(cfg: &ExperimentConfig) -> String {
    let parent = cfg.data.parent().and_then(|p| p.file_name());
    parent
        .or_else(|| cfg.data.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Executes the configured experiment and writes its artifacts under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    create_dir(out)?;
    write(&out.join("config.echo"), &cfg.echo())?;
    let name = dataset_name(cfg);
    let tcfg = &cfg.train;

    let summary = match cfg.kind {
        ExperimentKind::Prepare => {
            let split = load_split(cfg)?;
            split.write_manifest(&out.join("split.manifest"))?;
            let m = split.reassemble();
            let stats = format!(
                "| dataset | users | items | interactions | sparsity |\n|---|---|---|---|---|\n| {name} | {} | {} | {} | {:.4} |\n",
                m.num_users(),
                m.num_items(),
                m.nnz(),
                m.sparsity()
            );
            write(&out.join("stats.md"), &stats)?;
            stats
        }
        ExperimentKind::Pretrain => {
            let split = load_split(cfg)?;
            let c = TrainConfig {
                checkpoint_dir: Some(out.to_path_buf()),
                ..tcfg.clone()
            };
            let towers = pretrain_all(&split, &c)?;
            let mut rows = Vec::new();
            for p in [Some(&towers.rl), Some(&towers.ml), towers.bm.as_ref()].into_iter().flatten() {
                p.run.write(out, &format!("pretrain-{}", p.run.model))?;
                rows.push((p.run.model.clone(), p.run.best_hr(), p.run.best_ndcg()));
            }
            table(&format!("{name} model"), &rows)
        }
        ExperimentKind::Train | ExperimentKind::TrainPretrained => {
            let split = load_split(cfg)?;
            let pretrain = cfg.pretrain || cfg.kind == ExperimentKind::TrainPretrained;
            let label = if pretrain && cfg.model == ModelKind::Fused { "bcfnet-pretrained".to_string() } else {
                Model::<f32>::new(cfg.model, tcfg.model_config(1, 1), 0)?.tag()
            };
            let run = train_pipeline(&split, tcfg, cfg.model, pretrain, Some(out), &label)?;
            let pop = itempop_baseline(&split)?;
            table(&format!("{name} model"), &[report_row(&pop), (run.label.clone(), run.hr(), run.ndcg())])
        }
        ExperimentKind::Evaluate => {
            let split = load_split(cfg)?;
            let pop = itempop_baseline(&split)?;
            pop.write(out, "itempop")?;
            let mut rows = vec![report_row(&pop)];
            if let Some(path) = &cfg.checkpoint {
                let model = Model::<f32>::load(path)?;
                let report = evaluate_model(&model, &split, tcfg.cutoff)?;
                report.write(out, &model.tag())?;
                rows.push(report_row(&report));
            }
            table(&format!("{name} model"), &rows)
        }
        ExperimentKind::SweepRho => {
            let split = load_split(cfg)?;
            let runs = sweep_rho(&split, tcfg, &cfg.rho_grid, cfg.pretrain, Some(out))?;
            table("rho", &sweep_rows(&runs, &cfg.rho_grid))
        }
        ExperimentKind::SweepFactors => {
            let split = load_split(cfg)?;
            let runs = sweep_factors(&split, tcfg, &cfg.factor_grid, cfg.pretrain, Some(out))?;
            table("factors", &sweep_rows(&runs, &cfg.factor_grid))
        }
        ExperimentKind::AblationSuite => {
            let split = load_split(cfg)?;
            let runs = ablation_suite(&split, tcfg, cfg.pretrain, Some(out))?;
            table(&format!("{name} variant"), &run_rows(&runs))
        }
        ExperimentKind::PopularityExperiment => {
            let raw = load_raw(cfg)?;
            let levels = popularity_experiment(&raw, cfg, Some(out))?;
            let mut text = String::new();
            for (level, result) in levels {
                let _ = writeln!(text, "### popularity level {level}\n");
                match result {
                    Ok(runs) => text.push_str(&table("variant", &run_rows(&runs))),
                    Err(reason) => {
                        let _ = writeln!(text, "skipped: {reason}");
                    }
                }
                text.push('\n');
            }
            text
        }
    };
    let doc = format!("# {} on {name}\n\n{summary}", cfg.kind);
    write(&out.join("summary.md"), &doc)?;
    Ok(doc)
}
