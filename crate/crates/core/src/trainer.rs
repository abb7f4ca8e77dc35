//! Mini-batch training with per-epoch negative resampling, best-epoch
//! checkpointing, and the pretrain-then-fuse workflow.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{sample_training_instances, DatasetError, SplitDataset, TrainingInstances};
use crate::diffcore::{AdamConfig, DiffError, Feeds, Optimizer, OptimizerKind, SparseBatch, Tensor};
use crate::evaluator::{evaluate_model, EvalError, EvalReport, DEFAULT_CUTOFF};
use crate::models::{Model, ModelConfig, ModelError, ModelKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("{model} diverged in epoch {epoch} batch {batch}: {detail}")]
    Diverged {
        model: String,
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub rho: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub lr: f64,
    /// Step size of the SGD fine-tuning phase.
    pub sgd_lr: f64,
    pub epochs: usize,
    /// Epochs per tower when pretraining.
    pub pretrain_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eval_every: usize,
    pub cutoff: usize,
    pub factors: usize,
    pub encoder_dim: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub attention: bool,
    pub balance: bool,
    pub init_std: f64,
    /// Weight of each pretrained output vector in the fused output.
    pub fusion_alpha: f64,
    /// Directory that receives `{tag}.ckpt` for the best epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rho: 4,
            batch_size: 256,
            lr: 1e-5,
            sgd_lr: 1e-5,
            epochs: 100,
            pretrain_epochs: 100,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_every: 1,
            cutoff: DEFAULT_CUTOFF,
            factors: 128,
            encoder_dim: None,
            embedding_dim: None,
            attention: true,
            balance: true,
            init_std: 0.01,
            fusion_alpha: 1.0 / 3.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.sgd_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.epochs == 0 || self.pretrain_epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.rho == 0 {
            return fail("rho must be at least 1");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1");
        }
        Ok(())
    }

    pub fn model_config(&self, num_users: usize, num_items: usize) -> ModelConfig {
        let mut c = ModelConfig::new(num_users, num_items, self.factors)
            .with_attention(self.attention)
            .with_balance(self.balance);
        c.encoder_dim = self.encoder_dim.unwrap_or(self.factors);
        c.embedding_dim = self.embedding_dim.unwrap_or(self.factors);
        c.init_std = self.init_std;
        c
    }

    fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Adam => Optimizer::adam(AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            }),
            OptimizerKind::Sgd => Optimizer::sgd(self.sgd_lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean BCE per training instance.
    pub loss: f64,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub model: String,
    pub records: Vec<EpochRecord>,
    /// Metrics of the model as handed to `train`, before any update.
    pub initial: Option<(f64, f64)>,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: Option<usize>,
    pub best_report: Option<EvalReport>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainRun {
    pub fn best_hr(&self) -> f64 {
        self.best_report.as_ref().map_or(f64::NAN, |r| r.hr)
    }

    pub fn best_ndcg(&self) -> f64 {
        self.best_report.as_ref().map_or(f64::NAN, |r| r.ndcg)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// `epoch,loss,hr10,ndcg10,seconds`; unevaluated epochs leave metrics empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,hr10,ndcg10,seconds\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.8},{},{},{:.3}",
                r.epoch,
                r.loss,
                opt(r.hr),
                opt(r.ndcg),
                r.seconds
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("model: {}\nepochs: {}\n", self.model, self.records.len());
        if let Some((hr, ndcg)) = self.initial {
            let _ = writeln!(out, "initial: hr10={hr:.4} ndcg10={ndcg:.4}");
        }
        match self.best_epoch {
            Some(e) => {
                let _ = writeln!(out, "best_epoch: {e}\nhr10: {:.4}\nndcg10: {:.4}", self.best_hr(), self.best_ndcg());
            }
            None => out.push_str("best_epoch: none\n"),
        }
        let total: f64 = self.records.iter().map(|r| r.seconds).sum();
        let _ = writeln!(out, "seconds: {total:.1}");
        if let Some(path) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint: {}", path.display());
        }
        out
    }

    /// Writes `{stem}.csv` and `{stem}.summary.txt`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), TrainError> {
        for (name, body) in [
            (format!("{stem}.csv"), self.to_csv()),
            (format!("{stem}.summary.txt"), self.summary()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| TrainError::Io { path, source })?;
        }
        Ok(())
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the negative sample drawn for `epoch` (1-based).
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    mix(seed, 2 * epoch as u64)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    mix(seed, 2 * epoch as u64 + 1)
}

/// `(a.hr, a.ndcg)` beats `(b.hr, b.ndcg)`; equal pairs keep the earlier epoch.
fn improves(new: &EvalReport, old: Option<&EvalReport>) -> bool {
    match old {
        None => true,
        Some(old) => new.hr > old.hr || (new.hr == old.hr && new.ndcg > old.ndcg),
    }
}

/// One pass over freshly sampled instances; returns the summed loss.
fn run_epoch(
    model: &mut Model<f32>,
    split: &SplitDataset,
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
    epoch: usize,
) -> Result<(f64, usize), TrainError> {
    let instances: TrainingInstances = sample_training_instances(split, cfg.rho, epoch_seed(cfg.seed, epoch))?;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed, epoch)));

    let train = split.train();
    let mut graph = model.graph()?;
    let mut rows = SparseBatch::new(train.num_items());
    let mut cols = SparseBatch::new(train.num_users());
    let mut labels = Vec::with_capacity(cfg.batch_size);
    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        rows.clear();
        cols.clear();
        labels.clear();
        for &k in chunk {
            rows.push_row(train.row(instances.users[k]))?;
            cols.push_row(train.col(instances.items[k]))?;
            labels.push(instances.labels[k]);
        }
        let label = Tensor::new(vec![chunk.len(), 1], labels.clone())?;
        let feeds = Feeds::new()
            .sparse("user_row", &rows)
            .sparse("item_col", &cols)
            .dense("label", &label);
        let diverged = |detail: String| TrainError::Diverged {
            model: model.tag(),
            epoch,
            batch: b,
            detail,
        };
        match graph.run(model.params(), &feeds, &["loss"]) {
            Ok(()) => {}
            Err(DiffError::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"))),
            Err(e) => return Err(e.into()),
        }
        let loss = graph.loss_value().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        total += loss;
        graph.backward(model.params_mut(), 1.0)?;
        optimizer.step(model.params_mut())?;
    }
    Ok((total, instances.len()))
}

/// Trains `model` for `cfg.epochs` epochs with `cfg.optimizer`, evaluating
/// every `cfg.eval_every` epochs and after the last one. On return the
/// model holds the parameters of the best evaluated epoch (highest HR, then
/// NDCG, then earliest).
pub fn train(model: &mut Model<f32>, split: &SplitDataset, cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    let c = model.config();
    if c.num_users != split.num_users() || c.num_items != split.num_items() {
        return Err(TrainError::Config(format!(
            "model is {} x {}, split is {} x {}",
            c.num_users,
            c.num_items,
            split.num_users(),
            split.num_items()
        )));
    }
    let tag = model.tag();
    let initial = evaluate_model(model, split, cfg.cutoff)?;
    log::info!("{tag}: initial hr={:.4} ndcg={:.4}", initial.hr, initial.ndcg);

    let mut optimizer = cfg.optimizer();
    model.params_mut().reset_opt_state();
    model.params_mut().zero_grad();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, EvalReport, Vec<Tensor<f32>>)> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (loss, count) = run_epoch(model, split, cfg, &mut optimizer, epoch)?;
        let mut record = EpochRecord {
            epoch,
            loss: loss / count as f64,
            hr: None,
            ndcg: None,
            seconds: 0.0,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let report = evaluate_model(model, split, cfg.cutoff)?;
            record.hr = Some(report.hr);
            record.ndcg = Some(report.ndcg);
            if improves(&report, best.as_ref().map(|b| &b.1)) {
                best = Some((epoch, report, model.params().snapshot()));
            }
        }
        record.seconds = start.elapsed().as_secs_f64();
        log::info!(
            "{tag} epoch {epoch}: loss={:.5} hr={} ndcg={} ({:.1}s)",
            record.loss,
            record.hr.map_or("-".into(), |v| format!("{v:.4}")),
            record.ndcg.map_or("-".into(), |v| format!("{v:.4}")),
            record.seconds
        );
        records.push(record);
    }

    let (best_epoch, mut best_report) = match best {
        Some((epoch, report, snapshot)) => {
            model.params_mut().restore(&snapshot)?;
            (Some(epoch), Some(report))
        }
        None => (None, None),
    };
    if let Some(r) = best_report.as_mut() {
        r.model = tag.clone();
    }
    let checkpoint = match &cfg.checkpoint_dir {
        Some(dir) => {
            let path = dir.join(format!("{tag}.ckpt"));
            model.save(&path)?;
            Some(path)
        }
        None => None,
    };
    model.params_mut().reset_opt_state();
    Ok(TrainRun {
        model: tag,
        records,
        initial: Some((initial.hr, initial.ndcg)),
        best_epoch,
        best_report,
        checkpoint,
    })
}

/// A trained stand-alone tower and its run.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Model<f32>,
    pub run: TrainRun,
}

#[derive(Clone, Debug)]
pub struct PretrainedTowers {
    pub rl: Pretrained,
    pub ml: Pretrained,
    /// Absent when the balance module is disabled.
    pub bm: Option<Pretrained>,
}

/// Config used for one stand-alone tower: Adam, `pretrain_epochs`.
pub fn pretrain_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        epochs: cfg.pretrain_epochs,
        ..cfg.clone()
    }
}

pub fn pretrain_tower(kind: ModelKind, split: &SplitDataset, cfg: &TrainConfig) -> Result<Pretrained, TrainError> {
    let tower_cfg = pretrain_config(cfg);
    let mut model = Model::new(kind, cfg.model_config(split.num_users(), split.num_items()), cfg.seed)?;
    let run = train(&mut model, split, &tower_cfg)?;
    Ok(Pretrained { model, run })
}

/// Trains the rl, ml and (if enabled) bm towers independently from scratch with Adam.
pub fn pretrain_all(split: &SplitDataset, cfg: &TrainConfig) -> Result<PretrainedTowers, TrainError> {
    cfg.validate()?;
    Ok(PretrainedTowers {
        rl: pretrain_tower(ModelKind::Rl, split, cfg)?,
        ml: pretrain_tower(ModelKind::Ml, split, cfg)?,
        bm: cfg.balance.then(|| pretrain_tower(ModelKind::Bm, split, cfg)).transpose()?,
    })
}

/// A fused model built from pretrained towers, not yet fine-tuned.
pub fn fuse(split: &SplitDataset, cfg: &TrainConfig, towers: &PretrainedTowers) -> Result<Model<f32>, TrainError> {
    let mut fused = Model::new(
        ModelKind::Fused,
        cfg.model_config(split.num_users(), split.num_items()),
        cfg.seed,
    )?;
    fused.init_from_pretrained(
        &towers.rl.model,
        &towers.ml.model,
        towers.bm.as_ref().map(|b| &b.model),
        cfg.fusion_alpha,
    )?;
    Ok(fused)
}

#[derive(Clone, Debug)]
pub struct PretrainedRun {
    pub towers: PretrainedTowers,
    pub model: Model<f32>,
    pub run: TrainRun,
}

/// Fine-tunes a fused model seeded from `towers` with plain SGD.
pub fn finetune(split: &SplitDataset, cfg: &TrainConfig, towers: PretrainedTowers) -> Result<PretrainedRun, TrainError> {
    let mut model = fuse(split, cfg, &towers)?;
    let sgd = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        ..cfg.clone()
    };
    let run = train(&mut model, split, &sgd)?;
    Ok(PretrainedRun { towers, model, run })
}

/// Pretrains every tower, fuses them and fine-tunes the result with SGD.
pub fn train_with_pretraining(split: &SplitDataset, cfg: &TrainConfig) -> Result<PretrainedRun, TrainError> {
    let towers = pretrain_all(split, cfg)?;
    finetune(split, cfg, towers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{binarize, leave_one_out_split, parse_ratings, RatingFormat};

    fn tiny_split() -> SplitDataset {
        let mut text = String::new();
        for u in 0..6 {
            for i in 0..8 {
                if (u * 3 + i) % 4 != 0 {
                    text.push_str(&format!("u{u}\ti{i}\t1\t{}\n", i + u));
                }
            }
        }
        let raw = parse_ratings(&text, RatingFormat::MovielensTab).unwrap();
        let m = binarize(&raw).unwrap();
        leave_one_out_split(&m, &raw, 2, 3).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            pretrain_epochs: 2,
            factors: 4,
            batch_size: 8,
            lr: 1e-3,
            sgd_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_bad_config() {
        let split = tiny_split();
        let mut m = Model::new(ModelKind::Bm, small_cfg().model_config(6, 8), 0).unwrap();
        for bad in [
            TrainConfig { epochs: 0, ..small_cfg() },
            TrainConfig { batch_size: 0, ..small_cfg() },
            TrainConfig { lr: 0.0, ..small_cfg() },
            TrainConfig { rho: 0, ..small_cfg() },
        ] {
            assert!(matches!(train(&mut m, &split, &bad), Err(TrainError::Config(_))));
        }
        let mut wrong = Model::new(ModelKind::Bm, small_cfg().model_config(5, 8), 0).unwrap();
        assert!(train(&mut wrong, &split, &small_cfg()).is_err());
    }

    #[test]
    fn best_epoch_is_restored() {
        let split = tiny_split();
        let cfg = small_cfg();
        let mut m = Model::new(ModelKind::Fused, cfg.model_config(6, 8), 1).unwrap();
        let run = train(&mut m, &split, &cfg).unwrap();
        assert_eq!(run.records.len(), 3);
        let best = run.best_epoch.unwrap();
        let max_hr = run.records.iter().filter_map(|r| r.hr).fold(f64::MIN, f64::max);
        assert_eq!(run.best_hr(), max_hr);
        assert_eq!(run.records[best - 1].hr, Some(max_hr));
        let now = evaluate_model(&m, &split, 10).unwrap();
        assert_eq!(now.hr, run.best_hr());
        assert_eq!(now.ndcg, run.best_ndcg());
        assert!(run.to_csv().lines().count() == 4);
    }

    #[test]
    fn runs_are_reproducible() {
        let split = tiny_split();
        let cfg = small_cfg();
        let go = || {
            let mut m = Model::new(ModelKind::Rl, cfg.model_config(6, 8), 5).unwrap();
            let run = train(&mut m, &split, &cfg).unwrap();
            (run.losses(), m.to_checkpoint_bytes())
        };
        let (a, ma) = go();
        let (b, mb) = go();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(ma, mb);
    }

    #[test]
    fn eval_every_skips_epochs() {
        let split = tiny_split();
        let cfg = TrainConfig { eval_every: 2, epochs: 3, ..small_cfg() };
        let mut m = Model::new(ModelKind::Bm, cfg.model_config(6, 8), 0).unwrap();
        let run = train(&mut m, &split, &cfg).unwrap();
        let evaluated: Vec<bool> = run.records.iter().map(|r| r.hr.is_some()).collect();
        assert_eq!(evaluated, vec![false, true, true]);
    }

    #[test]
    fn pretraining_without_balance_has_no_bm_slot() {
        let split = tiny_split();
        let cfg = TrainConfig { balance: false, ..small_cfg() };
        let towers = pretrain_all(&split, &cfg).unwrap();
        assert!(towers.bm.is_none());
        let full = TrainConfig { balance: true, ..cfg.clone() };
        assert!(fuse(&split, &full, &towers).is_err());
        let run = finetune(&split, &cfg, towers).unwrap();
        assert_eq!(run.run.model, "bcfnet-no-balance");
    }

    #[test]
    fn checkpoint_written_for_best_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let split = tiny_split();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..small_cfg()
        };
        let towers = pretrain_all(&split, &cfg).unwrap();
        for p in [&towers.rl, &towers.ml, towers.bm.as_ref().unwrap()] {
            let path = p.run.checkpoint.as_ref().unwrap();
            let back = Model::<f32>::load(path).unwrap();
            assert_eq!(back.to_checkpoint_bytes(), p.model.to_checkpoint_bytes());
        }
    }
}
