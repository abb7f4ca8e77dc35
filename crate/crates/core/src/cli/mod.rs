//! Command-line front end: flag and config-file resolution plus the
//! experiment pipelines behind each `--kind`.

mod experiments;

pub use experiments::{
    ablation_suite, load_filtered, load_split, popularity_experiment, run, sweep_factors, sweep_rho, train_pipeline, LabeledRun,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Parser;
use thiserror::Error;

use crate::dataset::{DatasetError, RatingFormat};
use crate::diffcore::OptimizerKind;
use crate::evaluator::EvalError;
use crate::models::{ModelError, ModelKind};
use crate::trainer::{TrainConfig, TrainError};

pub const DATA_DIR_ENV: &str = "BCFNET_DATA_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Prepare,
    Pretrain,
    Train,
    TrainPretrained,
    Evaluate,
    SweepRho,
    SweepFactors,
    PopularityExperiment,
    AblationSuite,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        Self::Prepare,
        Self::Pretrain,
        Self::Train,
        Self::TrainPretrained,
        Self::Evaluate,
        Self::SweepRho,
        Self::SweepFactors,
        Self::PopularityExperiment,
        Self::AblationSuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Prepare => "prepare",
            Self::Pretrain => "pretrain",
            Self::Train => "train",
            Self::TrainPretrained => "train-pretrained",
            Self::Evaluate => "evaluate",
            Self::SweepRho => "sweep-rho",
            Self::SweepFactors => "sweep-factors",
            Self::PopularityExperiment => "popularity-experiment",
            Self::AblationSuite => "ablation-suite",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown experiment kind {s:?}")))
    }
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub data: PathBuf,
    pub format: RatingFormat,
    pub out: PathBuf,
    /// Model trained by `train` and `evaluate`.
    pub model: ModelKind,
    pub pretrain: bool,
    pub train: TrainConfig,
    pub test_negatives: usize,
    /// Apply the k-core filter before splitting. Off by default since the
    /// MovieLens releases are used as published.
    pub k_core: bool,
    pub min_user_ratings: usize,
    pub min_item_raters: usize,
    pub rho_grid: Vec<usize>,
    pub factor_grid: Vec<usize>,
    pub levels: usize,
    /// Checkpoint scored by `evaluate`.
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, data: PathBuf, out: PathBuf) -> Self {
        Self {
            kind,
            data,
            format: RatingFormat::MovielensTab,
            out,
            model: ModelKind::Fused,
            pretrain: false,
            train: TrainConfig::default(),
            test_negatives: 100,
            k_core: false,
            min_user_ratings: 20,
            min_item_raters: 5,
            rho_grid: (1..=10).collect(),
            factor_grid: vec![16, 32, 64, 128],
            levels: 3,
            checkpoint: None,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let t = &mut self.train;
        match key.as_str() {
            "kind" => self.kind = value.parse()?,
            "data" => self.data = PathBuf::from(value),
            "format" => self.format = value.parse().map_err(CliError::Config)?,
            "out" => self.out = PathBuf::from(value),
            "model" => self.model = value.parse()?,
            "pretrain" => self.pretrain = parse_bool(&key, value)?,
            "rho" => t.rho = parse_num(&key, value)?,
            "factors" => t.factors = parse_num(&key, value)?,
            "encoder_dim" => t.encoder_dim = Some(parse_num(&key, value)?),
            "embedding_dim" => t.embedding_dim = Some(parse_num(&key, value)?),
            "epochs" => t.epochs = parse_num(&key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = parse_num(&key, value)?,
            "lr" => t.lr = parse_num(&key, value)?,
            "sgd_lr" => t.sgd_lr = parse_num(&key, value)?,
            "batch_size" => t.batch_size = parse_num(&key, value)?,
            "seed" => t.seed = parse_num(&key, value)?,
            "eval_every" => t.eval_every = parse_num(&key, value)?,
            "cutoff" => t.cutoff = parse_num(&key, value)?,
            "init_std" => t.init_std = parse_num(&key, value)?,
            "fusion_alpha" => t.fusion_alpha = parse_num(&key, value)?,
            "optimizer" => {
                t.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(CliError::Config(format!("unknown optimizer {other:?}"))),
                }
            }
            "attention" => t.attention = parse_bool(&key, value)?,
            "balance" => t.balance = parse_bool(&key, value)?,
            "test_negatives" => self.test_negatives = parse_num(&key, value)?,
            "k_core" => self.k_core = parse_bool(&key, value)?,
            "min_user_ratings" => self.min_user_ratings = parse_num(&key, value)?,
            "min_item_raters" => self.min_item_raters = parse_num(&key, value)?,
            "rho_grid" => self.rho_grid = parse_grid(&key, value)?,
            "factor_grid" => self.factor_grid = parse_grid(&key, value)?,
            "levels" => self.levels = parse_num(&key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every setting of a flat `key = value` file. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key, value)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.rho_grid.is_empty() || self.factor_grid.is_empty() {
            return Err(CliError::Config("sweep grids must be non-empty".into()));
        }
        if self.rho_grid.contains(&0) || self.factor_grid.contains(&0) {
            return Err(CliError::Config("sweep grids must hold positive values".into()));
        }
        if self.levels == 0 {
            return Err(CliError::Config("levels must be at least 1".into()));
        }
        if self.min_user_ratings == 0 || self.min_item_raters == 0 {
            return Err(CliError::Config("k-core thresholds must be at least 1".into()));
        }
        Ok(())
    }

    /// The resolved configuration in the same `key = value` form the
    /// config file accepts.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let grid = |g: &[usize]| g.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut keys: BTreeMap<&str, String> = BTreeMap::new();
        keys.insert("kind", self.kind.to_string());
        keys.insert("data", self.data.display().to_string());
        keys.insert("format", self.format.to_string());
        keys.insert("out", self.out.display().to_string());
        keys.insert("model", self.model.to_string());
        keys.insert("pretrain", self.pretrain.to_string());
        keys.insert("rho", t.rho.to_string());
        keys.insert("factors", t.factors.to_string());
        if let Some(l) = t.encoder_dim {
            keys.insert("encoder_dim", l.to_string());
        }
        if let Some(h) = t.embedding_dim {
            keys.insert("embedding_dim", h.to_string());
        }
        keys.insert("epochs", t.epochs.to_string());
        keys.insert("pretrain_epochs", t.pretrain_epochs.to_string());
        keys.insert("lr", t.lr.to_string());
        keys.insert("sgd_lr", t.sgd_lr.to_string());
        keys.insert("batch_size", t.batch_size.to_string());
        keys.insert("seed", t.seed.to_string());
        keys.insert("eval_every", t.eval_every.to_string());
        keys.insert("cutoff", t.cutoff.to_string());
        keys.insert("init_std", t.init_std.to_string());
        keys.insert("fusion_alpha", t.fusion_alpha.to_string());
        keys.insert(
            "optimizer",
            match t.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .into(),
        );
        keys.insert("attention", t.attention.to_string());
        keys.insert("balance", t.balance.to_string());
        keys.insert("test_negatives", self.test_negatives.to_string());
        keys.insert("k_core", self.k_core.to_string());
        keys.insert("min_user_ratings", self.min_user_ratings.to_string());
        keys.insert("min_item_raters", self.min_item_raters.to_string());
        keys.insert("rho_grid", grid(&self.rho_grid));
        keys.insert("factor_grid", grid(&self.factor_grid));
        keys.insert("levels", self.levels.to_string());
        if let Some(c) = &self.checkpoint {
            keys.insert("checkpoint", c.display().to_string());
        }
        keys.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(CliError::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

/// `1,2,4` or an inclusive range `1..10`.
fn parse_grid(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    if let Some((lo, hi)) = value.split_once("..") {
        let (lo, hi): (usize, usize) = (parse_num(key, lo.trim())?, parse_num(key, hi.trim())?);
        return Ok((lo..=hi).collect());
    }
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

/// Command-line flags. Every flag is optional and overrides the config file.
#[derive(Debug, Parser, Default)]
#[command(name = "bcfnet", version, about = "Train and evaluate BCFNet recommenders on implicit feedback")]
pub struct Args {
    /// prepare, pretrain, train, train-pretrained, evaluate, sweep-rho,
    /// sweep-factors, popularity-experiment or ablation-suite.
    #[arg(long)]
    pub kind: Option<String>,
    /// Rating log; relative paths are also looked up under $BCFNET_DATA_DIR.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// movielens-tab, movielens-double-colon or csv.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat `key = value` file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// rl, ml, bm or fused.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub rho: Option<usize>,
    #[arg(long)]
    pub factors: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub sgd_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_balance: bool,
    #[arg(long)]
    pub pretrain: bool,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Args {
    /// Defaults, then the config file, then `--set` pairs, then flags.
    pub fn resolve(&self, data_dir: Option<&Path>) -> Result<ExperimentConfig, CliError> {
        let default_data = data_dir
            .map(|d| d.join("ml-100k").join("u.data"))
            .unwrap_or_else(|| PathBuf::from("data/ml-100k/u.data"));
        let mut cfg = ExperimentConfig::new(ExperimentKind::Train, default_data, PathBuf::from("out"));
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            cfg.apply_file_text(&text)?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.set(k, v)?;
        }
        let flags: [(&str, Option<String>); 15] = [
            ("kind", self.kind.clone()),
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("format", self.format.clone()),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("model", self.model.clone()),
            ("rho", self.rho.map(|v| v.to_string())),
            ("factors", self.factors.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("pretrain_epochs", self.pretrain_epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("sgd_lr", self.sgd_lr.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string())),
            ("pretrain", self.pretrain.then(|| "true".to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if self.no_attention {
            cfg.train.attention = false;
        }
        if self.no_balance {
            cfg.train.balance = false;
        }
        if let Some(dir) = data_dir {
            if cfg.data.is_relative() && !cfg.data.exists() {
                let candidate = dir.join(&cfg.data);
                if candidate.exists() {
                    cfg.data = candidate;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Args {
        Args::parse_from(std::iter::once("bcfnet").chain(list.iter().copied()))
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        std::fs::write(&path, "# comment\nrho = 7\nepochs=3\nkind = sweep-rho\nattention = true\n").unwrap();
        let a = args(&["--config", path.to_str().unwrap(), "--rho", "2", "--no-attention"]);
        let cfg = a.resolve(None).unwrap();
        assert_eq!(cfg.train.rho, 2);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.kind, ExperimentKind::SweepRho);
        assert!(!cfg.train.attention);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = args(&["--kind", "ablation-suite", "--factors", "16", "--pretrain", "--set", "rho_grid=1..3"])
            .resolve(None)
            .unwrap();
        assert_eq!(cfg.rho_grid, vec![1, 2, 3]);
        let mut back = ExperimentConfig::new(ExperimentKind::Prepare, PathBuf::new(), PathBuf::new());
        back.apply_file_text(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_settings_rejected() {
        assert!(args(&["--kind", "dance"]).resolve(None).is_err());
        assert!(args(&["--epochs", "0"]).resolve(None).is_err());
        assert!(args(&["--set", "factor_grid="]).resolve(None).is_err());
        let mut cfg = ExperimentConfig::new(ExperimentKind::Train, PathBuf::new(), PathBuf::new());
        assert!(cfg.apply_file_text("rho 4\n").is_err());
        assert!(cfg.apply_file_text("colour = blue\n").is_err());
        assert!(cfg.set("pretrain", "maybe").is_err());
    }

    #[test]
    fn data_dir_supplies_default_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = args(&[]).resolve(Some(dir.path())).unwrap();
        assert_eq!(cfg.data, dir.path().join("ml-100k/u.data"));
        std::fs::create_dir_all(dir.path().join("ft")).unwrap();
        std::fs::write(dir.path().join("ft/ratings.txt"), "1 1 2\n").unwrap();
        let cfg = args(&["--data", "ft/ratings.txt"]).resolve(Some(dir.path())).unwrap();
        assert_eq!(cfg.data, dir.path().join("ft/ratings.txt"));
    }
}
