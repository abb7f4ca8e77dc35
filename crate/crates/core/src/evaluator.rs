//! Leave-one-out ranking evaluation: each user's held-out item is ranked
//! against that user's fixed negative candidates.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{InteractionMatrix, SplitDataset};
use crate::diffcore::{DiffGraph, Real, SparseBatch};
use crate::models::{Model, ModelError};

pub const DEFAULT_CUTOFF: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no users to evaluate")]
    Empty,
    #[error("user {0} has no test entry")]
    MissingUser(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("scorer returned {got} scores for {want} candidates")]
    ScoreCount { got: usize, want: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that assigns a score to `(user, item)` candidates; higher ranks first.
pub trait Scorer {
    fn score(&mut self, user: u32, items: &[u32]) -> Result<Vec<f64>, EvalError>;
}

/// Scores candidates by the model's logit. Logits rank exactly like the
/// sigmoid output but do not saturate into ties.
pub struct ModelScorer<'a, T> {
    model: &'a Model<T>,
    train: &'a InteractionMatrix,
    graph: DiffGraph<T>,
    rows: SparseBatch,
    cols: SparseBatch,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, train: &'a InteractionMatrix) -> Result<Self, EvalError> {
        Ok(Self {
            model,
            train,
            graph: model.graph()?,
            rows: SparseBatch::new(train.num_items()),
            cols: SparseBatch::new(train.num_users()),
        })
    }
}

impl<T: Real> Scorer for ModelScorer<'_, T> {
    fn score(&mut self, user: u32, items: &[u32]) -> Result<Vec<f64>, EvalError> {
        self.rows.clear();
        self.cols.clear();
        let row = self.train.row(user);
        for &i in items {
            self.rows.push_row(row).map_err(ModelError::from)?;
            self.cols.push_row(self.train.col(i)).map_err(ModelError::from)?;
        }
        let pred = self.model.predict(&mut self.graph, &self.rows, &self.cols)?;
        Ok(pred.logit.iter().map(|v| v.as_f64()).collect())
    }
}

/// Train-matrix interaction count of each item.
pub struct PopularityScorer<'a> {
    train: &'a InteractionMatrix,
}

impl<'a> PopularityScorer<'a> {
    pub fn new(train: &'a InteractionMatrix) -> Self {
        Self { train }
    }
}

impl Scorer for PopularityScorer<'_> {
    fn score(&mut self, _user: u32, items: &[u32]) -> Result<Vec<f64>, EvalError> {
        Ok(items.iter().map(|&i| self.train.item_count(i) as f64).collect())
    }
}

/// One user's candidates in ranked order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub user: u32,
    pub test_item: u32,
    pub items: Vec<u32>,
    /// 1-based rank of the test item.
    pub test_position: usize,
}

/// Sorts `items` by descending score, ties by ascending item index.
pub fn rank_by_scores(user: u32, test_item: u32, items: &[u32], scores: &[f64]) -> Result<RankedList, EvalError> {
    if scores.len() != items.len() {
        return Err(EvalError::ScoreCount {
            got: scores.len(),
            want: items.len(),
        });
    }
    let mut order: Vec<(f64, u32)> = scores.iter().copied().zip(items.iter().copied()).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let ranked: Vec<u32> = order.into_iter().map(|(_, i)| i).collect();
    let test_position = ranked
        .iter()
        .position(|&i| i == test_item)
        .ok_or(EvalError::MissingUser(user))?
        + 1;
    Ok(RankedList {
        user,
        test_item,
        items: ranked,
        test_position,
    })
}

pub fn rank_candidates(scorer: &mut dyn Scorer, split: &SplitDataset, user: u32) -> Result<RankedList, EvalError> {
    if user as usize >= split.num_users() {
        return Err(EvalError::MissingUser(user));
    }
    let candidates = split.candidates(user);
    let scores = scorer.score(user, &candidates)?;
    rank_by_scores(user, split.test_positive(user), &candidates, &scores)
}

pub fn hr_at_k(lists: &[RankedList], k: usize) -> Result<f64, EvalError> {
    if lists.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = lists.iter().filter(|l| l.test_position <= k).count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Mean over all users of `1 / log2(rank + 1)` for hits, 0 for misses.
pub fn ndcg_at_k(lists: &[RankedList], k: usize) -> Result<f64, EvalError> {
    if lists.is_empty() {
        return Err(EvalError::Empty);
    }
    let gain: f64 = lists
        .iter()
        .filter(|l| l.test_position <= k)
        .map(|l| 1.0 / ((l.test_position + 1) as f64).log2())
        .sum();
    Ok(gain / lists.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub cutoff: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub lists: Vec<RankedList>,
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn users(&self) -> usize {
        self.lists.len()
    }

    /// `user,test_item,rank` with dense indices.
    pub fn detail_csv(&self) -> String {
        let mut out = String::from("user,test_item,rank\n");
        for l in &self.lists {
            let _ = writeln!(out, "{},{},{}", l.user, l.test_item, l.test_position);
        }
        out
    }

    pub fn summary(&self) -> String {
        let k = self.cutoff;
        let mut doc = serde_json::json!({
            "model": self.model,
            format!("hr{k}"): self.hr,
            format!("ndcg{k}"): self.ndcg,
            "users": self.users(),
        });
        if !self.config.is_empty() {
            let config: serde_json::Map<String, serde_json::Value> =
                self.config.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
            doc["config"] = config.into();
        }
        let mut out = serde_json::to_string_pretty(&doc).expect("report serializes");
        out.push('\n');
        out
    }

    /// Writes `{stem}.csv` and `{stem}.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        for (ext, body) in [("csv", self.detail_csv()), ("json", self.summary())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|source| EvalError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Ranks every user's candidates and aggregates HR and NDCG at `cutoff`.
pub fn evaluate(
    scorer: &mut dyn Scorer,
    split: &SplitDataset,
    model: &str,
    cutoff: usize,
) -> Result<EvalReport, EvalError> {
    let lists = (0..split.num_users() as u32)
        .map(|u| rank_candidates(scorer, split, u))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport {
        model: model.to_string(),
        cutoff,
        hr: hr_at_k(&lists, cutoff)?,
        ndcg: ndcg_at_k(&lists, cutoff)?,
        lists,
        config: Vec::new(),
    })
}

pub fn evaluate_model<T: Real>(model: &Model<T>, split: &SplitDataset, cutoff: usize) -> Result<EvalReport, EvalError> {
    let mut scorer = ModelScorer::new(model, split.train())?;
    evaluate(&mut scorer, split, &model.tag(), cutoff)
}

/// Ranks candidates by train popularity.
pub fn itempop_baseline(split: &SplitDataset) -> Result<EvalReport, EvalError> {
    let mut scorer = PopularityScorer::new(split.train());
    evaluate(&mut scorer, split, "itempop", DEFAULT_CUTOFF)
}
