//! The three towers (representation learning, matching function learning,
//! balance) and their fusion, with attention and balance ablation switches.
//!
//! Every model reads a user as its multi-hot row of the train matrix and an
//! item as its multi-hot column. Graphs expose the sparse inputs
//! `user_row` (width N) and `item_col` (width M), the dense target `label`,
//! and the named outputs `logit`, `prob`, `loss` plus whichever of
//! `a_rl`, `a_ml`, `a_bm` the model computes.

mod checkpoint;
mod towers;

pub use towers::{BalanceModule, MlTower, Mlp, RlTower};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::diffcore::{DiffError, DiffGraph, Feeds, GraphBuilder, ParamId, ParamStore, Real, SparseBatch, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Rl,
    Ml,
    Bm,
    Fused,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Rl => "rl",
            Self::Ml => "ml",
            Self::Bm => "bm",
            Self::Fused => "fused",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rl" => Ok(Self::Rl),
            "ml" => Ok(Self::Ml),
            "bm" => Ok(Self::Bm),
            "fused" | "bcfnet" => Ok(Self::Fused),
            other => Err(ModelError::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Layer widths and ablation flags. `factors` is the predictive factor count
/// `f`; `encoder_dim`, `embedding_dim` and `balance_dim` are `l`, `h`, `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub factors: usize,
    pub encoder_dim: usize,
    pub embedding_dim: usize,
    pub balance_dim: usize,
    pub attention: bool,
    pub balance: bool,
    pub init_std: f64,
}

impl ModelConfig {
    /// `l = h = r = f`, attention and balance on.
    pub fn new(num_users: usize, num_items: usize, factors: usize) -> Self {
        Self {
            num_users,
            num_items,
            factors,
            encoder_dim: factors,
            embedding_dim: factors,
            balance_dim: factors,
            attention: true,
            balance: true,
            init_std: 0.01,
        }
    }

    pub fn with_attention(mut self, on: bool) -> Self {
        self.attention = on;
        self
    }

    pub fn with_balance(mut self, on: bool) -> Self {
        self.balance = on;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("factors", self.factors),
            ("encoder_dim", self.encoder_dim),
            ("embedding_dim", self.embedding_dim),
            ("balance_dim", self.balance_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.balance_dim != self.factors {
            return Err(ModelError::Config(format!(
                "balance_dim {} must equal factors {}",
                self.balance_dim, self.factors
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(ModelError::Config(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }
}

/// Activations of one forward pass, one row per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub logit: Vec<T>,
    pub prob: Vec<T>,
    pub a_rl: Option<Tensor<T>>,
    pub a_ml: Option<Tensor<T>>,
    pub a_bm: Option<Tensor<T>>,
}

/// A stand-alone tower or the fused network, owning its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    kind: ModelKind,
    config: ModelConfig,
    params: ParamStore<T>,
    rl: Option<RlTower>,
    ml: Option<MlTower>,
    bm: Option<BalanceModule>,
    fusion_out: Option<ParamId>,
}

/// Per-parameter seed so a tower initializes identically whether it stands
/// alone or sits inside the fused model.
pub(crate) fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<T: Real> Model<T> {
    /// Gaussian-initialized weights, zero biases.
    pub fn new(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let standalone = kind != ModelKind::Fused;
        let rl = matches!(kind, ModelKind::Rl | ModelKind::Fused)
            .then(|| RlTower::new(&mut params, &config, standalone, seed))
            .transpose()?;
        let ml = matches!(kind, ModelKind::Ml | ModelKind::Fused)
            .then(|| MlTower::new(&mut params, &config, standalone, seed))
            .transpose()?;
        let bm = (kind == ModelKind::Bm || (kind == ModelKind::Fused && config.balance))
            .then(|| BalanceModule::new(&mut params, &config, standalone, seed))
            .transpose()?;
        let fusion_out = if kind == ModelKind::Fused {
            let blocks = if config.balance { 3 } else { 2 };
            let width = blocks * config.factors;
            let init = crate::diffcore::gaussian_init(
                &[width, 1],
                0.0,
                config.init_std,
                param_seed(seed, "fusion.out"),
            )?;
            Some(params.add("fusion.out", init)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            config,
            params,
            rl,
            ml,
            bm,
            fusion_out,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn rl(&self) -> Option<&RlTower> {
        self.rl.as_ref()
    }

    pub fn ml(&self) -> Option<&MlTower> {
        self.ml.as_ref()
    }

    pub fn bm(&self) -> Option<&BalanceModule> {
        self.bm.as_ref()
    }

    pub fn fusion_out(&self) -> Option<ParamId> {
        self.fusion_out
    }

    /// Report label: `rl`, `ml`, `bm` or `bcfnet`, with ablation suffixes.
    pub fn tag(&self) -> String {
        let c = &self.config;
        let mut tag = match self.kind {
            ModelKind::Fused => "bcfnet".to_string(),
            kind => kind.tag().to_string(),
        };
        if !c.attention && self.kind != ModelKind::Bm {
            tag.push_str("-no-attention");
        }
        if !c.balance && self.kind == ModelKind::Fused {
            tag.push_str("-no-balance");
        }
        tag
    }

    /// Builds the training/scoring graph for this model.
    pub fn graph(&self) -> Result<DiffGraph<T>, ModelError> {
        let mut g = GraphBuilder::new(&self.params);
        let user_row = g.sparse_input("user_row", self.config.num_items)?;
        let item_col = g.sparse_input("item_col", self.config.num_users)?;
        let label = g.dense_input("label", 1)?;

        let mut blocks = Vec::with_capacity(3);
        if let Some(rl) = &self.rl {
            let (p, q, a) = rl.build(&mut g, user_row, item_col)?;
            g.name(p, "p_u")?;
            g.name(q, "q_i")?;
            g.name(a, "a_rl")?;
            blocks.push((a, rl.out));
        }
        if let Some(bm) = &self.bm {
            let a = bm.build(&mut g, user_row, item_col)?;
            g.name(a, "a_bm")?;
            blocks.push((a, bm.out));
        }
        if let Some(ml) = &self.ml {
            let a = ml.build(&mut g, user_row, item_col)?;
            g.name(a, "a_ml")?;
            blocks.push((a, ml.out));
        }

        let logit = match self.fusion_out {
            Some(w) => {
                let nodes: Vec<_> = blocks.iter().map(|&(a, _)| a).collect();
                let joined = g.concat(&nodes)?;
                g.linear(joined, w, None)?
            }
            None => {
                let (a, out) = blocks[0];
                let out = out.ok_or_else(|| ModelError::Config("stand-alone tower without output weights".into()))?;
                g.linear(a, out, None)?
            }
        };
        g.name(logit, "logit")?;
        let prob = g.sigmoid(logit)?;
        g.name(prob, "prob")?;
        let loss = g.bce_loss(prob, label)?;
        g.name(loss, "loss")?;
        Ok(g.build())
    }

    fn part_names(&self) -> Vec<&'static str> {
        let mut names = vec!["logit", "prob"];
        if self.rl.is_some() {
            names.push("a_rl");
        }
        if self.ml.is_some() {
            names.push("a_ml");
        }
        if self.bm.is_some() {
            names.push("a_bm");
        }
        names
    }

    /// Forward pass over a batch of `(user row, item column)` pairs.
    pub fn predict(
        &self,
        graph: &mut DiffGraph<T>,
        user_rows: &SparseBatch,
        item_cols: &SparseBatch,
    ) -> Result<Prediction<T>, ModelError> {
        let feeds = Feeds::new().sparse("user_row", user_rows).sparse("item_col", item_cols);
        let names = self.part_names();
        graph.run(&self.params, &feeds, &names)?;
        let part = |name: &str| -> Result<Option<Tensor<T>>, ModelError> {
            if names.contains(&name) {
                Ok(Some(graph.output(name)?))
            } else {
                Ok(None)
            }
        };
        Ok(Prediction {
            logit: graph.values("logit")?.to_vec(),
            prob: graph.values("prob")?.to_vec(),
            a_rl: part("a_rl")?,
            a_ml: part("a_ml")?,
            a_bm: part("a_bm")?,
        })
    }

    /// Single-pair forward pass on a fresh graph. `user_row` holds the item
    /// indices of the user's ones, `item_col` the user indices of the item's.
    pub fn forward_pair(&self, user_row: &[u32], item_col: &[u32]) -> Result<Prediction<T>, ModelError> {
        let mut graph = self.graph()?;
        let rows = SparseBatch::from_rows(self.config.num_items, &[user_row])?;
        let cols = SparseBatch::from_rows(self.config.num_users, &[item_col])?;
        self.predict(&mut graph, &rows, &cols)
    }

    /// Seeds a fused model from pretrained towers: tower parameters are
    /// copied verbatim and the fusion weights become
    /// `[alpha * rl.out; alpha * bm.out; alpha * ml.out]`.
    pub fn init_from_pretrained(
        &mut self,
        rl: &Model<T>,
        ml: &Model<T>,
        bm: Option<&Model<T>>,
        alpha: f64,
    ) -> Result<(), ModelError> {
        if self.kind != ModelKind::Fused {
            return Err(ModelError::Config(format!(
                "init_from_pretrained needs a fused model, got {}",
                self.kind
            )));
        }
        let expect = |m: &Model<T>, kind: ModelKind| {
            if m.kind == kind {
                Ok(())
            } else {
                Err(ModelError::Checkpoint(format!("expected a {kind} checkpoint, got {}", m.kind)))
            }
        };
        expect(rl, ModelKind::Rl)?;
        expect(ml, ModelKind::Ml)?;
        let bm = match (self.config.balance, bm) {
            (true, Some(bm)) => {
                expect(bm, ModelKind::Bm)?;
                Some(bm)
            }
            (true, None) => {
                return Err(ModelError::Checkpoint("balance module enabled but no bm checkpoint given".into()))
            }
            (false, _) => None,
        };

        let mut fusion = Vec::with_capacity(3 * self.config.factors);
        let mut sources = vec![(rl, "rl.out")];
        if let Some(bm) = bm {
            sources.push((bm, "bm.out"));
        }
        sources.push((ml, "ml.out"));
        for (src, out_name) in sources {
            for p in src.params.iter() {
                if p.name == out_name {
                    continue;
                }
                self.copy_param(&p.name, &p.value)?;
            }
            let out = src
                .params
                .find(out_name)
                .ok_or_else(|| ModelError::Checkpoint(format!("{out_name} missing")))?;
            let out = src.params.value(out);
            if out.shape() != [self.config.factors, 1] {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {out_name}: shape {:?}, expected [{}, 1]",
                    out.shape(),
                    self.config.factors
                )));
            }
            fusion.extend(out.data().iter().map(|&w| w * T::of(alpha)));
        }
        let id = self.fusion_out.expect("fused model has fusion weights");
        let width = self.params.value(id).len();
        if fusion.len() != width {
            return Err(ModelError::Checkpoint(format!(
                "fusion.out: {} pretrained weights for width {width}",
                fusion.len()
            )));
        }
        self.params.get_mut(id).value = Tensor::new(vec![width, 1], fusion)?;
        self.params.reset_opt_state();
        Ok(())
    }

    fn copy_param(&mut self, name: &str, value: &Tensor<T>) -> Result<(), ModelError> {
        let id = self
            .params
            .find(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("parameter {name} has no slot in this model")))?;
        let slot = &mut self.params.get_mut(id).value;
        if slot.shape() != value.shape() {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name}: shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        slot.clone_from(value);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::new(4, 6, 2)
    }

    fn set(model: &mut Model<f64>, name: &str, value: f64) {
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).value.data_mut().fill(value);
    }

    #[test]
    fn zero_output_weights_give_half() {
        for kind in [ModelKind::Rl, ModelKind::Ml, ModelKind::Bm] {
            let mut m: Model<f64> = Model::new(kind, cfg(), 3).unwrap();
            set(&mut m, &format!("{kind}.out"), 0.0);
            let p = m.forward_pair(&[0, 2], &[1]).unwrap();
            assert_eq!(p.prob, vec![0.5], "{kind}");
        }
        let mut m: Model<f64> = Model::new(ModelKind::Fused, cfg(), 3).unwrap();
        set(&mut m, "fusion.out", 0.0);
        assert_eq!(m.forward_pair(&[5], &[0, 3]).unwrap().prob, vec![0.5]);
    }

    #[test]
    fn empty_inputs_leave_only_biases() {
        let mut m: Model<f64> = Model::new(ModelKind::Bm, cfg(), 1).unwrap();
        set(&mut m, "bm.out", 1.0);
        let p = m.forward_pair(&[], &[2]).unwrap();
        assert_eq!(p.a_bm.unwrap().data(), &[0.0, 0.0]);
        assert_eq!(p.prob, vec![0.5]);

        let mut m: Model<f64> = Model::new(ModelKind::Rl, cfg(), 1).unwrap();
        set(&mut m, "rl.user_mlp.0.bias", 0.3);
        set(&mut m, "rl.user_mlp.1.bias", 0.2);
        let p_u = {
            let mut g = m.graph().unwrap();
            let rows = SparseBatch::from_rows(6, &[Vec::<u32>::new()]).unwrap();
            let cols = SparseBatch::from_rows(4, &[vec![1u32]]).unwrap();
            m.predict(&mut g, &rows, &cols).unwrap();
            g.output("p_u").unwrap()
        };
        // a_0 = 0 so the first layer outputs relu(0.3); the second adds its bias
        // to 0.3 * (column sums of its weight).
        let w1 = m.params().value(m.params().find("rl.user_mlp.1.weight").unwrap());
        for k in 0..2 {
            let col: f64 = (0..4).map(|j| w1.data()[j * 2 + k]).sum();
            assert!((p_u.data()[k] - (0.3 * col + 0.2).max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_selects_embedding_rows() {
        let m: Model<f64> = Model::new(ModelKind::Bm, cfg(), 9).unwrap();
        let p = m.params().value(m.bm().unwrap().user_embedding).clone();
        let q = m.params().value(m.bm().unwrap().item_embedding).clone();
        let a = m.forward_pair(&[4], &[1]).unwrap().a_bm.unwrap();
        for k in 0..2 {
            assert_eq!(a.data()[k], p.row(4)[k] * q.row(1)[k]);
        }
    }

    #[test]
    fn ablation_shapes() {
        let full: Model<f32> = Model::new(ModelKind::Fused, cfg(), 0).unwrap();
        let cf: Model<f32> = Model::new(ModelKind::Fused, cfg().with_attention(false).with_balance(false), 0).unwrap();
        let fusion = |m: &Model<f32>| m.params().value(m.fusion_out().unwrap()).shape().to_vec();
        assert_eq!(fusion(&full), vec![6, 1]);
        assert_eq!(fusion(&cf), vec![4, 1]);
        assert!(cf.bm().is_none());
        assert!(cf.params().find("rl.user_attention.weight").is_none());
        let w = cf.params().value(cf.params().find("rl.user_mlp.0.weight").unwrap());
        assert_eq!(w.shape(), &[2, 4]);
        let w = cf.params().value(cf.params().find("ml.mlp.0.weight").unwrap());
        assert_eq!(w.shape(), &[4, 8]);
        let w = full.params().value(full.params().find("ml.mlp.0.weight").unwrap());
        assert_eq!(w.shape(), &[8, 8]);
    }

    #[test]
    fn towers_initialize_like_their_fused_copy() {
        let rl: Model<f32> = Model::new(ModelKind::Rl, cfg(), 42).unwrap();
        let fused: Model<f32> = Model::new(ModelKind::Fused, cfg(), 42).unwrap();
        for p in rl.params().iter().filter(|p| p.name != "rl.out") {
            let id = fused.params().find(&p.name).unwrap();
            assert_eq!(fused.params().value(id), &p.value, "{}", p.name);
        }
    }

    #[test]
    fn pretrained_fusion_averages_logits() {
        let c = cfg();
        let rl: Model<f64> = Model::new(ModelKind::Rl, c.clone(), 1).unwrap();
        let ml: Model<f64> = Model::new(ModelKind::Ml, c.clone(), 2).unwrap();
        let bm: Model<f64> = Model::new(ModelKind::Bm, c.clone(), 3).unwrap();
        let mut fused: Model<f64> = Model::new(ModelKind::Fused, c, 4).unwrap();
        fused.init_from_pretrained(&rl, &ml, Some(&bm), 1.0 / 3.0).unwrap();
        let (row, col) = (&[0u32, 3, 5][..], &[1u32, 2][..]);
        let mean = (rl.forward_pair(row, col).unwrap().logit[0]
            + ml.forward_pair(row, col).unwrap().logit[0]
            + bm.forward_pair(row, col).unwrap().logit[0])
            / 3.0;
        let got = fused.forward_pair(row, col).unwrap().logit[0];
        assert!((got - mean).abs() < 1e-15, "{got} vs {mean}");
    }

    #[test]
    fn pretrained_balance_alone_reproduces_bm() {
        let c = cfg();
        let rl: Model<f64> = Model::new(ModelKind::Rl, c.clone(), 1).unwrap();
        let ml: Model<f64> = Model::new(ModelKind::Ml, c.clone(), 2).unwrap();
        let bm: Model<f64> = Model::new(ModelKind::Bm, c.clone(), 3).unwrap();
        let mut fused: Model<f64> = Model::new(ModelKind::Fused, c, 4).unwrap();
        fused.init_from_pretrained(&rl, &ml, Some(&bm), 1.0).unwrap();
        // Silence the other two blocks of the fusion weights.
        let id = fused.fusion_out().unwrap();
        let w = fused.params_mut().get_mut(id).value.data_mut();
        w[..2].fill(0.0);
        w[4..].fill(0.0);
        let (row, col) = (&[1u32, 2][..], &[0u32][..]);
        assert_eq!(
            fused.forward_pair(row, col).unwrap().prob,
            bm.forward_pair(row, col).unwrap().prob
        );
    }

    #[test]
    fn pretrained_shape_mismatch_names_parameter() {
        let rl: Model<f64> = Model::new(ModelKind::Rl, ModelConfig::new(4, 6, 3), 1).unwrap();
        let ml: Model<f64> = Model::new(ModelKind::Ml, cfg(), 2).unwrap();
        let bm: Model<f64> = Model::new(ModelKind::Bm, cfg(), 3).unwrap();
        let mut fused: Model<f64> = Model::new(ModelKind::Fused, cfg(), 4).unwrap();
        let err = fused.init_from_pretrained(&rl, &ml, Some(&bm), 1.0 / 3.0).unwrap_err();
        assert!(err.to_string().contains("rl.user_encoder"), "{err}");
        let err = fused.init_from_pretrained(&ml, &ml, Some(&bm), 1.0 / 3.0).unwrap_err();
        assert!(matches!(err, ModelError::Checkpoint(_)));
        let rl: Model<f64> = Model::new(ModelKind::Rl, cfg(), 1).unwrap();
        assert!(fused.init_from_pretrained(&rl, &ml, None, 1.0 / 3.0).is_err());
    }

    #[test]
    fn invalid_config() {
        let mut c = cfg();
        c.balance_dim = 3;
        assert!(Model::<f32>::new(ModelKind::Fused, c, 0).is_err());
        assert!(Model::<f32>::new(ModelKind::Rl, ModelConfig::new(0, 3, 2), 0).is_err());
        assert!("nope".parse::<ModelKind>().is_err());
        assert_eq!("bm".parse::<ModelKind>().unwrap(), ModelKind::Bm);
    }
}
