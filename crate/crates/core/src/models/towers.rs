use crate::attention::FeedForwardAttention;
use crate::diffcore::{gaussian_init, DiffError, GraphBuilder, NodeId, ParamId, ParamStore, Real, Tensor};

use super::{param_seed, ModelConfig};

/// Stack of `dense + relu` layers, ReLU after every layer including the last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        prefix: &str,
        dims: &[usize],
        std: f64,
        seed: u64,
    ) -> Result<Self, DiffError> {
        let mut layers = Vec::with_capacity(dims.len().saturating_sub(1));
        for (k, pair) in dims.windows(2).enumerate() {
            let wname = format!("{prefix}.{k}.weight");
            let w = params.add(&wname, gaussian_init(&[pair[0], pair[1]], 0.0, std, param_seed(seed, &wname))?)?;
            let b = params.add(format!("{prefix}.{k}.bias"), Tensor::zeros(&[pair[1]]))?;
            layers.push((w, b));
        }
        Ok(Self { layers })
    }

    pub fn apply<T: Real>(&self, g: &mut GraphBuilder<'_, T>, mut x: NodeId) -> Result<NodeId, DiffError> {
        for &(w, b) in &self.layers {
            let z = g.linear(x, w, Some(b))?;
            x = g.relu(z)?;
        }
        Ok(x)
    }
}

fn table<T: Real>(
    params: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
    seed: u64,
) -> Result<ParamId, DiffError> {
    params.add(name, gaussian_init(&[rows, cols], 0.0, std, param_seed(seed, name))?)
}

fn attention<T: Real>(
    params: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    std: f64,
    seed: u64,
) -> Result<FeedForwardAttention, DiffError> {
    FeedForwardAttention::new(params, prefix, dim, std, param_seed(seed, prefix))
}

fn out_weights<T: Real>(params: &mut ParamStore<T>, name: &str, dim: usize, std: f64, seed: u64) -> Result<ParamId, DiffError> {
    table(params, name, dim, 1, std, seed)
}

/// `[a_0; v_d]` when attention is on, `a_0` alone otherwise.
fn attended<T: Real>(
    g: &mut GraphBuilder<'_, T>,
    att: Option<&FeedForwardAttention>,
    encoded: NodeId,
) -> Result<NodeId, DiffError> {
    match att {
        Some(att) => {
            let (decoded, _) = att.attend(g, encoded)?;
            g.concat(&[encoded, decoded])
        }
        None => Ok(encoded),
    }
}

/// Representation learning tower: two multi-hot encoders, each refined by
/// attention and an MLP, matched by elementwise product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RlTower {
    pub user_encoder: ParamId,
    pub item_encoder: ParamId,
    pub user_attention: Option<FeedForwardAttention>,
    pub item_attention: Option<FeedForwardAttention>,
    pub user_mlp: Mlp,
    pub item_mlp: Mlp,
    pub out: Option<ParamId>,
}

impl RlTower {
    pub(crate) fn new<T: Real>(
        params: &mut ParamStore<T>,
        cfg: &ModelConfig,
        standalone: bool,
        seed: u64,
    ) -> Result<Self, DiffError> {
        let (l, f, std) = (cfg.encoder_dim, cfg.factors, cfg.init_std);
        let user_encoder = table(params, "rl.user_encoder", cfg.num_items, l, std, seed)?;
        let item_encoder = table(params, "rl.item_encoder", cfg.num_users, l, std, seed)?;
        let (user_attention, item_attention) = if cfg.attention {
            (
                Some(attention(params, "rl.user_attention", l, std, seed)?),
                Some(attention(params, "rl.item_attention", l, std, seed)?),
            )
        } else {
            (None, None)
        };
        let input = if cfg.attention { 2 * l } else { l };
        let user_mlp = Mlp::new(params, "rl.user_mlp", &[input, 2 * f, f], std, seed)?;
        let item_mlp = Mlp::new(params, "rl.item_mlp", &[input, 2 * f, f], std, seed)?;
        let out = standalone.then(|| out_weights(params, "rl.out", f, std, seed)).transpose()?;
        Ok(Self {
            user_encoder,
            item_encoder,
            user_attention,
            item_attention,
            user_mlp,
            item_mlp,
            out,
        })
    }

    /// Returns `(p_u, q_i, a_rl)`.
    pub fn build<T: Real>(
        &self,
        g: &mut GraphBuilder<'_, T>,
        user_row: NodeId,
        item_col: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId), DiffError> {
        let a_user = g.embedding_bag(user_row, self.user_encoder)?;
        let a_item = g.embedding_bag(item_col, self.item_encoder)?;
        let x_user = attended(g, self.user_attention.as_ref(), a_user)?;
        let x_item = attended(g, self.item_attention.as_ref(), a_item)?;
        let p = self.user_mlp.apply(g, x_user)?;
        let q = self.item_mlp.apply(g, x_item)?;
        let a = g.mul(p, q)?;
        Ok((p, q, a))
    }
}

/// Matching function learning tower: linear embeddings, concatenated,
/// attended and fed through one MLP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlTower {
    pub user_embedding: ParamId,
    pub item_embedding: ParamId,
    pub attention: Option<FeedForwardAttention>,
    pub mlp: Mlp,
    pub out: Option<ParamId>,
}

impl MlTower {
    pub(crate) fn new<T: Real>(
        params: &mut ParamStore<T>,
        cfg: &ModelConfig,
        standalone: bool,
        seed: u64,
    ) -> Result<Self, DiffError> {
        let (h, f, std) = (cfg.embedding_dim, cfg.factors, cfg.init_std);
        let user_embedding = table(params, "ml.user_embedding", cfg.num_items, h, std, seed)?;
        let item_embedding = table(params, "ml.item_embedding", cfg.num_users, h, std, seed)?;
        let attention = cfg
            .attention
            .then(|| attention(params, "ml.attention", 2 * h, std, seed))
            .transpose()?;
        let input = if cfg.attention { 4 * h } else { 2 * h };
        let mlp = Mlp::new(params, "ml.mlp", &[input, 4 * f, 2 * f, f], std, seed)?;
        let out = standalone.then(|| out_weights(params, "ml.out", f, std, seed)).transpose()?;
        Ok(Self {
            user_embedding,
            item_embedding,
            attention,
            mlp,
            out,
        })
    }

    pub fn build<T: Real>(&self, g: &mut GraphBuilder<'_, T>, user_row: NodeId, item_col: NodeId) -> Result<NodeId, DiffError> {
        let p = g.embedding_bag(user_row, self.user_embedding)?;
        let q = g.embedding_bag(item_col, self.item_embedding)?;
        let a0 = g.concat(&[p, q])?;
        let x = attended(g, self.attention.as_ref(), a0)?;
        self.mlp.apply(g, x)
    }
}

/// Balance module: elementwise product of two linear embeddings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalanceModule {
    pub user_embedding: ParamId,
    pub item_embedding: ParamId,
    pub out: Option<ParamId>,
}

impl BalanceModule {
    pub(crate) fn new<T: Real>(
        params: &mut ParamStore<T>,
        cfg: &ModelConfig,
        standalone: bool,
        seed: u64,
    ) -> Result<Self, DiffError> {
        let (r, std) = (cfg.balance_dim, cfg.init_std);
        let user_embedding = table(params, "bm.user_embedding", cfg.num_items, r, std, seed)?;
        let item_embedding = table(params, "bm.item_embedding", cfg.num_users, r, std, seed)?;
        let out = standalone.then(|| out_weights(params, "bm.out", r, std, seed)).transpose()?;
        Ok(Self {
            user_embedding,
            item_embedding,
            out,
        })
    }

    pub fn build<T: Real>(&self, g: &mut GraphBuilder<'_, T>, user_row: NodeId, item_col: NodeId) -> Result<NodeId, DiffError> {
        let p = g.embedding_bag(user_row, self.user_embedding)?;
        let q = g.embedding_bag(item_col, self.item_embedding)?;
        g.mul(p, q)
    }
}
