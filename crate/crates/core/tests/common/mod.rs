//! Helpers shared by the integration tests and the acceptance binary:
//! a central-difference gradient checker, a random graph generator and a
//! scalar-loop re-implementation of every model's forward pass.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use bcfnet::diffcore::{DiffGraph, Feeds, GraphBuilder, NodeId, ParamStore, SparseBatch, Tensor};
use bcfnet::models::{Model, ModelConfig, ModelKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: f64,
}

/// Everything a loss evaluation needs besides the parameters.
pub struct Inputs {
    pub dense: Vec<(String, Tensor<f64>)>,
    pub sparse: Vec<(String, SparseBatch)>,
}

impl Inputs {
    pub fn feeds(&self) -> Feeds<'_, f64> {
        let mut feeds = Feeds::new();
        for (name, t) in &self.dense {
            feeds = feeds.dense(name, t);
        }
        for (name, s) in &self.sparse {
            feeds = feeds.sparse(name, s);
        }
        feeds
    }
}

fn loss_and_pattern(graph: &mut DiffGraph<f64>, params: &ParamStore<f64>, inputs: &Inputs) -> (f64, Vec<bool>) {
    graph.run(params, &inputs.feeds(), &["loss"]).expect("forward");
    (graph.loss_value().expect("loss"), graph.activation_pattern())
}

/// Compares the analytic gradient of every parameter entry against a central
/// difference. Entries whose perturbation flips a ReLU or BCE clamp are
/// skipped and counted. Returns the first violation as an error message.
pub fn check_gradients(
    graph: &mut DiffGraph<f64>,
    params: &mut ParamStore<f64>,
    inputs: &Inputs,
    max_entries_per_param: usize,
) -> Result<GradCheck, String> {
    let (_, base_pattern) = loss_and_pattern(graph, params, inputs);
    params.zero_grad();
    graph.backward(params, 1.0).map_err(|e| e.to_string())?;
    let ids: Vec<_> = params.ids().collect();
    let mut stats = GradCheck::default();
    for id in ids {
        let len = params.value(id).len();
        let stride = len.div_ceil(max_entries_per_param).max(1);
        for k in (0..len).step_by(stride) {
            let analytic = params.get(id).grad.data()[k];
            let orig = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let (plus, pat_plus) = loss_and_pattern(graph, params, inputs);
            params.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let (minus, pat_minus) = loss_and_pattern(graph, params, inputs);
            params.get_mut(id).value.data_mut()[k] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                stats.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            stats.checked += 1;
            stats.worst = stats.worst.max(err / (FD_ABS_TOL + FD_REL_TOL * scale));
            if err > FD_ABS_TOL + FD_REL_TOL * scale {
                return Err(format!(
                    "{}[{k}]: analytic {analytic:.9e}, numeric {numeric:.9e}",
                    params.get(id).name
                ));
            }
        }
    }
    Ok(stats)
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps this helper free of the crate's own init code.
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> SparseBatch {
    let mut batch = SparseBatch::new(width);
    for _ in 0..rows {
        let mut ones: Vec<u32> = (0..width as u32).filter(|_| rng.random_bool(0.4)).collect();
        if ones.is_empty() {
            ones.push(rng.random_range(0..width as u32));
        }
        batch.push_row(&ones).unwrap();
    }
    batch
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Linear { src: usize, bias: bool, param: usize },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Mul(usize, usize),
    Concat(usize, usize),
}

/// A random computation in which every op kind of the engine appears at least once.
pub struct RandomGraph {
    pub params: ParamStore<f64>,
    pub graph: DiffGraph<f64>,
    pub inputs: Inputs,
    pub ops: Vec<&'static str>,
}

pub fn random_graph(seed: u64) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(1..=4);
    let sparse_width = rng.random_range(2..=8);
    let dense_width = rng.random_range(1..=8);
    let mut params = ParamStore::new();
    let table_dim = rng.random_range(1..=8);
    let table = params
        .add("table", gaussian_tensor(&mut rng, &[sparse_width, table_dim], 0.7))
        .unwrap();

    // Node 0 is the embedding bag, node 1 the dense input; later nodes follow `steps`.
    let mut dims = vec![table_dim, dense_width];
    let mut steps = Vec::new();
    let mut weights = Vec::new();
    let n_steps = rng.random_range(4..=10);
    let mandatory = ["linear", "relu", "sigmoid", "softmax", "mul", "concat"];
    for s in 0..n_steps {
        let kind = if s < mandatory.len() { mandatory[(s + seed as usize) % mandatory.len()] } else {
            mandatory[rng.random_range(0..mandatory.len())]
        };
        let src = rng.random_range(0..dims.len());
        let step = match kind {
            "linear" => {
                let out = rng.random_range(1..=8);
                let w = params
                    .add(format!("w{s}"), gaussian_tensor(&mut rng, &[dims[src], out], 0.7))
                    .unwrap();
                let bias = rng.random_bool(0.5);
                let b = bias.then(|| params.add(format!("b{s}"), gaussian_tensor(&mut rng, &[out], 0.3)).unwrap());
                weights.push((w, b));
                dims.push(out);
                Step::Linear { src, bias, param: weights.len() - 1 }
            }
            "relu" => {
                dims.push(dims[src]);
                Step::Relu(src)
            }
            "sigmoid" => {
                dims.push(dims[src]);
                Step::Sigmoid(src)
            }
            "softmax" => {
                dims.push(dims[src]);
                Step::Softmax(src)
            }
            "mul" => {
                let partners: Vec<usize> = (0..dims.len()).filter(|&j| dims[j] == dims[src]).collect();
                let other = partners[rng.random_range(0..partners.len())];
                dims.push(dims[src]);
                Step::Mul(src, other)
            }
            _ => {
                let other = rng.random_range(0..dims.len());
                dims.push(dims[src] + dims[other]);
                Step::Concat(src, other)
            }
        };
        steps.push(step);
    }
    // Head: everything reachable is summed into one logit so every op feeds the loss.
    let all: Vec<usize> = (0..dims.len()).collect();
    let total: usize = dims.iter().sum();
    let head = params.add("head", gaussian_tensor(&mut rng, &[total, 1], 0.5)).unwrap();

    let mut g = GraphBuilder::new(&params);
    let sparse = g.sparse_input("x_sparse", sparse_width).unwrap();
    let dense = g.dense_input("x_dense", dense_width).unwrap();
    let label = g.dense_input("label", 1).unwrap();
    let mut nodes: Vec<NodeId> = vec![g.embedding_bag(sparse, table).unwrap(), dense];
    let mut ops = vec!["embedding_bag"];
    for step in &steps {
        let node = match *step {
            Step::Linear { src, bias, param } => {
                let (w, b) = weights[param];
                debug_assert_eq!(bias, b.is_some());
                ops.push("linear");
                g.linear(nodes[src], w, b).unwrap()
            }
            Step::Relu(src) => {
                ops.push("relu");
                g.relu(nodes[src]).unwrap()
            }
            Step::Sigmoid(src) => {
                ops.push("sigmoid");
                g.sigmoid(nodes[src]).unwrap()
            }
            Step::Softmax(src) => {
                ops.push("softmax");
                g.softmax(nodes[src]).unwrap()
            }
            Step::Mul(a, b) => {
                ops.push("mul");
                g.mul(nodes[a], nodes[b]).unwrap()
            }
            Step::Concat(a, b) => {
                ops.push("concat");
                g.concat(&[nodes[a], nodes[b]]).unwrap()
            }
        };
        nodes.push(node);
    }
    let joined = g.concat(&all.iter().map(|&i| nodes[i]).collect::<Vec<_>>()).unwrap();
    let logit = g.linear(joined, head, None).unwrap();
    g.name(logit, "logit").unwrap();
    let prob = g.sigmoid(logit).unwrap();
    let loss = g.bce_loss(prob, label).unwrap();
    g.name(loss, "loss").unwrap();
    ops.push("bce_loss");
    let graph = g.build();

    let labels: Vec<f64> = (0..batch).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let inputs = Inputs {
        dense: vec![
            ("x_dense".into(), gaussian_tensor(&mut rng, &[batch, dense_width], 1.0)),
            ("label".into(), Tensor::new(vec![batch, 1], labels).unwrap()),
        ],
        sparse: vec![("x_sparse".into(), random_rows(&mut rng, batch, sparse_width))],
    };
    let mut graph = graph;
    // Keep probabilities off the BCE clamp, where the loss is flat by construction.
    loop {
        graph.run(&params, &inputs.feeds(), &["logit"]).unwrap();
        let max = graph.values("logit").unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max < 8.0 {
            break;
        }
        for v in params.get_mut(head).value.data_mut() {
            *v *= 0.5;
        }
    }
    RandomGraph { params, graph, inputs, ops }
}

/// A tiny model with every parameter (biases included) redrawn at a scale
/// where activations and gradients are far from zero.
pub fn tiny_model(kind: ModelKind, seed: u64, attention: bool, balance: bool) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let m = rng.random_range(2..=6);
    let n = rng.random_range(2..=6);
    let f = rng.random_range(1..=4);
    let mut cfg = ModelConfig::new(m, n, f).with_attention(attention).with_balance(balance);
    cfg.encoder_dim = rng.random_range(1..=4);
    cfg.embedding_dim = rng.random_range(1..=4);
    let mut model = Model::new(kind, cfg, seed).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let shape = model.params().value(id).shape().to_vec();
        model.params_mut().get_mut(id).value = gaussian_tensor(&mut rng, &shape, 0.6);
    }
    model
}

pub fn model_inputs(model: &Model<f64>, seed: u64, batch: usize) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let cfg = model.config();
    let labels: Vec<f64> = (0..batch).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    Inputs {
        dense: vec![("label".into(), Tensor::new(vec![batch, 1], labels).unwrap())],
        sparse: vec![
            ("user_row".into(), random_rows(&mut rng, batch, cfg.num_items)),
            ("item_col".into(), random_rows(&mut rng, batch, cfg.num_users)),
        ],
    }
}

/// Halves the output weights until every logit of `inputs` is below 8 in
/// magnitude, keeping probabilities off the BCE clamp.
pub fn tame_logits(model: &mut Model<f64>, inputs: &Inputs) {
    let mut graph = model.graph().unwrap();
    let out = ["fusion.out", "rl.out", "ml.out", "bm.out"]
        .into_iter()
        .find_map(|n| model.params().find(n))
        .unwrap();
    loop {
        graph.run(model.params(), &inputs.feeds(), &["logit"]).unwrap();
        let max = graph.values("logit").unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max < 8.0 {
            return;
        }
        for v in model.params_mut().get_mut(out).value.data_mut() {
            *v *= 0.5;
        }
    }
}

// ---- scalar-loop forward pass ----

fn param<'a>(model: &'a Model<f64>, name: &str) -> Option<&'a Tensor<f64>> {
    model.params().find(name).map(|id| model.params().value(id))
}

fn bag(table: &Tensor<f64>, ones: &[u32]) -> Vec<f64> {
    let cols = table.cols();
    let mut out = vec![0.0; cols];
    for &r in ones {
        for (c, o) in out.iter_mut().enumerate() {
            *o += table.data()[r as usize * cols + c];
        }
    }
    out
}

fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let out = w.cols();
    (0..out)
        .map(|j| {
            let mut s = b.map_or(0.0, |b| b.data()[j]);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w.data()[i * out + j];
            }
            s
        })
        .collect()
}

fn attend(model: &Model<f64>, prefix: &str, x: Vec<f64>) -> Vec<f64> {
    let Some(w) = param(model, &format!("{prefix}.weight")) else {
        return x;
    };
    let z = affine(&x, w, param(model, &format!("{prefix}.bias")));
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    let mut out = x.clone();
    out.extend(x.iter().zip(&e).map(|(xi, ei)| xi * ei / sum));
    out
}

fn mlp(model: &Model<f64>, prefix: &str, mut x: Vec<f64>) -> Vec<f64> {
    let mut k = 0;
    while let Some(w) = param(model, &format!("{prefix}.{k}.weight")) {
        x = affine(&x, w, param(model, &format!("{prefix}.{k}.bias")))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        k += 1;
    }
    x
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[derive(Clone, Debug, Default)]
pub struct OracleOutput {
    pub logit: f64,
    pub a_rl: Option<Vec<f64>>,
    pub a_ml: Option<Vec<f64>>,
    pub a_bm: Option<Vec<f64>>,
}

pub fn oracle_forward(model: &Model<f64>, user_row: &[u32], item_col: &[u32]) -> OracleOutput {
    let mut out = OracleOutput::default();
    if let Some(enc) = param(model, "rl.user_encoder") {
        let p = mlp(model, "rl.user_mlp", attend(model, "rl.user_attention", bag(enc, user_row)));
        let item = param(model, "rl.item_encoder").unwrap();
        let q = mlp(model, "rl.item_mlp", attend(model, "rl.item_attention", bag(item, item_col)));
        out.a_rl = Some(hadamard(&p, &q));
    }
    if let Some(emb) = param(model, "ml.user_embedding") {
        let mut a0 = bag(emb, user_row);
        a0.extend(bag(param(model, "ml.item_embedding").unwrap(), item_col));
        out.a_ml = Some(mlp(model, "ml.mlp", attend(model, "ml.attention", a0)));
    }
    if let Some(emb) = param(model, "bm.user_embedding") {
        let p = bag(emb, user_row);
        let q = bag(param(model, "bm.item_embedding").unwrap(), item_col);
        out.a_bm = Some(hadamard(&p, &q));
    }
    let dot = |w: &Tensor<f64>, v: &[f64]| v.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
    out.logit = match param(model, "fusion.out") {
        Some(w) => {
            let mut joined = Vec::new();
            for part in [&out.a_rl, &out.a_bm, &out.a_ml].into_iter().flatten() {
                joined.extend_from_slice(part);
            }
            dot(w, &joined)
        }
        None => {
            let (name, a) = [("rl.out", &out.a_rl), ("ml.out", &out.a_ml), ("bm.out", &out.a_bm)]
                .into_iter()
                .find(|(_, a)| a.is_some())
                .unwrap();
            dot(param(model, name).unwrap(), a.as_ref().unwrap())
        }
    };
    out
}

// ---- synthetic data ----

/// Writes a tab-separated log in which popularity decays with item index and
/// every user rates at least `min_per_user` items.
pub fn write_synthetic_ratings(path: &Path, users: usize, items: usize, min_per_user: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for u in 1..=users {
        let mut chosen = Vec::new();
        let count = rng.random_range(min_per_user..=min_per_user * 2).min(items);
        while chosen.len() < count {
            let x: f64 = rng.random();
            let i = ((x * x) * items as f64) as usize + 1;
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        for (t, i) in chosen.iter().enumerate() {
            let _ = writeln!(text, "{u}\t{i}\t{}\t{}", rng.random_range(1..=5), 1000 + t);
        }
    }
    std::fs::write(path, text).unwrap();
}
