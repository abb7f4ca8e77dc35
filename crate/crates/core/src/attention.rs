//! Feed-forward attention: a softmax over a learned affine map of the encoder
//! vector reweights that same vector elementwise.

use crate::diffcore::{
    gaussian_init, DiffError, DiffGraph, Feeds, GraphBuilder, NodeId, ParamId, ParamStore, Real, Tensor,
};

/// Handles to the `m x m` weight and length-`m` bias of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForwardAttention {
    pub weight: ParamId,
    pub bias: ParamId,
    dim: usize,
}

impl FeedForwardAttention {
    /// Registers `{prefix}.weight` (Gaussian, std `std`) and a zero `{prefix}.bias`.
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self, DiffError> {
        let weight = params.add(format!("{prefix}.weight"), gaussian_init(&[dim, dim], 0.0, std, seed)?)?;
        let bias = params.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { weight, bias, dim })
    }

    /// Wraps existing parameters, checking that they form a square layer.
    pub fn from_params<T: Real>(params: &ParamStore<T>, weight: ParamId, bias: ParamId) -> Result<Self, DiffError> {
        let w = params.value(weight).shape();
        let dim = w.first().copied().unwrap_or(0);
        if w != [dim, dim] || params.value(bias).shape() != [dim] {
            return Err(DiffError::Shape(format!(
                "attention: weight {:?} and bias {:?} do not form a square layer",
                w,
                params.value(bias).shape()
            )));
        }
        Ok(Self { weight, bias, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds the layer to a graph and returns `(v_d, alpha)`.
    pub fn attend<T: Real>(&self, g: &mut GraphBuilder<'_, T>, encoded: NodeId) -> Result<(NodeId, NodeId), DiffError> {
        if g.dim(encoded) != self.dim {
            return Err(DiffError::Shape(format!(
                "attention: input width {}, layer width {}",
                g.dim(encoded),
                self.dim
            )));
        }
        let logits = g.linear(encoded, self.weight, Some(self.bias))?;
        let alpha = g.softmax(logits)?;
        let decoded = g.mul(alpha, encoded)?;
        Ok((decoded, alpha))
    }

    /// Evaluates the layer on a single vector.
    pub fn attend_vector<T: Real>(&self, params: &ParamStore<T>, encoded: &[T]) -> Result<(Vec<T>, Vec<T>), DiffError> {
        if encoded.len() != self.dim {
            return Err(DiffError::Shape(format!(
                "attention: input length {}, layer width {}",
                encoded.len(),
                self.dim
            )));
        }
        let mut g = GraphBuilder::new(params);
        let x = g.dense_input("v_e", self.dim)?;
        let (v_d, alpha) = self.attend(&mut g, x)?;
        g.name(v_d, "v_d")?;
        g.name(alpha, "alpha")?;
        let mut graph: DiffGraph<T> = g.build();
        let input = Tensor::new(vec![1, self.dim], encoded.to_vec())?;
        let out = graph.forward(params, &Feeds::new().dense("v_e", &input), &["v_d", "alpha"])?;
        let mut out = out.into_iter().map(Tensor::into_data);
        Ok((out.next().unwrap_or_default(), out.next().unwrap_or_default()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layer(m: usize, weight: Vec<f64>, bias: Vec<f64>) -> (ParamStore<f64>, FeedForwardAttention) {
        let mut store = ParamStore::new();
        let w = store.add("att.weight", Tensor::new(vec![m, m], weight).unwrap()).unwrap();
        let b = store.add("att.bias", Tensor::new(vec![m], bias).unwrap()).unwrap();
        let att = FeedForwardAttention::from_params(&store, w, b).unwrap();
        (store, att)
    }

    /// Plain loops over `alpha_k = softmax_k(sum_j W[j][k] v_j + b_k)`.
    fn oracle(m: usize, w: &[f64], b: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut logits = vec![0.0; m];
        for k in 0..m {
            let mut s = b[k];
            for j in 0..m {
                s += w[j * m + k] * v[j];
            }
            logits[k] = s;
        }
        let mut exps = Vec::with_capacity(m);
        for k in 0..m {
            exps.push(logits[k].exp());
        }
        let total: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let v_d = (0..m).map(|k| alpha[k] * v[k]).collect();
        (v_d, alpha)
    }

    #[test]
    fn zero_weights_give_uniform_ratio() {
        let (store, att) = layer(4, vec![0.0; 16], vec![0.0; 4]);
        let v = [1.0, -2.0, 3.0, 0.5];
        let (v_d, alpha) = att.attend_vector(&store, &v).unwrap();
        for k in 0..4 {
            assert!((alpha[k] - 0.25).abs() < 1e-12);
            assert!((v_d[k] - v[k] / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_decodes_to_zero() {
        let w: Vec<f64> = (0..9).map(|k| k as f64 - 4.0).collect();
        let (store, att) = layer(3, w, vec![1.0, -3.0, 0.2]);
        let (v_d, _) = att.attend_vector(&store, &[0.0; 3]).unwrap();
        assert_eq!(v_d, vec![0.0; 3]);
    }

    #[test]
    fn dimension_mismatch() {
        let (store, att) = layer(3, vec![0.0; 9], vec![0.0; 3]);
        assert!(matches!(att.attend_vector(&store, &[1.0; 4]), Err(DiffError::Shape(_))));
        let mut bad = ParamStore::<f64>::new();
        let w = bad.add("w", Tensor::zeros(&[2, 3])).unwrap();
        let b = bad.add("b", Tensor::zeros(&[3])).unwrap();
        assert!(FeedForwardAttention::from_params(&bad, w, b).is_err());
    }

    fn instance(m: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-2.0..2.0f64, m * m),
            prop::collection::vec(-2.0..2.0f64, m),
            prop::collection::vec(-3.0..3.0f64, m),
        )
    }

    proptest! {
        #[test]
        fn matches_scalar_loops((w, b, v) in instance(5)) {
            let (want_d, want_a) = oracle(5, &w, &b, &v);
            let (store, att) = layer(5, w, b);
            let (v_d, alpha) = att.attend_vector(&store, &v).unwrap();
            for k in 0..5 {
                prop_assert!((v_d[k] - want_d[k]).abs() < 1e-6);
                prop_assert!((alpha[k] - want_a[k]).abs() < 1e-6);
            }
        }

        #[test]
        fn ratio_is_a_distribution((w, b, v) in instance(6)) {
            let (store, att) = layer(6, w, b);
            let (_, alpha) = att.attend_vector(&store, &v).unwrap();
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(alpha.iter().all(|&a| a > 0.0));
        }

        #[test]
        fn shifting_logits_changes_nothing((w, b, v) in instance(4), c in -5.0..5.0f64) {
            let (store, att) = layer(4, w.clone(), b.clone());
            let (d0, a0) = att.attend_vector(&store, &v).unwrap();
            let shifted: Vec<f64> = b.iter().map(|x| x + c).collect();
            let (store, att) = layer(4, w, shifted);
            let (d1, a1) = att.attend_vector(&store, &v).unwrap();
            for k in 0..4 {
                prop_assert!((a0[k] - a1[k]).abs() < 1e-6);
                prop_assert!((d0[k] - d1[k]).abs() < 1e-6);
            }
        }
    }
}
