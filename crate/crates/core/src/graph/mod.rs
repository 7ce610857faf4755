//! Medical tag graph encoder.
//!
//! An input feature vector is mapped to per-tag probabilities; each node's
//! feature is its probability times a learned tag embedding. Edges come from
//! scaled dot products between projected node features, normalised per row.
//! Nodes then attend to a learnable prior graph, are refined by multi-head
//! self-attention, and a per-node readout gives the final tag probabilities.

mod loss;

pub use loss::{focal_loss, tag_bce, FocalConfig, EPS};

use serde::{Deserialize, Serialize};

use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Result, SeededRng, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub n_tags: usize,
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    /// Adds the learned edge weights to the prior-attention scores.
    pub edge_bias: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            n_tags: 12,
            input_dim: 64,
            dim: 64,
            heads: 4,
            edge_bias: false,
        }
    }
}

/// Encoded graph handed to the decoder.
#[derive(Debug, Clone)]
pub struct TagGraph {
    /// `[1 × N_t]` node activations.
    pub node_probs: Tensor,
    /// `[N_t × d]` final node features.
    pub node_feats: Tensor,
    /// `[N_t × N_t]` row-stochastic edge weights.
    pub edges: Tensor,
    /// `[1 × N_t]` readout probabilities entering the tag loss.
    pub tag_probs: Tensor,
}

/// Prior-knowledge nodes: learnable features plus fixed edges.
#[derive(Debug, Clone)]
pub struct PriorGraph {
    pub feats: ParamId,
    pub edges: ParamId,
}

#[derive(Debug, Clone)]
pub struct GraphEncoder {
    pub config: GraphConfig,
    pub w_v: Linear,
    pub tag_embed: ParamId,
    pub edge_q: Linear,
    pub edge_k: Linear,
    pub prior: PriorGraph,
    prior_q: Linear,
    prior_k: Linear,
    prior_v: Linear,
    pub prior_out: Linear,
    pub self_attn: MultiHeadAttention,
    norm: LayerNorm,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
}

impl GraphEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, config: GraphConfig) -> Result<Self> {
        let (n, d) = (config.n_tags, config.dim);
        if n < 1 || d == 0 || config.heads == 0 || d % config.heads != 0 {
            return Err(TensorError::Contract(format!(
                "graph dim {d} must be a positive multiple of heads {}",
                config.heads
            )));
        }
        let w_v = Linear::new(store, rng, &format!("{name}.w_v"), config.input_dim, n, true);
        let tag_embed = store.xavier(format!("{name}.tag_embed"), n, d, rng);
        let edge_q = Linear::new(store, rng, &format!("{name}.edge_q"), d, d, false);
        let edge_k = Linear::new(store, rng, &format!("{name}.edge_k"), d, d, false);
        let prior = PriorGraph {
            feats: store.xavier(format!("{name}.prior_feats"), n, d, rng),
            edges: store.add(format!("{name}.prior_edges"), Tensor::full(&[n, n], 1.0 / n as f64)),
        };
        let prior_q = Linear::new(store, rng, &format!("{name}.prior_q"), d, d, false);
        let prior_k = Linear::new(store, rng, &format!("{name}.prior_k"), d, d, false);
        let prior_v = Linear::new(store, rng, &format!("{name}.prior_v"), d, d, false);
        let prior_out = Linear::new(store, rng, &format!("{name}.prior_o"), d, d, false);
        let self_attn = MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, d, d, config.heads);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let readout_w = store.xavier(format!("{name}.readout_w"), n, d, rng);
        let readout_b = store.zeros(format!("{name}.readout_b"), &[n]);
        Ok(Self {
            config,
            w_v,
            tag_embed,
            edge_q,
            edge_k,
            prior,
            prior_q,
            prior_k,
            prior_v,
            prior_out,
            self_attn,
            norm,
            readout_w,
            readout_b,
        })
    }

    /// `probs = σ(W_v f)`, `feats[i] = probs[i] · tag_embed[i]`.
    pub fn encode_nodes(&self, store: &ParamStore, f_input: &Tensor) -> Result<(Tensor, Tensor)> {
        let (rows, dim) = f_input.shape2("encode_nodes")?;
        if rows != 1 || dim != self.config.input_dim {
            return Err(TensorError::Shape {
                op: "encode_nodes",
                lhs: f_input.dims().to_vec(),
                rhs: vec![1, self.config.input_dim],
            });
        }
        let probs = self.w_v.forward(store, f_input)?.sigmoid()?;
        let n = self.config.n_tags;
        let feats = store.get(self.tag_embed).scale_rows(&probs.reshape(&[n])?)?;
        Ok((probs, feats))
    }

    /// Row softmax of `(Q f_i)·(K f_j) / √d`.
    pub fn encode_edges(&self, store: &ParamStore, feats: &Tensor) -> Result<Tensor> {
        let q = self.edge_q.forward(store, feats)?;
        let k = self.edge_k.forward(store, feats)?;
        q.matmul_nt(&k)?.scale(1.0 / (self.config.dim as f64).sqrt())?.softmax(1)
    }

    /// Single-head cross-attention from the encoded nodes to the prior
    /// features, added back residually.
    pub fn attend_prior(&self, store: &ParamStore, feats: &Tensor, edges: &Tensor) -> Result<Tensor> {
        let prior = store.get(self.prior.feats);
        let q = self.prior_q.forward(store, feats)?;
        let k = self.prior_k.forward(store, prior)?;
        let v = self.prior_v.forward(store, prior)?;
        let mut scores = q.matmul_nt(&k)?.scale(1.0 / (self.config.dim as f64).sqrt())?;
        if self.config.edge_bias {
            scores = scores.add(edges)?;
        }
        let attended = scores.softmax(1)?.matmul(&v)?;
        feats.add(&self.prior_out.forward(store, &attended)?)
    }

    /// `LN(x + MHA(x, x))` over the nodes.
    pub fn self_attend(&self, store: &ParamStore, feats: &Tensor) -> Result<Tensor> {
        let attended = self.self_attn.forward(store, feats, feats, None)?;
        self.norm.forward(store, &feats.add(&attended)?)
    }

    /// `σ(⟨R_i, x_i⟩ + b_i)` for every node `i`.
    pub fn readout(&self, store: &ParamStore, feats: &Tensor) -> Result<Tensor> {
        let (n, d) = feats.shape2("readout")?;
        let summed = feats.mul(store.get(self.readout_w))?.matmul(&Tensor::full(&[d, 1], 1.0))?;
        summed.reshape(&[1, n])?.add_bias(store.get(self.readout_b))?.sigmoid()
    }

    pub fn forward(&self, store: &ParamStore, f_input: &Tensor) -> Result<TagGraph> {
        let (node_probs, feats) = self.encode_nodes(store, f_input)?;
        let edges = self.encode_edges(store, &feats)?;
        let refined = self.attend_prior(store, &feats, &edges)?;
        let node_feats = self.self_attend(store, &refined)?;
        let tag_probs = self.readout(store, &node_feats)?;
        Ok(TagGraph {
            node_probs,
            node_feats,
            edges,
            tag_probs,
        })
    }

    /// Replaces the uniform prior edges by row-normalised tag co-occurrence
    /// counts of `labels` (one binary row per sample).
    pub fn set_prior_edges_from_cooccurrence(&self, store: &mut ParamStore, labels: &[Vec<f64>]) -> Result<()> {
        let n = self.config.n_tags;
        let mut counts = vec![1.0; n * n];
        for y in labels {
            for i in 0..n {
                for j in 0..n {
                    counts[i * n + j] += y[i] * y[j];
                }
            }
        }
        for row in counts.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let name = store.name(self.prior.edges).to_string();
        store.set(&name, &[n, n], &counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scaled_dot_attention;
    use crate::tensor::gradcheck::{check_params, finite_diff_check};
    use crate::tensor::{backward, sigmoid_scalar};

    fn build(n: usize, d_in: usize, d: usize, heads: usize, seed: u64) -> (ParamStore, GraphEncoder) {
        let mut store = ParamStore::new();
        let cfg = GraphConfig {
            n_tags: n,
            input_dim: d_in,
            dim: d,
            heads,
            edge_bias: false,
        };
        let enc = GraphEncoder::new(&mut store, &mut SeededRng::new(seed), "g", cfg).unwrap();
        (store, enc)
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        let dims = store.get(id).dims().to_vec();
        let n = store.get(id).numel();
        let name = store.name(id).to_string();
        store.set(&name, &dims, &vec![0.0; n]).unwrap();
    }

    fn set(store: &mut ParamStore, id: ParamId, v: Vec<f64>) {
        let dims = store.get(id).dims().to_vec();
        let name = store.name(id).to_string();
        store.set(&name, &dims, &v).unwrap();
    }

    #[test]
    fn zero_projection_gives_half_probabilities() {
        let (mut store, enc) = build(5, 6, 8, 2, 1);
        zero(&mut store, enc.w_v.weight);
        let f = SeededRng::new(2).uniform_tensor(&[1, 6], -1.0, 1.0);
        let (p, feats) = enc.encode_nodes(&store, &f).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
        let embed = store.get(enc.tag_embed);
        for (a, b) in feats.data().iter().zip(embed.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn node_features_scale_with_probability() {
        let (store, enc) = build(3, 4, 8, 2, 3);
        let f = SeededRng::new(4).uniform_tensor(&[1, 4], -1.0, 1.0);
        let (p, feats) = enc.encode_nodes(&store, &f).unwrap();
        let embed = store.get(enc.tag_embed);
        for i in 0..3 {
            for k in 0..8 {
                assert!((feats.row(i)[k] - p.data()[i] * embed.row(i)[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn node_probs_gradient_wrt_input() {
        let (store, enc) = build(4, 5, 8, 2, 5);
        let mut rng = SeededRng::new(6);
        let w = rng.uniform_tensor(&[1, 4], -1.0, 1.0);
        for _ in 0..20 {
            let f = rng.uniform_tensor(&[1, 5], -1.0, 1.0);
            let err = finite_diff_check(|x| enc.encode_nodes(&store, &x[0])?.0.mul(&w)?.sum(), &[f], 1e-5).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn identical_nodes_give_uniform_edges() {
        let (store, enc) = build(4, 5, 8, 2, 7);
        let row = SeededRng::new(8).uniform_tensor(&[1, 8], -1.0, 1.0);
        let feats = Tensor::concat_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap();
        let e = enc.encode_edges(&store, &feats).unwrap();
        for v in e.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn edges_match_scalar_oracle() {
        let (mut store, enc) = build(2, 2, 2, 1, 9);
        set(&mut store, enc.edge_q.weight, vec![1.0, 0.0, 0.0, 2.0]);
        set(&mut store, enc.edge_k.weight, vec![0.5, 1.0, -1.0, 0.0]);
        let feats = Tensor::matrix(&[&[1.0, 2.0], &[-1.0, 0.5]]).unwrap();
        let e = enc.encode_edges(&store, &feats).unwrap();
        // q rows: [1, 4], [-1, 1]; k rows: [-1.5, 1], [-1, -1]
        let s = |a: f64, b: f64| [1.0 / (1.0 + (b - a).exp()), 1.0 / (1.0 + (a - b).exp())];
        let r2 = 2f64.sqrt();
        let row0 = s((-1.5 + 4.0) / r2, (-1.0 - 4.0) / r2);
        let row1 = s((1.5 + 1.0) / r2, (1.0 - 1.0) / r2);
        for (got, want) in e.data().iter().zip(row0.iter().chain(&row1)) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_projection_keeps_prior_residual_identity() {
        let (mut store, enc) = build(4, 5, 8, 2, 10);
        zero(&mut store, enc.prior_out.weight);
        let feats = SeededRng::new(11).uniform_tensor(&[4, 8], -1.0, 1.0);
        let edges = Tensor::full(&[4, 4], 0.25);
        let out = enc.attend_prior(&store, &feats, &edges).unwrap();
        assert_eq!(out.data(), feats.data());
    }

    #[test]
    fn single_prior_node_returns_its_value_row() {
        let (store, enc) = build(1, 3, 4, 1, 12);
        let feats = SeededRng::new(13).uniform_tensor(&[1, 4], -1.0, 1.0);
        let out = enc.attend_prior(&store, &feats, &Tensor::full(&[1, 1], 1.0)).unwrap();
        let v = enc.prior_v.forward(&store, store.get(enc.prior.feats)).unwrap();
        let want = feats.add(&enc.prior_out.forward(&store, &v).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn prior_features_receive_gradient() {
        let (store, enc) = build(3, 4, 8, 2, 14);
        let mut rng = SeededRng::new(15);
        let feats = rng.uniform_tensor(&[3, 8], -1.0, 1.0);
        let w = rng.uniform_tensor(&[3, 8], -1.0, 1.0);
        let edges = Tensor::full(&[3, 3], 1.0 / 3.0);
        let loss = enc.attend_prior(&store, &feats, &edges).unwrap().mul(&w).unwrap().sum().unwrap();
        let g = backward(&loss).unwrap();
        assert!(g.wrt(store.get(enc.prior.feats)).data().iter().any(|v| v.abs() > 1e-8));
        assert!(g.get(store.get(enc.prior.edges)).is_none());
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let (store, enc) = build(5, 4, 8, 4, 16);
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let feats = rng.uniform_tensor(&[5, 8], -1.0, 1.0);
            let mut perm: Vec<usize> = (0..5).collect();
            rng.shuffle(&mut perm);
            let permuted =
                Tensor::concat_rows(&perm.iter().map(|&i| feats.slice_rows(i, 1).unwrap()).collect::<Vec<_>>()).unwrap();
            let a = enc.self_attend(&store, &feats).unwrap();
            let b = enc.self_attend(&store, &permuted).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                for (x, y) in b.row(k).iter().zip(a.row(i)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_node_self_attention_is_layer_norm_of_residual() {
        let (store, enc) = build(1, 3, 8, 2, 18);
        let x = SeededRng::new(19).uniform_tensor(&[1, 8], -1.0, 1.0);
        let out = enc.self_attend(&store, &x).unwrap();
        // with one key the attention returns the projected value row
        let mha = &enc.self_attn;
        let v = mha.v.forward(&store, &x).unwrap();
        let attended = mha.out.forward(&store, &v).unwrap();
        let want = enc.norm.forward(&store, &x.add(&attended).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_head_matches_scaled_dot_attention() {
        let (mut store, enc) = build(4, 3, 6, 1, 20);
        let mha = &enc.self_attn;
        let eye: Vec<f64> = (0..36).map(|i| f64::from(i / 6 == i % 6)).collect();
        for l in [&mha.q, &mha.k, &mha.v, &mha.out] {
            set(&mut store, l.weight, eye.clone());
        }
        let x = SeededRng::new(21).uniform_tensor(&[4, 6], -1.0, 1.0);
        let got = mha.forward(&store, &x, &x, None).unwrap();
        let want = scaled_dot_attention(&x, &x, &x, None).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_readout_gives_half() {
        let (mut store, enc) = build(4, 3, 8, 2, 22);
        zero(&mut store, enc.readout_w);
        let x = SeededRng::new(23).uniform_tensor(&[4, 8], -1.0, 1.0);
        assert!(enc.readout(&store, &x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bce_gradient_pushes_readout_towards_label() {
        // d/dz of −ln σ(z) is σ(z) − 1 < 0 for a positive label
        let z = 0.3;
        let p = Tensor::new(&[1, 1], vec![sigmoid_scalar(z)]).unwrap().requires_grad();
        let g = backward(&tag_bce(&p, &[1.0]).unwrap()).unwrap().wrt(&p).item();
        assert!(g < 0.0);
        assert!((g * sigmoid_scalar(z) * (1.0 - sigmoid_scalar(z)) - (sigmoid_scalar(z) - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one_and_probs_open_interval() {
        let (store, enc) = build(6, 5, 8, 4, 24);
        let mut rng = SeededRng::new(25);
        for _ in 0..20 {
            let f = rng.uniform_tensor(&[1, 5], -50.0, 50.0);
            let g = enc.forward(&store, &f).unwrap();
            for i in 0..6 {
                assert!((g.edges.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for &p in g.node_probs.data().iter().chain(g.tag_probs.data()) {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let (store, enc) = build(4, 5, 8, 2, 26);
        let mut rng = SeededRng::new(27);
        let f = rng.uniform_tensor(&[1, 5], -1.0, 1.0);
        let y = [1.0, 0.0, 0.0, 1.0];
        let err = check_params(&store, |s| tag_bce(&enc.forward(s, &f)?.tag_probs, &y), 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn cooccurrence_prior_is_row_stochastic() {
        let (mut store, enc) = build(3, 2, 4, 1, 28);
        enc.set_prior_edges_from_cooccurrence(&mut store, &[vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let e = store.get(enc.prior.edges);
        assert_eq!(e.row(0), &[3.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0]);
    }
}
