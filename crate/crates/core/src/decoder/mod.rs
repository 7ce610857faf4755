//! Graph-conditioned transformer decoder and the GRU sentence encoder.
//!
//! Token and position embeddings feed a stack of post-norm blocks, each with
//! causal self-attention, cross-attention to the tag-graph node features and
//! a GELU feed-forward layer. The output distribution reuses the token
//! embedding matrix: `softmax(h · W_eᵀ)`.

mod external;
mod vocab;

pub use external::{import_embeddings, ExternalEncoder};
pub use vocab::{TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};

use crate::graph::TagGraph;
use crate::nn::{causal_mask, FeedForward, LayerNorm, MultiHeadAttention};
use crate::tensor::{no_grad, ParamId, ParamStore, Result, SeededRng, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Size of the position table.
    pub max_len: usize,
    /// Width of the graph node features.
    pub memory_dim: usize,
    /// Also attend to edge-weighted node aggregates `E · X`.
    pub edge_memory: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            ffn_dim: 256,
            heads: 4,
            blocks: 3,
            max_len: 300,
            memory_dim: 64,
            edge_memory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_len: usize,
    /// Greedy decoding is unaffected by any positive temperature.
    pub temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_len: 300,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, d, d, cfg.heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, cfg.memory_dim, d, cfg.heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_dim),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
        }
    }

    pub fn forward(&self, store: &ParamStore, h: &Tensor, memory: &Tensor, causal: &[bool]) -> Result<Tensor> {
        let a = self.self_attn.forward(store, h, h, Some(causal))?;
        let h = self.ln1.forward(store, &h.add(&a)?)?;
        let c = self.cross_attn.forward(store, &h, memory, None)?;
        let h = self.ln2.forward(store, &h.add(&c)?)?;
        let f = self.ffn.forward(store, &h)?;
        self.ln3.forward(store, &h.add(&f)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<DecoderBlock>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, config: DecoderConfig) -> Result<Self> {
        if config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(TensorError::Contract(format!(
                "d_model {} not divisible by {} heads",
                config.d_model, config.heads
            )));
        }
        let d = config.d_model;
        let token_embed = store.xavier(format!("{name}.token_embed"), config.vocab_size, d, rng);
        let pos_embed = store.xavier(format!("{name}.pos_embed"), config.max_len, d, rng);
        let blocks = (0..config.blocks)
            .map(|i| DecoderBlock::new(store, rng, &format!("{name}.block{i}"), &config))
            .collect();
        Ok(Self {
            config,
            token_embed,
            pos_embed,
            blocks,
        })
    }

    /// `h_0 = W_e[ids] + W_p[0..L]`.
    pub fn embed(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        Tensor::embedding(store.get(self.token_embed), ids)?.add(&Tensor::embedding(store.get(self.pos_embed), &positions)?)
    }

    /// Keys and values the blocks attend to.
    pub fn memory(&self, graph: &TagGraph) -> Result<Tensor> {
        if self.config.edge_memory {
            let aggregated = graph.edges.matmul(&graph.node_feats)?;
            Tensor::concat_rows(&[graph.node_feats.clone(), aggregated])
        } else {
            Ok(graph.node_feats.clone())
        }
    }

    /// Final hidden states `h_N[L×d]`.
    pub fn hidden(&self, store: &ParamStore, ids: &[usize], memory: &Tensor) -> Result<Tensor> {
        let mask = causal_mask(ids.len());
        let mut h = self.embed(store, ids)?;
        for block in &self.blocks {
            h = block.forward(store, &h, memory, &mask)?;
        }
        Ok(h)
    }

    /// `P[L×V] = softmax(h_N · W_eᵀ)` for the prefix `ids`.
    pub fn forward(&self, store: &ParamStore, ids: &[usize], graph: &TagGraph) -> Result<Tensor> {
        let memory = self.memory(graph)?;
        let h = self.hidden(store, ids, &memory)?;
        output_distribution(&h, store.get(self.token_embed))
    }

    /// Teacher-forced LM loss of one sequence.
    pub fn sequence_loss(&self, store: &ParamStore, seq: &TokenSequence, graph: &TagGraph) -> Result<Tensor> {
        let (inputs, targets) = seq.shifted();
        lm_loss(&self.forward(store, &inputs, graph)?, &targets)
    }

    /// Greedy decoding from BOS. Stops at EOS; at `max_len` tokens an EOS is
    /// appended.
    pub fn generate(&self, store: &ParamStore, graph: &TagGraph, cfg: &GenerationConfig) -> Result<TokenSequence> {
        if cfg.max_len > self.config.max_len {
            return Err(TensorError::Contract(format!(
                "generation length {} exceeds the position table ({})",
                cfg.max_len, self.config.max_len
            )));
        }
        no_grad(|| {
            let memory = self.memory(graph)?;
            let table = store.get(self.token_embed);
            let mut ids = vec![BOS];
            while ids.len() < cfg.max_len {
                let h = self.hidden(store, &ids, &memory)?;
                let last = h.slice_rows(ids.len() - 1, 1)?;
                let logits = last.matmul_nt(table)?;
                let next = argmax(logits.data());
                ids.push(next);
                if next == EOS {
                    return Ok(TokenSequence { ids });
                }
            }
            ids.push(EOS);
            Ok(TokenSequence { ids })
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-wise `softmax(h · W_eᵀ)`.
pub fn output_distribution(h: &Tensor, token_embed: &Tensor) -> Result<Tensor> {
    h.matmul_nt(token_embed)?.softmax(1)
}

/// Mean of `−ln P[i, t_i]` over the unmasked targets.
pub fn lm_loss(probs: &Tensor, targets: &[Option<usize>]) -> Result<Tensor> {
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(TensorError::Contract("lm_loss with every position masked".into()));
    }
    let cols: Vec<usize> = targets.iter().map(|t| t.unwrap_or(0)).collect();
    let picked = probs.gather_cols(&cols)?.ln_clamped(crate::graph::EPS, 1.0)?;
    if count == targets.len() {
        return picked.mean()?.scale(-1.0);
    }
    let keep = Tensor::new(&[targets.len()], targets.iter().map(|t| f64::from(t.is_some())).collect())?;
    picked.mul(&keep)?.sum()?.scale(-1.0 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            vocab_size: 11,
            d_model: 8,
            ffn_dim: 16,
            heads: 2,
            blocks: 3,
            max_len: 12,
            memory_dim: 6,
            edge_memory: false,
        }
    }

    fn graph(rng: &mut SeededRng, n: usize, d: usize) -> TagGraph {
        TagGraph {
            node_probs: rng.uniform_tensor(&[1, n], 0.1, 0.9),
            node_feats: rng.uniform_tensor(&[n, d], -1.0, 1.0),
            edges: Tensor::full(&[n, n], 1.0 / n as f64),
            tag_probs: rng.uniform_tensor(&[1, n], 0.1, 0.9),
        }
    }

    fn set(store: &mut ParamStore, id: ParamId, v: Vec<f64>) {
        let dims = store.get(id).dims().to_vec();
        let name = store.name(id).to_string();
        store.set(&name, &dims, &v).unwrap();
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        let n = store.get(id).numel();
        set(store, id, vec![0.0; n]);
    }

    #[test]
    fn embedding_is_additive() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut SeededRng::new(1), "d", small_cfg()).unwrap();
        let h = dec.embed(&store, &[5, 5]).unwrap();
        let (te, pe) = (store.get(dec.token_embed), store.get(dec.pos_embed));
        for k in 0..8 {
            assert_eq!(h.row(1)[k] - h.row(0)[k], (te.row(5)[k] + pe.row(1)[k]) - (te.row(5)[k] + pe.row(0)[k]));
        }
        zero(&mut store, dec.pos_embed);
        assert_eq!(dec.embed(&store, &[4]).unwrap().data(), store.get(dec.token_embed).row(4));
        assert!(matches!(dec.embed(&store, &[11]), Err(TensorError::Index { .. })));
    }

    #[test]
    fn embedding_gradient_reaches_both_tables() {
        let mut rng = SeededRng::new(2);
        let te = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
        let pe = rng.uniform_tensor(&[4, 3], -1.0, 1.0);
        let w = rng.uniform_tensor(&[3, 3], -1.0, 1.0);
        let err = finite_diff_check(
            |x| {
                Tensor::embedding(&x[0], &[2, 2, 4])?
                    .add(&Tensor::embedding(&x[1], &[0, 1, 2])?)?
                    .mul(&w)?
                    .sum()
            },
            &[te, pe],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn causal_integrity_of_full_stack() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(3);
        let dec = Decoder::new(&mut store, &mut rng, "d", small_cfg()).unwrap();
        let g = graph(&mut rng, 4, 6);
        for _ in 0..10 {
            let ids: Vec<usize> = (0..8).map(|_| rng.index(0, 11)).collect();
            let i = rng.index(0, 7);
            let mut changed = ids.clone();
            for t in changed.iter_mut().skip(i + 1) {
                *t = rng.index(0, 11);
            }
            let a = dec.forward(&store, &ids, &g).unwrap();
            let b = dec.forward(&store, &changed, &g).unwrap();
            for r in 0..=i {
                assert_eq!(a.row(r), b.row(r));
            }
        }
    }

    #[test]
    fn zero_cross_projection_removes_graph_dependence() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(4);
        let dec = Decoder::new(&mut store, &mut rng, "d", small_cfg()).unwrap();
        for b in &dec.blocks {
            zero(&mut store, b.cross_attn.out.weight);
        }
        let (g1, g2) = (graph(&mut rng, 4, 6), graph(&mut rng, 4, 6));
        let a = dec.forward(&store, &[1, 5, 6], &g1).unwrap();
        let b = dec.forward(&store, &[1, 5, 6], &g2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_position_block_matches_compositional_oracle() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(5);
        let dec = Decoder::new(&mut store, &mut rng, "d", small_cfg()).unwrap();
        let g = graph(&mut rng, 4, 6);
        let x = rng.uniform_tensor(&[1, 8], -1.0, 1.0);
        let b = &dec.blocks[0];
        let got = b.forward(&store, &x, &g.node_feats, &[true]).unwrap();
        // one position: self-attention returns its own projected value row
        let sa = b.self_attn.out.forward(&store, &b.self_attn.v.forward(&store, &x).unwrap()).unwrap();
        let h1 = b.ln1.forward(&store, &x.add(&sa).unwrap()).unwrap();
        let ca = b.cross_attn.forward(&store, &h1, &g.node_feats, None).unwrap();
        let h2 = b.ln2.forward(&store, &h1.add(&ca).unwrap()).unwrap();
        let want = b.ln3.forward(&store, &h2.add(&b.ffn.forward(&store, &h2).unwrap()).unwrap()).unwrap();
        for (a, w) in got.data().iter().zip(want.data()) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn output_distribution_contracts() {
        let mut rng = SeededRng::new(6);
        let table = rng.uniform_tensor(&[7, 4], -1.0, 1.0);
        let p = output_distribution(&Tensor::zeros(&[1, 4]), &table).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        let h = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let p = output_distribution(&h, &table).unwrap();
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let logits = h.slice_rows(0, 1).unwrap().matmul_nt(&table).unwrap();
        let top = argmax(logits.data());
        let sharp = output_distribution(&h.slice_rows(0, 1).unwrap().scale(1e3).unwrap(), &table).unwrap();
        assert!(sharp.data()[top] > 1.0 - 1e-9);
    }

    #[test]
    fn lm_loss_values() {
        let uniform = Tensor::full(&[3, 5], 0.2);
        let l = lm_loss(&uniform, &[Some(1), Some(4), None]).unwrap().item();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let p = Tensor::matrix(&[&[0.25, 0.75], &[0.75, 0.25]]).unwrap();
        let l = lm_loss(&p, &[Some(0), Some(1)]).unwrap().item();
        assert!((l + 0.25f64.ln()).abs() < 1e-12);
        let sure = Tensor::matrix(&[&[1.0, 0.0]]).unwrap();
        assert!(lm_loss(&sure, &[Some(0)]).unwrap().item().abs() < 1e-12);
        assert!(lm_loss(&sure, &[None]).is_err());
    }

    #[test]
    fn lm_loss_gradient() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(7);
        let cfg = DecoderConfig { blocks: 1, ..small_cfg() };
        let dec = Decoder::new(&mut store, &mut rng, "d", cfg).unwrap();
        let g = graph(&mut rng, 3, 6);
        let seq = TokenSequence { ids: vec![BOS, 5, 7, 5, EOS] };
        let err = crate::tensor::gradcheck::check_params(&store, |s| dec.sequence_loss(s, &seq, &g), 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn generation_budget_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(8);
        let dec = Decoder::new(&mut store, &mut rng, "d", small_cfg()).unwrap();
        let g = graph(&mut rng, 4, 6);
        let one = dec.generate(&store, &g, &GenerationConfig { max_len: 1, temperature: 1.0 }).unwrap();
        assert_eq!(one.ids, vec![BOS, EOS]);
        let cfg = GenerationConfig { max_len: 10, temperature: 1.0 };
        let a = dec.generate(&store, &g, &cfg).unwrap();
        assert_eq!(a, dec.generate(&store, &g, &cfg).unwrap());
        assert!(a.len() <= 11);
        assert!(dec.generate(&store, &g, &GenerationConfig { max_len: 13, temperature: 1.0 }).is_err());
    }

    #[test]
    fn constructed_logits_repeat_one_token() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(9);
        let dec = Decoder::new(&mut store, &mut rng, "d", small_cfg()).unwrap();
        // the last layer norm emits its bias at every position
        let last = &dec.blocks[2].ln3;
        zero(&mut store, last.gain);
        set(&mut store, last.bias, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut table = store.get(dec.token_embed).to_vec();
        table[6 * 8] = 10.0;
        set(&mut store, dec.token_embed, table);
        let out = dec
            .generate(&store, &graph(&mut rng, 4, 6), &GenerationConfig { max_len: 6, temperature: 1.0 })
            .unwrap();
        assert_eq!(out.ids, vec![BOS, 6, 6, 6, 6, 6, EOS]);
    }

    #[test]
    fn edge_memory_stacks_aggregates() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(10);
        let dec = Decoder::new(&mut store, &mut rng, "d", DecoderConfig { edge_memory: true, ..small_cfg() }).unwrap();
        let g = graph(&mut rng, 4, 6);
        let m = dec.memory(&g).unwrap();
        assert_eq!(m.dims(), &[8, 6]);
        let mean: Vec<f64> = (0..6).map(|k| (0..4).map(|i| g.node_feats.row(i)[k]).sum::<f64>() / 4.0).collect();
        for (a, b) in m.row(5).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
