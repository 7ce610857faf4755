use crate::tensor::{ParamStore, Result, SeededRng, Tensor, TensorError};

use super::Linear;

/// Keep-mask for strict causal attention over `len` positions: query `i`
/// sees keys `0..=i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|k| k % len <= k / len).collect()
}

/// `softmax(q·kᵀ/√d + mask)·v`. Masked-out keys get zero weight; a query row
/// with no visible key is an error.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, keep: Option<&[bool]>) -> Result<Tensor> {
    let (lq, d) = q.shape2("attention")?;
    let (lk, dk) = k.shape2("attention")?;
    let (lv, _) = v.shape2("attention")?;
    if d != dk || lk != lv {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: q.dims().to_vec(),
            rhs: k.dims().to_vec(),
        });
    }
    let scores = q.matmul_nt(k)?.scale(1.0 / (d as f64).sqrt())?;
    let weights = match keep {
        Some(mask) => scores.masked_softmax(mask)?,
        None => scores.softmax(1)?,
    };
    debug_assert_eq!(weights.dims(), &[lq, lk]);
    weights.matmul(v)
}

/// Multi-head attention with separate query/key/value/output projections.
/// Queries come from `query`, keys and values from `memory`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// `query_dim` and `memory_dim` are projected to `dim`, which must divide
    /// evenly into `heads`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        query_dim: usize,
        memory_dim: usize,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), query_dim, dim, true),
            // a key bias shifts every score of a query row equally, so softmax ignores it
            k: Linear::new(store, rng, &format!("{name}.k"), memory_dim, dim, false),
            v: Linear::new(store, rng, &format!("{name}.v"), memory_dim, dim, true),
            out: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, query: &Tensor, memory: &Tensor, keep: Option<&[bool]>) -> Result<Tensor> {
        let q = self.q.forward(store, query)?;
        let k = self.k.forward(store, memory)?;
        let v = self.v.forward(store, memory)?;
        let hd = self.dim / self.heads;
        let mixed = if self.heads == 1 {
            scaled_dot_attention(&q, &k, &v, keep)?
        } else {
            let parts = (0..self.heads)
                .map(|h| {
                    scaled_dot_attention(
                        &q.slice_cols(h * hd, hd)?,
                        &k.slice_cols(h * hd, hd)?,
                        &v.slice_cols(h * hd, hd)?,
                        keep,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::concat_cols(&parts)?
        };
        self.out.forward(store, &mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;

    #[test]
    fn single_key_returns_value() {
        let mut rng = SeededRng::new(3);
        let q = rng.uniform_tensor(&[4, 3], -5.0, 5.0);
        let k = rng.uniform_tensor(&[1, 3], -5.0, 5.0);
        let v = Tensor::matrix(&[&[0.25, -1.5]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn one_hot_queries_select_matching_value() {
        let big = 200.0;
        let q = Tensor::matrix(&[&[big, 0.0], &[0.0, big]]).unwrap();
        let k = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let v = Tensor::matrix(&[&[10.0], &[20.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        // weight on the wrong key is e^{-200/√2}, far below 1e-12
        assert!((out.data()[0] - 10.0).abs() < 1e-12);
        assert!((out.data()[1] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn causal_rows_ignore_future_keys() {
        let mut rng = SeededRng::new(9);
        let q = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
        let k = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
        let v = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
        let mask = causal_mask(5);
        let base = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        let mut kd = k.to_vec();
        let mut vd = v.to_vec();
        for x in &mut kd[3 * 4..] {
            *x += 7.0;
        }
        for x in &mut vd[3 * 3..] {
            *x -= 4.0;
        }
        let out = scaled_dot_attention(
            &q,
            &Tensor::new(&[5, 4], kd).unwrap(),
            &Tensor::new(&[5, 3], vd).unwrap(),
            Some(&mask),
        )
        .unwrap();
        for i in 0..3 {
            assert_eq!(base.row(i), out.row(i));
        }
        assert_ne!(base.row(4), out.row(4));
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let q = Tensor::zeros(&[2, 2]);
        let mask = vec![true, false, false, false];
        assert!(scaled_dot_attention(&q, &q, &q, Some(&mask)).is_err());
    }

    #[test]
    fn attention_gradient() {
        let mut rng = SeededRng::new(21);
        let q = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let k = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let v = rng.uniform_tensor(&[3, 2], -1.0, 1.0);
        let w = rng.uniform_tensor(&[3, 2], -1.0, 1.0);
        let mask = causal_mask(3);
        let err = finite_diff_check(
            |t| scaled_dot_attention(&t[0], &t[1], &t[2], Some(&mask))?.mul(&w)?.sum(),
            &[q, k, v],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
