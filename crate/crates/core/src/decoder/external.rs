use super::Vocabulary;
use crate::nn::Gru;
use crate::tensor::{ParamId, ParamStore, Result, SeededRng, Tensor, TensorError};

/// GRU over word embeddings; its final state is the sentence signal fed to
/// the graph encoder during pretraining.
#[derive(Debug, Clone)]
pub struct ExternalEncoder {
    pub gru: Gru,
}

impl ExternalEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, embed_dim: usize, hidden: usize) -> Self {
        Self {
            gru: Gru::new(store, rng, name, embed_dim, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    /// Final GRU state `[1×h]` over the embedding rows of `ids`, from a zero
    /// initial state.
    pub fn encode(&self, store: &ParamStore, embeddings: ParamId, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(TensorError::Contract("cannot encode an empty sentence".into()));
        }
        let rows = Tensor::embedding(store.get(embeddings), ids)?;
        self.gru.encode(store, &rows, &Tensor::zeros(&[1, self.gru.hidden]))
    }
}

/// Overwrites rows of the `[V×d]` table `embeddings` from a plain-text vector
/// file with lines `word v1 … vd`. Returns how many rows were replaced.
pub fn import_embeddings(store: &mut ParamStore, embeddings: ParamId, vocab: &Vocabulary, text: &str) -> Result<usize> {
    let (v, d) = store.get(embeddings).shape2("import_embeddings")?;
    let mut table = store.get(embeddings).to_vec();
    let mut replaced = 0;
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| TensorError::Contract(format!("line {}: {e}", lineno + 1)))?;
        if values.len() != d {
            return Err(TensorError::Contract(format!(
                "line {}: expected {d} values, found {}",
                lineno + 1,
                values.len()
            )));
        }
        if !vocab.contains(word) {
            continue;
        }
        let id = vocab.id(word);
        if id < v {
            table[id * d..(id + 1) * d].copy_from_slice(&values);
            replaced += 1;
        }
    }
    let name = store.name(embeddings).to_string();
    store.set(&name, &[v, d], &table)?;
    Ok(replaced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gru_cell;
    use crate::tensor::gradcheck::finite_diff_check;

    #[test]
    fn single_token_is_one_cell_step() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1);
        let table = store.xavier("embed", 6, 4, &mut rng);
        let enc = ExternalEncoder::new(&mut store, &mut rng, "gru", 4, 5);
        let got = enc.encode(&store, table, &[3]).unwrap();
        assert_eq!(got.dims(), &[1, 5]);
        let x = Tensor::embedding(store.get(table), &[3]).unwrap();
        let want = gru_cell(&enc.gru, &store, &x, &Tensor::zeros(&[1, 5])).unwrap();
        assert_eq!(got.data(), want.data());
        assert!(enc.encode(&store, table, &[]).is_err());
    }

    #[test]
    fn gradient_reaches_word_embeddings() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(2);
        let enc = ExternalEncoder::new(&mut store, &mut rng, "gru", 3, 4);
        let table = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
        let w = rng.uniform_tensor(&[1, 4], -1.0, 1.0);
        let h0 = Tensor::zeros(&[1, 4]);
        let err = finite_diff_check(
            |x| {
                let rows = Tensor::embedding(&x[0], &[1, 4, 1])?;
                enc.gru.encode(&store, &rows, &h0)?.mul(&w)?.sum()
            },
            &[table],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn import_replaces_known_words() {
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<bos>", "<eos>", "<unk>", "lung", "left"].iter().map(|s| s.to_string()).collect(),
            1,
        );
        let mut store = ParamStore::new();
        let table = store.zeros("embed", &[6, 2]);
        let n = import_embeddings(&mut store, table, &vocab, "lung 1 2\nheart 3 4\n\nleft -1 0.5\n").unwrap();
        assert_eq!(n, 2);
        assert_eq!(store.get(table).row(4), &[1.0, 2.0]);
        assert_eq!(store.get(table).row(5), &[-1.0, 0.5]);
        assert!(import_embeddings(&mut store, table, &vocab, "lung 1\n").is_err());
    }
}
