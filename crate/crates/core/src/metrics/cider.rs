//! CIDEr-D following the coco-caption reference implementation: document
//! frequencies from the reference sets, clipped candidate weights, a Gaussian
//! length penalty with σ = 6, and a final ×10.

use std::collections::{HashMap, HashSet};

use super::{check_corpus, MetricError, Tokens};

pub const MAX_N: usize = 4;
pub const SIGMA: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CiderD {
    pub score: f64,
    pub per_sample: Vec<f64>,
    /// All reference sets are identical, so every IDF weight is zero.
    pub degenerate: bool,
}

/// TF-IDF vectors of one sentence, per n-gram order.
#[derive(Debug, Clone, Default)]
pub struct CiderVectors {
    pub weights: [HashMap<Vec<String>, f64>; MAX_N],
    pub norms: [f64; MAX_N],
    /// Token count used by the length penalty.
    pub length: usize,
}

fn counts(tokens: &[String]) -> [HashMap<Vec<String>, usize>; MAX_N] {
    std::array::from_fn(|k| {
        let mut m = HashMap::new();
        if tokens.len() > k {
            for w in tokens.windows(k + 1) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    })
}

impl CiderVectors {
    pub fn build(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> Self {
        let mut out = Self {
            length: tokens.len(),
            ..Self::default()
        };
        for (k, grams) in counts(tokens).into_iter().enumerate() {
            let mut norm = 0.0;
            for (g, tf) in grams {
                let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
                let w = tf as f64 * (log_n - d.ln());
                norm += w * w;
                out.weights[k].insert(g, w);
            }
            out.norms[k] = norm.sqrt();
        }
        out
    }
}

/// Per-order similarity between candidate and one reference, with candidate
/// weights clipped to the reference and the Gaussian length penalty applied.
pub fn similarity(cand: &CiderVectors, reference: &CiderVectors) -> [f64; MAX_N] {
    let delta = cand.length as f64 - reference.length as f64;
    let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
    std::array::from_fn(|k| {
        let mut val = 0.0;
        for (g, &w) in &cand.weights[k] {
            if let Some(&r) = reference.weights[k].get(g) {
                val += w.min(r) * r;
            }
        }
        if cand.norms[k] != 0.0 && reference.norms[k] != 0.0 {
            val /= cand.norms[k] * reference.norms[k];
        }
        val * penalty
    })
}

pub fn cider_d(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<CiderD, MetricError> {
    check_corpus(candidates, references)?;
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for refs in references {
        let mut seen = HashSet::new();
        for r in refs {
            for grams in counts(r) {
                seen.extend(grams.into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (candidates.len() as f64).ln();
    let per_sample: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            let cv = CiderVectors::build(c, &df, log_n);
            let total: f64 = refs
                .iter()
                .map(|r| similarity(&cv, &CiderVectors::build(r, &df, log_n)).iter().sum::<f64>())
                .sum();
            total / refs.len() as f64 / MAX_N as f64 * 10.0
        })
        .collect();
    let mut sorted_sets = references.iter().map(|refs| {
        let mut s = refs.clone();
        s.sort();
        s
    });
    let first = sorted_sets.next().unwrap_or_default();
    let degenerate = sorted_sets.all(|s| s == first);
    Ok(CiderD {
        score: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        per_sample,
        degenerate,
    })
}
