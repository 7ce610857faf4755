//! Captioning metrics over token lists and a rank-based AUC.
//!
//! Candidates are `&[String]` token lists; references are one or more token
//! lists per candidate.

mod cider;

pub use cider::{cider_d, CiderD, CiderVectors};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} reference sets")]
    Misaligned { candidates: usize, references: usize },
    #[error("candidate {0} has no reference")]
    NoReference(usize),
    #[error("AUC undefined without both classes")]
    SingleClass,
    #[error("{0}")]
    Input(String),
}

pub type Tokens = Vec<String>;

pub(crate) fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<(), MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::Misaligned {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(MetricError::NoReference(i));
    }
    Ok(())
}

/// Clipped n-gram matches and candidate n-gram total for one sentence.
pub fn clipped_counts(candidate: &[String], references: &[Tokens], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, preferring the shorter one on ties.
fn closest_ref_len(c: usize, references: &[Tokens]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU-`n`: geometric mean of clipped precisions of orders `1..=n`
/// times the brevity penalty.
pub fn bleu_n(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> Result<f64, MetricError> {
    Ok(bleu_all(candidates, references, n)?[n - 1])
}

/// Corpus BLEU-1 through BLEU-`max_n`.
pub fn bleu_all(candidates: &[Tokens], references: &[Vec<Tokens>], max_n: usize) -> Result<Vec<f64>, MetricError> {
    check_corpus(candidates, references)?;
    if max_n == 0 {
        return Err(MetricError::Input("BLEU order must be positive".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, refs) in candidates.iter().zip(references) {
        for n in 1..=max_n {
            let (m, t) = clipped_counts(c, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c_len += c.len();
        r_len += closest_ref_len(c.len(), refs);
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let p = if total[n - 1] == 0 {
            0.0
        } else {
            matched[n - 1] as f64 / total[n - 1] as f64
        };
        log_sum += if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        let score = if log_sum.is_finite() { bp * (log_sum / n as f64).exp() } else { 0.0 };
        out.push(score);
    }
    Ok(out)
}

/// Sentence BLEU-`n` with add-one smoothing on orders above one.
pub fn sentence_bleu(candidate: &[String], references: &[Tokens], n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = clipped_counts(candidate, references, k);
        let p = if k == 1 {
            m as f64 / t.max(1) as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let r = closest_ref_len(candidate.len(), references);
    let c = candidate.len();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / n as f64).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with `β = 1.2`, maximised over references.
pub fn rouge_l(candidate: &[String], references: &[Tokens]) -> f64 {
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rc = l / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l_corpus(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    Ok(candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / candidates.len() as f64)
}

/// Mann-Whitney AUC with mid-ranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Input("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider_d: f64,
    /// Every reference set identical, so IDF weights vanish.
    pub cider_degenerate: bool,
    /// Tables of published results usually print CIDEr-D ×100.
    pub cider_d_x100: f64,
    pub auc_per_tag: Vec<Option<f64>>,
    pub auc_mean: Option<f64>,
    pub skipped_tags: Vec<String>,
    pub tag_names: Vec<String>,
    pub n_samples: usize,
}

/// Tag scores and binary labels, one row per sample.
pub struct TagScores<'a> {
    pub names: &'a [String],
    pub scores: &'a [Vec<f64>],
    pub labels: &'a [Vec<bool>],
}

pub fn per_tag_auc(scores: &[Vec<f64>], labels: &[Vec<bool>], n_tags: usize) -> Vec<Option<f64>> {
    (0..n_tags)
        .map(|t| {
            let s: Vec<f64> = scores.iter().map(|r| r[t]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[t]).collect();
            auc(&s, &l).ok()
        })
        .collect()
}

/// Mean over the tags where AUC is defined.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn evaluate(candidates: &[Tokens], references: &[Vec<Tokens>], tags: Option<TagScores<'_>>) -> Result<EvalReport, MetricError> {
    let b = bleu_all(candidates, references, 4)?;
    let rouge = rouge_l_corpus(candidates, references)?;
    let cider = cider_d(candidates, references)?;
    let (auc_per_tag, tag_names) = match tags {
        Some(t) => {
            if t.scores.len() != candidates.len() || t.labels.len() != candidates.len() {
                return Err(MetricError::Misaligned {
                    candidates: candidates.len(),
                    references: t.scores.len(),
                });
            }
            (per_tag_auc(t.scores, t.labels, t.names.len()), t.names.to_vec())
        }
        None => (Vec::new(), Vec::new()),
    };
    let skipped_tags = auc_per_tag
        .iter()
        .zip(&tag_names)
        .filter(|(a, _)| a.is_none())
        .map(|(_, n)| n.clone())
        .collect();
    Ok(EvalReport {
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: rouge,
        cider_d: cider.score,
        cider_degenerate: cider.degenerate,
        cider_d_x100: cider.score * 100.0,
        auc_mean: mean_defined(&auc_per_tag),
        auc_per_tag,
        skipped_tags,
        tag_names,
        n_samples: candidates.len(),
    })
}

impl EvalReport {
    /// Aligned two-column text rendering.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("samples".into(), self.n_samples.to_string()),
            ("BLEU-1".into(), format!("{:.4}", self.bleu[0])),
            ("BLEU-2".into(), format!("{:.4}", self.bleu[1])),
            ("BLEU-3".into(), format!("{:.4}", self.bleu[2])),
            ("BLEU-4".into(), format!("{:.4}", self.bleu[3])),
            ("ROUGE-L".into(), format!("{:.4}", self.rouge_l)),
            ("CIDEr-D".into(), format!("{:.4}", self.cider_d)),
        ];
        if let Some(m) = self.auc_mean {
            rows.push(("AUC (mean)".into(), format!("{m:.4}")));
        }
        for (name, a) in self.tag_names.iter().zip(&self.auc_per_tag) {
            rows.push((format!("AUC {name}"), a.map_or("skipped".into(), |v| format!("{v:.4}"))));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}
