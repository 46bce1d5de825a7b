//! Phrase quality metrics: corpus BLEU-1/2, ROUGE-L (LCS F1) and CIDEr.
//!
//! Every metric takes one reference per candidate. CIDEr here is the plain
//! TF-IDF cosine form (no length penalty, no count clipping) scaled by 10.

use std::collections::{BTreeMap, HashMap};

use crate::domain::{GroundingSample, Prediction};
use crate::error::{Error, Result};

pub type Tokens = Vec<String>;

/// Smoothing value substituted for a zero clipped n-gram count.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Highest n-gram order used by CIDEr.
pub const CIDER_MAX_N: usize = 4;

/// Lowercases, turns every non-alphanumeric character into a separator, and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Tokens {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

fn check_corpus(name: &'static str, candidates: &[Tokens], references: &[Tokens]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty(name));
    }
    if candidates.len() != references.len() {
        return Err(Error::Config(format!(
            "{name}: {} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU with uniform weights over orders `1..=n`.
///
/// Clipped counts and candidate n-gram totals are pooled over the corpus
/// before dividing. A zero clipped count is replaced by [`BLEU_EPSILON`].
/// The brevity penalty is `exp(1 - r/c)` when the total candidate length `c`
/// is below the total reference length `r`.
pub fn bleu_n(candidates: &[Tokens], references: &[Tokens], n: usize) -> Result<f64> {
    check_corpus("bleu_n", candidates, references)?;
    if n == 0 {
        return Err(Error::Config("bleu_n needs n >= 1".into()));
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (cand, reference) in candidates.iter().zip(references) {
            let ref_counts = ngrams(reference, order);
            for (gram, count) in ngrams(cand, order) {
                clipped += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        let numerator = if clipped == 0 { BLEU_EPSILON } else { clipped as f64 };
        log_sum += (numerator / total.max(1) as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, reference) as f64;
    let p = lcs / cand.len() as f64;
    let r = lcs / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mean LCS-based F1 over the pairs.
pub fn rouge_l(candidates: &[Tokens], references: &[Tokens]) -> Result<f64> {
    check_corpus("rouge_l", candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Document frequencies of each n-gram order over the reference corpus.
/// Built once, read-only afterwards.
pub struct IdfTable {
    n_docs: f64,
    df: Vec<HashMap<Vec<String>, usize>>,
}

impl IdfTable {
    pub fn new(references: &[Tokens]) -> Self {
        let mut df = vec![HashMap::new(); CIDER_MAX_N];
        for reference in references {
            for (order, table) in df.iter_mut().enumerate() {
                for gram in ngrams(reference, order + 1).keys() {
                    *table.entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        IdfTable {
            n_docs: references.len() as f64,
            df,
        }
    }

    /// `ln(N / max(1, df))`.
    pub fn idf(&self, order: usize, gram: &[String]) -> f64 {
        let df = self.df[order - 1].get(gram).copied().unwrap_or(0).max(1);
        (self.n_docs / df as f64).ln()
    }

    fn vector(&self, tokens: &[String], order: usize) -> BTreeMap<Vec<String>, f64> {
        ngrams(tokens, order)
            .into_iter()
            .map(|(g, c)| (g.to_vec(), c as f64 * self.idf(order, g)))
            .collect()
    }

    /// Per-pair CIDEr score (already scaled by 10).
    pub fn score(&self, cand: &[String], reference: &[String]) -> f64 {
        let mut sum = 0.0;
        for order in 1..=CIDER_MAX_N {
            let vc = self.vector(cand, order);
            let vr = self.vector(reference, order);
            let dot: f64 = vc
                .iter()
                .filter_map(|(g, a)| vr.get(g).map(|b| a * b))
                .sum();
            let nc = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                sum += dot / (nc * nr);
            }
        }
        10.0 * sum / CIDER_MAX_N as f64
    }
}

/// Corpus CIDEr: mean over pairs of the averaged per-order TF-IDF cosine,
/// times 10. IDF is computed over the references.
pub fn cider(candidates: &[Tokens], references: &[Tokens]) -> Result<f64> {
    check_corpus("cider", candidates, references)?;
    let table = IdfTable::new(references);
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| table.score(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhraseScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl PhraseScores {
    pub fn from_tokens(candidates: &[Tokens], references: &[Tokens]) -> Result<Self> {
        Ok(PhraseScores {
            bleu1: bleu_n(candidates, references, 1)?,
            bleu2: bleu_n(candidates, references, 2)?,
            rouge_l: rouge_l(candidates, references)?,
            cider: cider(candidates, references)?,
        })
    }
}

/// Scores predicted phrases against the ground-truth phrases, matched by
/// sample id. Pairs are ordered by id before scoring so the result does not
/// depend on input order.
pub fn score_phrases(preds: &[Prediction], refs: &[GroundingSample]) -> Result<PhraseScores> {
    let by_id: HashMap<&str, &Prediction> =
        preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let mut pairs = Vec::with_capacity(refs.len());
    for s in refs {
        let p = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::MissingPrediction(s.id.clone()))?;
        pairs.push((s.id.as_str(), tokenize(&p.phrase), tokenize(&s.phrase)));
    }
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    let (cands, refs): (Vec<_>, Vec<_>) = pairs.into_iter().map(|(_, c, r)| (c, r)).unzip();
    PhraseScores::from_tokens(&cands, &refs)
}
