//! Caption and retrieval metrics: BLEU, ROUGE-L and recall@k.

use std::collections::HashMap;
use std::fmt;

use crate::dataquality::SceneRecord;
use crate::linalg::dot;
use crate::toymodel::{ModelError, ModelSnapshot, TokenId};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("k = {k} outside 1..={bank}")]
    Range { k: usize, bank: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("record `{0}` has no caption")]
    MissingCaption(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-free sentence BLEU: geometric mean of clipped n-gram precisions
/// for `n = 1..=max_n` times the brevity penalty. No smoothing, so a zero
/// precision at any order gives 0.
pub fn bleu(candidate: &[TokenId], references: &[Vec<TokenId>], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len();
    // Closest reference length; ties go to the shorter one.
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / max_n as f64).exp()
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1 of the longest common subsequence.
pub fn rouge_l(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Distinct captions of the set in first-appearance order, plus each
/// record's index into that bank.
pub fn caption_bank(eval_set: &[SceneRecord]) -> Result<(Vec<Vec<TokenId>>, Vec<usize>), MetricError> {
    let mut bank: Vec<Vec<TokenId>> = Vec::new();
    let mut index: HashMap<&[TokenId], usize> = HashMap::new();
    let mut truth = Vec::with_capacity(eval_set.len());
    for r in eval_set {
        if r.caption.is_empty() {
            return Err(MetricError::MissingCaption(r.id.clone()));
        }
        let idx = *index.entry(&r.caption).or_insert_with(|| {
            bank.push(r.caption.clone());
            bank.len() - 1
        });
        truth.push(idx);
    }
    Ok((bank, truth))
}

/// Deduplicated caption bank, plus per record `(rank, top-1 index)`.
type Ranking = (Vec<Vec<TokenId>>, Vec<(usize, usize)>);

/// Per record: rank of the true caption among the bank (0 = best), with
/// ties resolved towards the lowest bank index, and the top-1 bank index.
fn ranks(model: &ModelSnapshot, eval_set: &[SceneRecord]) -> Result<Ranking, MetricError> {
    if eval_set.is_empty() {
        return Err(MetricError::EmptyEvalSet);
    }
    let (bank, truth) = caption_bank(eval_set)?;
    let enc = model.encoder();
    let texts = bank.iter().map(|c| enc.encode_text(c)).collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(eval_set.len());
    for (r, &t) in eval_set.iter().zip(&truth) {
        let z = enc.encode_image(&r.image)?;
        let scores: Vec<f64> = texts.iter().map(|e| dot(&z, e)).collect();
        let s_true = scores[t];
        let rank = scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > s_true || (s == s_true && j < t))
            .count();
        let mut top = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[top] {
                top = j;
            }
        }
        out.push((rank, top));
    }
    Ok((bank, out))
}

/// Fraction of records whose own caption ranks in the top `k` of the
/// deduplicated caption bank of the set.
pub fn recall_at_k(model: &ModelSnapshot, eval_set: &[SceneRecord], k: usize) -> Result<f64, MetricError> {
    let (bank, ranks) = ranks(model, eval_set)?;
    if k == 0 || k > bank.len() {
        return Err(MetricError::Range { k, bank: bank.len() });
    }
    let hits = ranks.iter().filter(|(rank, _)| *rank < k).count();
    Ok(hits as f64 / eval_set.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mean_bleu: f64,
    pub mean_rouge_l: f64,
    pub eval_set_id: String,
    pub model_version: u64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eval_set_id={}", self.eval_set_id)?;
        writeln!(f, "model_version={}", self.model_version)?;
        writeln!(f, "recall_at_1={:.6}", self.recall_at_1)?;
        writeln!(f, "recall_at_5={:.6}", self.recall_at_5)?;
        writeln!(f, "mean_bleu={:.6}", self.mean_bleu)?;
        write!(f, "mean_rouge_l={:.6}", self.mean_rouge_l)
    }
}

/// Retrieval recall plus BLEU-4 / ROUGE-L between each record's top-1
/// retrieved caption and its own caption. Recall@5 is capped at the bank
/// size.
pub fn evaluate(model: &ModelSnapshot, eval_set: &[SceneRecord], eval_set_id: &str) -> Result<EvalReport, MetricError> {
    let (bank, ranks) = ranks(model, eval_set)?;
    let n = eval_set.len() as f64;
    let k5 = 5.min(bank.len());
    let mut bleu_sum = 0.0;
    let mut rouge_sum = 0.0;
    for (r, &(_, top)) in eval_set.iter().zip(&ranks) {
        bleu_sum += bleu(&bank[top], std::slice::from_ref(&r.caption), 4);
        rouge_sum += rouge_l(&bank[top], &r.caption);
    }
    Ok(EvalReport {
        recall_at_1: ranks.iter().filter(|(rank, _)| *rank < 1).count() as f64 / n,
        recall_at_5: ranks.iter().filter(|(rank, _)| *rank < k5).count() as f64 / n,
        mean_bleu: bleu_sum / n,
        mean_rouge_l: rouge_sum / n,
        eval_set_id: eval_set_id.to_string(),
        model_version: model.version,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn bleu_examples() {
        let r = vec![1, 2, 3, 4];
        assert_eq!(bleu(&r, &[r.clone()], 4), 1.0);
        assert_eq!(bleu(&[7, 8], &[r.clone()], 4), 0.0);
        let got = bleu(&[1, 2, 3], &[r.clone()], 2);
        assert_eq!(got, (-1.0f64 / 3.0).exp());
        assert!((got - 0.7165).abs() < 5e-5);
        // Candidate shorter than max_n has no 4-grams.
        assert_eq!(bleu(&[1, 2, 3], &[r], 4), 0.0);
    }

    #[test]
    fn bleu_clips_and_picks_closest_reference() {
        // "the the the" vs "the cat": clipped unigram precision 1/3.
        let got = bleu(&[5, 5, 5], &[vec![5, 6]], 1);
        assert!((got - 1.0 / 3.0).abs() < 1e-15);
        // Two references of length 2 and 5; candidate length 3 is closest to 2.
        let got = bleu(&[1, 2, 3], &[vec![1, 2], vec![1, 2, 3, 4, 5]], 1);
        assert_eq!(got, 1.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]), 0.0);
        let got = rouge_l(&[1, 3, 4], &[1, 2, 3, 4]);
        assert_eq!(got, 6.0 / 7.0);
        assert!((got - 0.8571).abs() < 5e-5);
    }

    /// Independent n-gram counter: brute-force list scan.
    fn naive_clipped(c: &[TokenId], r: &[TokenId], n: usize) -> (usize, usize) {
        let cg: Vec<&[TokenId]> = c.windows(n).collect();
        let mut rg: Vec<Option<&[TokenId]>> = r.windows(n).map(Some).collect();
        let mut hit = 0;
        for g in &cg {
            if let Some(slot) = rg.iter_mut().find(|s| s.as_deref() == Some(*g)) {
                *slot = None;
                hit += 1;
            }
        }
        (hit, cg.len())
    }

    proptest! {
        #[test]
        fn bleu_matches_naive_counter(c in proptest::collection::vec(0u32..6, 4..10), r in proptest::collection::vec(0u32..6, 4..10)) {
            let mut log_sum = 0.0;
            let mut zero = false;
            for n in 1..=4 {
                let (hit, total) = naive_clipped(&c, &r, n);
                if hit == 0 { zero = true; break; }
                log_sum += (hit as f64 / total as f64).ln();
            }
            let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
            let want = if zero { 0.0 } else { bp * (log_sum / 4.0).exp() };
            let got = bleu(&c, &[r.clone()], 4);
            prop_assert!((got - want).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
            let rl = rouge_l(&c, &r);
            prop_assert!((0.0..=1.0).contains(&rl));
        }
    }
}
