//! BLEU-1 and ROUGE-L.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

fn counts<S: AsRef<str>>(tokens: &[S]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_ref()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram matches of `candidate` against `reference`.
pub fn clipped_matches<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> usize {
    let refs = counts(reference);
    counts(candidate)
        .iter()
        .map(|(tok, &n)| n.min(refs.get(tok).copied().unwrap_or(0)))
        .sum()
}

fn bleu_from_totals(matches: usize, cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let precision = matches as f64 / cand_len as f64;
    let bp = (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0);
    precision * bp
}

/// Corpus BLEU-1: pooled clipped unigram precision times the corpus
/// brevity penalty `min(1, exp(1 − r/c))`.
pub fn bleu1<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Degenerate("BLEU over an empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::dim("bleu1", &[candidates.len()], &[references.len()]));
    }
    let (mut matches, mut c, mut r) = (0, 0, 0);
    for (cand, reference) in candidates.iter().zip(references) {
        matches += clipped_matches(cand, reference);
        c += cand.len();
        r += reference.len();
    }
    Ok(bleu_from_totals(matches, c, r))
}

/// BLEU-1 of a single pair.
pub fn sentence_bleu1<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> f64 {
    bleu_from_totals(clipped_matches(candidate, reference), candidate.len(), reference.len())
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by `β = 1.2`.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub bleu1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub n_examples: usize,
    pub per_example: Vec<ExampleScore>,
}

impl EvalReport {
    pub fn new<S: AsRef<str>, T: AsRef<str>>(
        ids: &[String],
        candidates: &[Vec<S>],
        references: &[Vec<T>],
    ) -> Result<Self> {
        if ids.len() != candidates.len() {
            return Err(Error::dim("EvalReport", &[ids.len()], &[candidates.len()]));
        }
        let bleu = bleu1(candidates, references)?;
        let per_example: Vec<ExampleScore> = ids
            .iter()
            .zip(candidates.iter().zip(references))
            .map(|(id, (c, r))| ExampleScore {
                id: id.clone(),
                bleu1: sentence_bleu1(c, r),
                rouge_l: rouge_l(c, r),
            })
            .collect();
        let rouge = per_example.iter().map(|e| e.rouge_l).sum::<f64>() / per_example.len() as f64;
        Ok(EvalReport {
            bleu1: bleu,
            rouge_l: rouge,
            n_examples: per_example.len(),
            per_example,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
