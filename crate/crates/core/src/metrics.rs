//! BLEU-1..4, METEOR (exact-match alignment) and ROUGE-L.
//!
//! All scorers take pre-tokenized text; `score_tokens` produces the
//! lowercased whitespace tokens used for evaluation.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercased whitespace tokens.
pub fn score_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

impl ScoreReport {
    /// Corpus-level BLEU, mean sentence METEOR and mean sentence ROUGE-L.
    pub fn compute<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<Self> {
        let m = candidates.len() as f64;
        let bleu = |n| corpus_bleu(candidates, references, n);
        Ok(Self {
            bleu1: bleu(1)?,
            bleu2: bleu(2)?,
            bleu3: bleu(3)?,
            bleu4: bleu(4)?,
            meteor: candidates.iter().zip(references).map(|(c, r)| meteor(c, r)).sum::<f64>() / m,
            rouge_l: candidates
                .iter()
                .zip(references)
                .map(|(c, r)| rouge_l(c, r, ROUGE_BETA))
                .sum::<f64>()
                / m,
        })
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l]
    }
}

pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total candidate n-grams of order `n`.
fn clipped<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let rc = ngram_counts(reference, n);
    let cc = ngram_counts(cand, n);
    let matched = cc
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

fn check_n(n: usize) -> Result<()> {
    if (1..=4).contains(&n) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("BLEU order must be 1..=4, got {n}")))
    }
}

/// Corpus BLEU-n: geometric mean of pooled clipped precisions of orders
/// `1..=n` times the brevity penalty; 0 if any pooled precision is 0.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    check_n(n)?;
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to score".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for m in 1..=n {
            let (a, b) = clipped(c, r, m);
            matched[m - 1] += a;
            total[m - 1] += b;
        }
    }
    let mut log_sum = 0.0;
    for m in 0..n {
        if matched[m] == 0 || total[m] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[m] as f64 / total[m] as f64).ln();
    }
    Ok(brevity_penalty(c_len, r_len) * (log_sum / n as f64).exp())
}

/// Sentence BLEU-n. With `smoothing`, an order with zero matches uses
/// `(0 + 1) / (total + 1)` instead of 0.
pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize, smoothing: bool) -> f64 {
    let n = n.clamp(1, 4);
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for m in 1..=n {
        let (a, b) = clipped(candidate, reference, m);
        let p = if a == 0 {
            if smoothing {
                1.0 / (b as f64 + 1.0)
            } else {
                return 0.0;
            }
        } else {
            a as f64 / b as f64
        };
        log_sum += p.ln();
    }
    brevity_penalty(candidate.len(), reference.len()) * (log_sum / n as f64).exp()
}

/// Longest common subsequence length, O(|a| |b|) time and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// LCS-based F-measure `(1 + b^2) P R / (R + b^2 P)`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// An exact-match unigram alignment: `(matches, chunks)`.
///
/// Among alignments with the maximum number of matched pairs, finds one with
/// the fewest chunks (runs that are contiguous and in order on both sides).
/// Chunks equal `matches - adjacencies`, so the search maximizes
/// adjacencies with a memoized walk over candidate positions.
pub fn meteor_alignment<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> (usize, usize) {
    // For each candidate position, the reference positions holding the same token.
    let mut ref_pos: HashMap<&T, Vec<usize>> = HashMap::new();
    for (j, t) in reference.iter().enumerate() {
        ref_pos.entry(t).or_default().push(j);
    }
    let options: Vec<&[usize]> = candidate
        .iter()
        .map(|t| ref_pos.get(t).map_or(&[][..], Vec::as_slice))
        .collect();

    // Matches per token type are min(count in cand, count in ref).
    let mut need: HashMap<&T, usize> = HashMap::new();
    let mut cand_count: HashMap<&T, usize> = HashMap::new();
    for t in candidate {
        *cand_count.entry(t).or_default() += 1;
    }
    let mut matches = 0;
    for (t, &c) in &cand_count {
        let r = ref_pos.get(t).map_or(0, Vec::len);
        need.insert(t, c.min(r));
        matches += c.min(r);
    }
    if matches == 0 {
        return (0, 0);
    }
    // Remaining occurrences of each token after position i, to know when a
    // position may be skipped without losing a match.
    let mut remaining_after = vec![0usize; candidate.len()];
    let mut seen: HashMap<&T, usize> = HashMap::new();
    for i in (0..candidate.len()).rev() {
        remaining_after[i] = seen.get(&candidate[i]).copied().unwrap_or(0);
        *seen.entry(&candidate[i]).or_default() += 1;
    }

    struct Search<'a, T: Eq + Hash> {
        candidate: &'a [T],
        options: Vec<&'a [usize]>,
        need: HashMap<&'a T, usize>,
        remaining_after: Vec<usize>,
        memo: HashMap<(usize, Option<usize>, Vec<u64>), i64>,
    }

    impl<T: Eq + Hash> Search<'_, T> {
        /// Max adjacencies from position `i` given the previous candidate
        /// position's link `prev` and used reference positions.
        fn best(&mut self, i: usize, prev: Option<usize>, used: &mut Vec<u64>, taken: &mut HashMap<usize, usize>) -> i64 {
            if i == self.candidate.len() {
                return 0;
            }
            let key = (i, prev, used.clone());
            if let Some(&v) = self.memo.get(&key) {
                return v;
            }
            let tok = &self.candidate[i];
            let need = self.need[tok];
            let group = self.options[i].first().copied();
            let have = group.map_or(0, |g| taken.get(&g).copied().unwrap_or(0));
            let mut best = i64::MIN;
            // Skip this position if enough later occurrences remain.
            if have + self.remaining_after[i] >= need {
                best = self.best(i + 1, None, used, taken);
            }
            if have < need {
                let opts = self.options[i];
                for &j in opts {
                    let (w, bit) = (j / 64, 1u64 << (j % 64));
                    if used[w] & bit != 0 {
                        continue;
                    }
                    used[w] |= bit;
                    *taken.entry(opts[0]).or_default() += 1;
                    let adj = i64::from(prev.is_some_and(|p| p + 1 == j));
                    let v = self.best(i + 1, Some(j), used, taken);
                    *taken.get_mut(&opts[0]).unwrap() -= 1;
                    used[w] &= !bit;
                    if v != i64::MIN {
                        best = best.max(v + adj);
                    }
                }
            }
            self.memo.insert(key, best);
            best
        }
    }

    let mut search = Search {
        candidate,
        options,
        need,
        remaining_after,
        memo: HashMap::new(),
    };
    let mut used = vec![0u64; reference.len().div_ceil(64).max(1)];
    let adjacencies = search.best(0, None, &mut used, &mut HashMap::new());
    (matches, matches - adjacencies as usize)
}

/// METEOR with exact matching only: `F = 10PR / (R + 9P)`, fragmentation
/// penalty `0.5 (chunks / m)^3`, score `F (1 - penalty)`.
pub fn meteor<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = meteor_alignment(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        score_tokens(s)
    }

    #[test]
    fn bleu_identical_is_one() {
        let c = vec![t("find all php files under current directory")];
        for n in 1..=4 {
            assert!((corpus_bleu(&c, &c, n).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_clipping() {
        let b = corpus_bleu(&[t("the the the the")], &[t("the cat is here")], 1).unwrap();
        assert!((b - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity() {
        let b = corpus_bleu(&[t("a b c")], &[t("a b c d e f")], 1).unwrap();
        assert!((b - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_errors() {
        assert!(corpus_bleu(&[t("a")], &[], 1).is_err());
        assert!(corpus_bleu::<String>(&[], &[], 1).is_err());
        assert!(corpus_bleu(&[t("a")], &[t("a")], 5).is_err());
    }

    #[test]
    fn sentence_bleu_basics() {
        assert!((sentence_bleu(&t("a b c d"), &t("a b c d"), 4, false) - 1.0).abs() < 1e-12);
        assert_eq!(sentence_bleu(&t("a b"), &t("c d"), 4, false), 0.0);
        // Smoothed, all orders > 2 have zero totals: p = [1, 1, 1, 1].
        assert!((sentence_bleu(&t("a b"), &t("a b"), 4, true) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_examples() {
        assert_eq!(meteor(&t("a"), &t("b")), 0.0);
        assert!((meteor(&t("a"), &t("a")) - 0.5).abs() < 1e-12);
        let ten = t("a b c d e f g h i j");
        assert!((meteor(&ten, &ten) - 0.9995).abs() < 1e-12);
    }

    #[test]
    fn meteor_prefers_fewer_chunks() {
        // "a" can align to either reference "a"; aligning to the one next to
        // "b" yields a single chunk.
        assert_eq!(meteor_alignment(&t("a b"), &t("a x a b")), (2, 1));
        assert_eq!(meteor_alignment(&t("b a"), &t("a b")), (2, 2));
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l(&t("a b c"), &t("a b c"), 1.2) - 1.0).abs() < 1e-12);
        assert!((rouge_l(&t("a b c d"), &t("a c d e"), 1.2) - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&t("a b"), &t("c d"), 1.2), 0.0);
    }
}
