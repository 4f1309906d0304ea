//! Evaluation metrics: dynamic time warping over pose sequences and
//! BLEU / ROUGE-L over token sequences (used for back-translation scoring).

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::progressive::PoseSequence;

/// Errors surfaced by metric computation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("pose sequences have {left} vs {right} joints")]
    JointMismatch { left: usize, right: usize },
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("corpus sides hold {candidates} candidates but {references} references")]
    CorpusMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A monotone alignment between two pose sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Frame index pairs from `(0, 0)` to `(frames_a - 1, frames_b - 1)`.
    pub path: Vec<(usize, usize)>,
    /// Sum of Euclidean frame distances along the path.
    pub total_cost: f64,
    /// `total_cost` divided by the path length.
    pub normalized_cost: f64,
}

fn frame_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Dynamic-time-warping alignment of two pose sequences under per-frame
/// Euclidean distance over the `3 * joints` coordinate channels (counters do
/// not participate). Steps advance either sequence or both; cost ties prefer
/// the diagonal step, then advancing the first sequence.
pub fn dtw_align(a: &PoseSequence, b: &PoseSequence) -> Result<AlignmentResult, MetricsError> {
    if a.joints() != b.joints() {
        return Err(MetricsError::JointMismatch {
            left: a.joints(),
            right: b.joints(),
        });
    }
    let n = a.frames();
    let m = b.frames();

    const DIAG: u8 = 0;
    const UP: u8 = 1; // advance a
    const LEFT: u8 = 2; // advance b
    const START: u8 = 3;

    let mut cost = vec![0.0f64; n * m];
    let mut step = vec![START; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(a.frame(i), b.frame(j));
            let (best, from) = match (i, j) {
                (0, 0) => (0.0, START),
                (0, _) => (cost[j - 1], LEFT),
                (_, 0) => (cost[(i - 1) * m], UP),
                _ => {
                    let diag = cost[(i - 1) * m + (j - 1)];
                    let up = cost[(i - 1) * m + j];
                    let left = cost[i * m + (j - 1)];
                    let mut best = (diag, DIAG);
                    if up < best.0 {
                        best = (up, UP);
                    }
                    if left < best.0 {
                        best = (left, LEFT);
                    }
                    best
                }
            };
            cost[i * m + j] = best + d;
            step[i * m + j] = from;
        }
    }

    let mut path = Vec::new();
    let (mut i, mut j) = (n - 1, m - 1);
    loop {
        path.push((i, j));
        match step[i * m + j] {
            DIAG => {
                i -= 1;
                j -= 1;
            }
            UP => i -= 1,
            LEFT => j -= 1,
            _ => break,
        }
    }
    path.reverse();

    let total_cost = cost[n * m - 1];
    Ok(AlignmentResult {
        normalized_cost: total_cost / path.len() as f64,
        total_cost,
        path,
    })
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-1 through BLEU-`max_n`, each in [0, 100].
///
/// Modified n-gram precisions use reference-clipped counts pooled over the
/// corpus; the brevity penalty `e^(1 - r/c)` applies when the candidate side
/// is shorter in total. No smoothing: a zero precision at any order zeroes
/// that score and all higher orders it participates in.
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<Vec<f64>, MetricsError> {
    if max_n == 0 {
        return Err(MetricsError::InvalidParameter("max_n must be positive".into()));
    }
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus("candidate"));
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::CorpusMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }

    let cand_total: u64 = candidates.iter().map(|c| c.len() as u64).sum();
    let ref_total: u64 = references.iter().map(|r| r.len() as u64).sum();
    if cand_total == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let brevity = if cand_total >= ref_total {
        1.0
    } else {
        (1.0 - ref_total as f64 / cand_total as f64).exp()
    };

    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut matched: u64 = 0;
        let mut total: u64 = 0;
        for (cand, reference) in candidates.iter().zip(references) {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &cand_counts {
                total += count;
                matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
        precisions.push(if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        });
    }

    Ok((1..=max_n)
        .map(|k| {
            if precisions[..k].contains(&0.0) {
                0.0
            } else {
                let log_mean = precisions[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
                100.0 * brevity * log_mean.exp()
            }
        })
        .collect())
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (β = 1) of one candidate against one reference, in [0, 1].
/// An empty candidate scores 0; an empty reference is an error.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_length(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean per-pair [`rouge_l`] over a corpus.
pub fn rouge_l_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus("candidate"));
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::CorpusMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        total += rouge_l(c, r)?;
    }
    Ok(total / candidates.len() as f64)
}

/// Aggregate evaluation results for one data split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// BLEU-1 through BLEU-4, each in [0, 100].
    pub bleu: [f64; 4],
    /// Mean ROUGE-L F1 in [0, 1].
    pub rouge_l: f64,
    /// Mean normalized DTW cost of produced against reference poses, when
    /// pose production was evaluated.
    pub dtw_mean: Option<f64>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bleu1={:.2} bleu2={:.2} bleu3={:.2} bleu4={:.2} rougeL={:.4}",
            self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], self.rouge_l
        )?;
        if let Some(dtw) = self.dtw_mean {
            write!(f, " dtw_mean={dtw:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn pose1(xs: &[f32]) -> PoseSequence {
        let data: Vec<f32> = xs.iter().flat_map(|&x| [x, 0.0, 0.0]).collect();
        PoseSequence::new(1, data).unwrap()
    }

    #[test]
    fn identical_sequences_align_diagonally_at_zero_cost() {
        let a = pose1(&[0.0, 1.0, 2.0, 3.0]);
        let r = dtw_align(&a, &a).unwrap();
        assert_eq!(r.total_cost, 0.0);
        assert_eq!(r.normalized_cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn alignment_matches_a_hand_computed_case() {
        let a = pose1(&[0.0, 1.0, 2.0]);
        let b = pose1(&[0.0, 2.0]);
        let r = dtw_align(&a, &b).unwrap();
        assert!((r.total_cost - 1.0).abs() < 1e-12);
        assert_eq!(r.path, vec![(0, 0), (1, 0), (2, 1)]);
        assert!((r.normalized_cost - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn counters_do_not_contribute_to_alignment_cost() {
        let a = pose1(&[0.5, 1.5]);
        let b = PoseSequence::with_counters(1, a.data().to_vec(), vec![0.0, 0.0]).unwrap();
        let r = dtw_align(&a, &b).unwrap();
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn joint_mismatch_is_rejected() {
        let a = pose1(&[0.0]);
        let b = PoseSequence::new(2, vec![0.0; 6]).unwrap();
        assert_eq!(
            dtw_align(&a, &b).unwrap_err(),
            MetricsError::JointMismatch { left: 1, right: 2 }
        );
    }

    /// Exhaustive minimum over all monotone paths, for cross-checking.
    fn brute_force_min_cost(a: &PoseSequence, b: &PoseSequence) -> f64 {
        fn go(a: &PoseSequence, b: &PoseSequence, i: usize, j: usize) -> f64 {
            let d = super::frame_distance(a.frame(i), b.frame(j));
            if i == 0 && j == 0 {
                return d;
            }
            let mut best = f64::INFINITY;
            if i > 0 && j > 0 {
                best = best.min(go(a, b, i - 1, j - 1));
            }
            if i > 0 {
                best = best.min(go(a, b, i - 1, j));
            }
            if j > 0 {
                best = best.min(go(a, b, i, j - 1));
            }
            d + best
        }
        go(a, b, a.frames() - 1, b.frames() - 1)
    }

    #[test]
    fn alignment_cost_matches_brute_force_on_random_pairs() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64 - 1.0
        };
        for case in 0..200 {
            let la = 1 + case % 6;
            let lb = 1 + (case / 6) % 6;
            let a = pose1(&(0..la).map(|_| next() as f32).collect::<Vec<_>>());
            let b = pose1(&(0..lb).map(|_| next() as f32).collect::<Vec<_>>());
            let got = dtw_align(&a, &b).unwrap().total_cost;
            let want = brute_force_min_cost(&a, &b);
            assert!(
                (got - want).abs() < 1e-9,
                "case {case}: dtw {got} vs brute force {want}"
            );
        }
    }

    #[test]
    fn alignment_cost_is_symmetric() {
        let a = pose1(&[0.0, 0.7, -0.3, 2.0]);
        let b = pose1(&[0.1, -0.5, 1.9]);
        let ab = dtw_align(&a, &b).unwrap();
        let ba = dtw_align(&b, &a).unwrap();
        assert!((ab.total_cost - ba.total_cost).abs() < 1e-12);
    }

    #[test]
    fn unigram_precision_is_reference_clipped() {
        // Candidate "a a a" vs reference "a b": only one "a" credits.
        let scores = bleu(&[toks("a a a")], &[toks("a b")], 1).unwrap();
        assert!((scores[0] - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        // "a c" vs "a b c": unigram precision 1, BP = e^(1 - 3/2).
        let scores = bleu(&[toks("a c")], &[toks("a b c")], 1).unwrap();
        let want = 100.0 * (1.0f64 - 1.5).exp();
        assert!((scores[0] - want).abs() < 1e-9);
    }

    #[test]
    fn perfect_match_scores_one_hundred_at_every_order() {
        let c = vec![toks("the cat sat on the mat")];
        let scores = bleu(&c, &c, 4).unwrap();
        for s in scores {
            assert!((s - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_precision_at_any_order_zeroes_the_score() {
        // Unigrams overlap but no bigram does.
        let scores = bleu(&[toks("a b")], &[toks("b a")], 2).unwrap();
        assert!(scores[0] > 0.0);
        assert_eq!(scores[1], 0.0);
    }

    #[test]
    fn orders_beyond_the_candidate_length_score_zero() {
        let scores = bleu(&[toks("a")], &[toks("a")], 2).unwrap();
        assert!((scores[0] - 100.0).abs() < 1e-9);
        assert_eq!(scores[1], 0.0);
    }

    #[test]
    fn bleu_pools_counts_over_the_corpus() {
        // Pair 1: 1 of 2 unigrams matched; pair 2: 2 of 2. Pooled p1 = 3/4,
        // total lengths equal so BP = 1.
        let scores = bleu(
            &[toks("a x"), toks("c d")],
            &[toks("a b"), toks("c d")],
            1,
        )
        .unwrap();
        assert!((scores[0] - 75.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_invariant_under_token_relabeling() {
        let c = vec![toks("a b b c"), toks("c a")];
        let r = vec![toks("a b c c"), toks("a c")];
        let relabel = |sents: &[Vec<String>]| -> Vec<Vec<String>> {
            sents
                .iter()
                .map(|s| s.iter().map(|t| format!("tok_{t}")).collect())
                .collect()
        };
        assert_eq!(
            bleu(&c, &r, 4).unwrap(),
            bleu(&relabel(&c), &relabel(&r), 4).unwrap()
        );
    }

    #[test]
    fn empty_candidate_corpus_side_scores_zero() {
        let scores = bleu(&[vec![]], &[toks("a b")], 4).unwrap();
        assert_eq!(scores, vec![0.0; 4]);
        assert!(bleu(&[], &[], 4).is_err());
        assert!(bleu(&[toks("a")], &[], 4).is_err());
    }

    #[test]
    fn rouge_matches_a_hand_computed_case() {
        // LCS("a c", "a b c") = 2: P = 1, R = 2/3, F1 = 0.8.
        let got = rouge_l(&toks("a c"), &toks("a b c")).unwrap();
        assert!((got - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rouge_handles_empty_and_disjoint_sequences() {
        assert_eq!(rouge_l(&[], &toks("a")).unwrap(), 0.0);
        assert_eq!(rouge_l(&toks("x y"), &toks("a b")).unwrap(), 0.0);
        assert_eq!(rouge_l(&toks("a"), &[]).unwrap_err(), MetricsError::EmptyReference);
        assert_eq!(rouge_l(&toks("a"), &toks("a")).unwrap(), 1.0);
    }

    #[test]
    fn corpus_rouge_is_the_per_pair_mean() {
        let got = rouge_l_corpus(
            &[toks("a c"), toks("a")],
            &[toks("a b c"), toks("a")],
        )
        .unwrap();
        assert!((got - (0.8 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_prints_a_stable_single_line() {
        let report = EvalReport {
            bleu: [61.5, 48.25, 30.0, 21.125],
            rouge_l: 0.73205,
            dtw_mean: Some(1.25),
        };
        assert_eq!(
            report.to_string(),
            "bleu1=61.50 bleu2=48.25 bleu3=30.00 bleu4=21.12 rougeL=0.7320 dtw_mean=1.2500"
        );
        let no_dtw = EvalReport {
            dtw_mean: None,
            ..report
        };
        assert!(!no_dtw.to_string().contains("dtw"));
    }
}
