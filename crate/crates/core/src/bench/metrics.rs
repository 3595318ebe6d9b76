//! Exact-match accuracy and Rouge-L, scored on greedy generations.

use super::tasks::{MetricKind, TaskFamily, TaskSample};
use super::vocab::EOS;
use crate::adapters::AdapterSet;
use crate::autodiff::Scalar;
use crate::backbone::Backbone;
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;

/// Generation budget per answer; every target in the benchmark is shorter.
pub const MAX_NEW_TOKENS: usize = 6;

const EVAL_CHUNK: usize = 64;

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
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

/// Rouge-L F-measure with recall weighted by `beta²`:
/// `F = (1 + β²)·P·R / (R + β²·P)` where `P = lcs/|cand|`, `R = lcs/|ref|`.
/// Two empty sequences score 1, one empty sequence scores 0.
pub fn rouge_l_beta<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_beta(candidate, reference, ROUGE_BETA)
}

/// Generated answers (without the prompt, cut at the first EOS).
pub fn predict<S: Scalar>(
    model: &Backbone<S>,
    adapters: Option<&AdapterSet<S>>,
    samples: &[TaskSample],
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let prompts: Vec<Vec<usize>> = chunk.iter().map(TaskSample::prompt).collect();
        let gen = model.generate_batch(&prompts, MAX_NEW_TOKENS, Some(EOS), adapters)?;
        for (p, g) in prompts.iter().zip(gen) {
            let mut answer = g[p.len()..].to_vec();
            if let Some(end) = answer.iter().position(|&t| t == EOS) {
                answer.truncate(end);
            }
            out.push(answer);
        }
    }
    Ok(out)
}

pub fn score(kind: MetricKind, prediction: &[usize], target: &[usize]) -> f64 {
    match kind {
        MetricKind::Accuracy => f64::from(u8::from(prediction == target)),
        MetricKind::RougeL => rouge_l(prediction, target),
    }
}

/// Mean metric of the family's eval split.
pub fn evaluate<S: Scalar>(model: &Backbone<S>, adapters: Option<&AdapterSet<S>>, family: &TaskFamily) -> Result<f64> {
    evaluate_samples(model, adapters, family.metric, &family.eval)
}

pub fn evaluate_samples<S: Scalar>(
    model: &Backbone<S>,
    adapters: Option<&AdapterSet<S>>,
    kind: MetricKind,
    samples: &[TaskSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let preds = predict(model, adapters, samples)?;
    let total: f64 = preds.iter().zip(samples).map(|(p, s)| score(kind, p, &s.target)).sum();
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Full-table LCS, the textbook recurrence.
    fn lcs_table(a: &[u8], b: &[u8]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                t[i][j] = if a[i - 1] == b[j - 1] {
                    t[i - 1][j - 1] + 1
                } else {
                    t[i - 1][j].max(t[i][j - 1])
                };
            }
        }
        t[a.len()][b.len()]
    }

    /// Longest subsequence of `a` (by exhaustive subset search) found in `b`.
    fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
        let is_sub = |s: &[u8]| {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_sub(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    fn f_oracle(c: &[u8], r: &[u8], beta: f64) -> f64 {
        if c.is_empty() && r.is_empty() {
            return 1.0;
        }
        let l = lcs_table(c, r) as f64;
        if l == 0.0 {
            return 0.0;
        }
        let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
        (1.0 + beta * beta) * p * rc / (rc + beta * beta * p)
    }

    #[test]
    fn closed_cases() {
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]), 0.0);
        let e: [u8; 0] = [];
        assert_eq!(rouge_l(&e, &e), 1.0);
        assert_eq!(rouge_l(&e, &[1]), 0.0);
        assert_eq!(rouge_l(&[1], &e), 0.0);
        // "the cat sat" vs "the cat": P = 2/3, R = 1
        let (p, r, b2) = (2.0 / 3.0, 1.0, 1.44);
        let want = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&["the", "cat", "sat"], &["the", "cat"]) - want).abs() < 1e-15);
        // only β = 1 is symmetric
        let (a, b) = ([1, 2, 3], [1, 2]);
        assert!((rouge_l_beta(&a, &b, 1.0) - rouge_l_beta(&b, &a, 1.0)).abs() < 1e-15);
        assert!((rouge_l(&a, &b) - rouge_l(&b, &a)).abs() > 1e-3);
    }

    #[test]
    fn matches_dp_oracle_on_random_pairs() {
        let mut rng = Rng::new(42);
        for _ in 0..1000 {
            let la = rng.below(12);
            let lb = rng.below(12);
            let a: Vec<u8> = (0..la).map(|_| rng.below(6) as u8).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.below(6) as u8).collect();
            assert_eq!(lcs_len(&a, &b), lcs_table(&a, &b));
            assert_eq!(rouge_l(&a, &b), f_oracle(&a, &b, ROUGE_BETA));
        }
    }

    proptest! {
        #[test]
        fn lcs_equals_exhaustive_search(a in prop::collection::vec(0u8..4, 0..9), b in prop::collection::vec(0u8..4, 0..9)) {
            prop_assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b));
        }

        #[test]
        fn rouge_is_a_unit_interval_score(a in prop::collection::vec(0u8..5, 0..10), b in prop::collection::vec(0u8..5, 0..10)) {
            let f = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn score_kinds() {
        assert_eq!(score(MetricKind::Accuracy, &[3], &[3]), 1.0);
        assert_eq!(score(MetricKind::Accuracy, &[3, 4], &[3]), 0.0);
        assert_eq!(score(MetricKind::RougeL, &[3, 4], &[3, 4]), 1.0);
    }
}
