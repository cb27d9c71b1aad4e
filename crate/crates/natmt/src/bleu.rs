//! Corpus-level BLEU-4: clipped n-gram precision, brevity penalty, no
//! smoothing. Scores live in [0, 100].

use std::collections::HashMap;

use crate::error::EvalError;

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn lowercase(sents: &[Vec<String>]) -> Vec<Vec<String>> {
    sents
        .iter()
        .map(|s| s.iter().map(|t| t.to_lowercase()).collect())
        .collect()
}

/// Corpus BLEU with a single reference per hypothesis. Any n-gram order
/// with zero precision (or no hypothesis n-grams at all) zeroes the score.
pub fn bleu(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    case_sensitive: bool,
) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::CountMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::Empty);
    }
    let (hyps, refs);
    let (hyps_ref, refs_ref): (&[Vec<String>], &[Vec<String>]) = if case_sensitive {
        (hypotheses, references)
    } else {
        hyps = lowercase(hypotheses);
        refs = lowercase(references);
        (&hyps, &refs)
    };

    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps_ref.iter().zip(refs_ref) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            if hc.is_empty() {
                continue;
            }
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                total[n - 1] += c;
                let clip = rc.get(gram).copied().unwrap_or(0);
                matched[n - 1] += c.min(clip);
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision = 0.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0);
        }
        log_precision += (matched[n] as f64 / total[n] as f64).ln();
    }
    log_precision /= MAX_ORDER as f64;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_precision.exp())
}

/// One reference-length bucket of a bucketed evaluation.
#[derive(Debug, Clone)]
pub struct BucketScore {
    pub min_len: usize,
    /// None for the open-ended final bucket.
    pub max_len: Option<usize>,
    pub count: usize,
    /// None when the bucket is empty.
    pub bleu: Option<f64>,
}

/// Corpus BLEU restricted to reference-length buckets. `edges` are strictly
/// increasing upper bounds; lengths above the last edge land in a final
/// open bucket, so together the buckets partition the corpus.
pub fn bleu_by_length_bucket(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    edges: &[usize],
    case_sensitive: bool,
) -> Result<Vec<BucketScore>, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::CountMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::Empty);
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.first() == Some(&0) {
        return Err(EvalError::BadBuckets);
    }
    let bucket_of = |len: usize| -> usize {
        edges
            .iter()
            .position(|&e| len <= e)
            .unwrap_or(edges.len())
    };
    let mut groups: Vec<(Vec<Vec<String>>, Vec<Vec<String>>)> =
        vec![(Vec::new(), Vec::new()); edges.len() + 1];
    for (h, r) in hypotheses.iter().zip(references) {
        let b = bucket_of(r.len());
        groups[b].0.push(h.clone());
        groups[b].1.push(r.clone());
    }
    let mut out = Vec::with_capacity(groups.len());
    for (b, (hs, rs)) in groups.into_iter().enumerate() {
        let min_len = if b == 0 { 1 } else { edges[b - 1] + 1 };
        let max_len = edges.get(b).copied();
        let score = if hs.is_empty() {
            None
        } else {
            Some(bleu(&hs, &rs, case_sensitive)?)
        };
        out.push(BucketScore {
            min_len,
            max_len,
            count: if score.is_some() { hs_len(&hs) } else { 0 },
            bleu: score,
        });
    }
    Ok(out)
}

fn hs_len(hs: &[Vec<String>]) -> usize {
    hs.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identity_scores_100() {
        let refs = vec![toks("a b c d e"), toks("f g h i")];
        assert!((bleu(&refs, &refs, true).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_token_clips_to_zero_bleu() {
        // "the the the" vs "the cat": clipped p1 = 1/3, p2 = 0 -> BLEU 0
        let hyp = vec![toks("the the the")];
        let refs = vec![toks("the cat")];
        assert_eq!(bleu(&hyp, &refs, true).unwrap(), 0.0);
    }

    #[test]
    fn case_flag_matters() {
        let hyp = vec![toks("The Cat Sat On Mat")];
        let refs = vec![toks("the cat sat on mat")];
        assert_eq!(bleu(&hyp, &refs, true).unwrap(), 0.0);
        assert!((bleu(&hyp, &refs, false).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant_over_sentences() {
        let hyps = vec![toks("a b c d"), toks("e f g h"), toks("i j k l m")];
        let refs = vec![toks("a b x d"), toks("e f g h"), toks("i j k q m")];
        let fwd = bleu(&hyps, &refs, true).unwrap();
        let hyps_r: Vec<_> = hyps.iter().rev().cloned().collect();
        let refs_r: Vec<_> = refs.iter().rev().cloned().collect();
        let rev = bleu(&hyps_r, &refs_r, true).unwrap();
        assert!((fwd - rev).abs() < 1e-12);
    }

    #[test]
    fn count_mismatch_and_empty() {
        assert!(matches!(
            bleu(&[toks("a")], &[], true),
            Err(EvalError::CountMismatch { .. })
        ));
        assert!(matches!(bleu(&[], &[], true), Err(EvalError::Empty)));
    }

    #[test]
    fn brevity_penalty_applies() {
        // perfect 4-token prefix of an 8-token reference
        let hyp = vec![toks("a b c d")];
        let refs = vec![toks("a b c d e f g h")];
        let got = bleu(&hyp, &refs, true).unwrap();
        let expect = 100.0 * (1.0f64 - 8.0 / 4.0).exp();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn single_bucket_equals_corpus_bleu() {
        let hyps = vec![toks("a b c d"), toks("e f g h i")];
        let refs = vec![toks("a b c x"), toks("e f g h i")];
        let full = bleu(&hyps, &refs, true).unwrap();
        let buckets = bleu_by_length_bucket(&hyps, &refs, &[100], true).unwrap();
        assert_eq!(buckets.len(), 2);
        assert!((buckets[0].bleu.unwrap() - full).abs() < 1e-12);
        assert!(buckets[1].bleu.is_none());
        assert_eq!(buckets[0].count, 2);
    }

    #[test]
    fn buckets_partition_the_corpus() {
        let hyps: Vec<Vec<String>> = (1..=12)
            .map(|n| (0..n).map(|i| format!("w{i}")).collect())
            .collect();
        let refs = hyps.clone();
        let buckets = bleu_by_length_bucket(&hyps, &refs, &[3, 6, 9], true).unwrap();
        let total: usize = buckets.iter().map(|b| b.count).sum();
        assert_eq!(total, 12);
        assert_eq!(buckets.len(), 4);
        assert!(matches!(
            bleu_by_length_bucket(&hyps, &refs, &[5, 5], true),
            Err(EvalError::BadBuckets)
        ));
    }
}
