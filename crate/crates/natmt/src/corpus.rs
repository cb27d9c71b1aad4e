//! Parallel-corpus ingestion, joint vocabulary, and token-budgeted batching.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::CorpusError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token/id bijection shared by source and target sides.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build a joint vocabulary over both sides of the corpus. Tokens seen
    /// fewer than `min_count` times are dropped (they encode as UNK).
    /// Ordering is by descending frequency, ties broken lexicographically,
    /// so construction is deterministic.
    pub fn build(pairs: &[(Vec<String>, Vec<String>)], min_count: usize) -> Result<Self, CorpusError> {
        if pairs.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (src, tgt) in pairs {
            for tok in src.iter().chain(tgt) {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { tokens, index })
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Some(id) only for in-vocabulary tokens.
    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn decode(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode_seq(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

    pub fn decode_seq(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.decode(i).to_string()).collect()
    }
}

/// One sentence pair as id sequences, without padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl SentencePair {
    pub fn new(src: Vec<u32>, tgt: Vec<u32>) -> Self {
        debug_assert!(!src.is_empty() && !tgt.is_empty());
        SentencePair { src, tgt }
    }
}

pub fn encode_pairs(raw: &[(Vec<String>, Vec<String>)], vocab: &Vocabulary) -> Vec<SentencePair> {
    raw.iter()
        .map(|(s, t)| SentencePair::new(vocab.encode_seq(s), vocab.encode_seq(t)))
        .collect()
}

/// Mean of per-pair target/source length ratios over the corpus.
pub fn length_ratio_alpha(pairs: &[SentencePair]) -> Result<f64, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::Empty);
    }
    let sum: f64 = pairs
        .iter()
        .map(|p| p.tgt.len() as f64 / p.src.len() as f64)
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Padded batch with explicit lengths and masks. The mask is 1 exactly on
/// non-PAD positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub src_width: usize,
    pub tgt: Vec<u32>,
    pub tgt_lens: Vec<usize>,
    pub tgt_width: usize,
    /// Indices of the batch members in the original corpus.
    pub origin: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src_lens.len()
    }

    pub fn src_mask(&self) -> Vec<f64> {
        mask_from_lens(&self.src_lens, self.src_width)
    }

    pub fn tgt_mask(&self) -> Vec<f64> {
        mask_from_lens(&self.tgt_lens, self.tgt_width)
    }

    pub fn src_row(&self, i: usize) -> &[u32] {
        &self.src[i * self.src_width..i * self.src_width + self.src_lens[i]]
    }

    pub fn tgt_row(&self, i: usize) -> &[u32] {
        &self.tgt[i * self.tgt_width..i * self.tgt_width + self.tgt_lens[i]]
    }
}

pub fn mask_from_lens(lens: &[usize], width: usize) -> Vec<f64> {
    let mut m = vec![0.0; lens.len() * width];
    for (i, &l) in lens.iter().enumerate() {
        for v in &mut m[i * width..i * width + l] {
            *v = 1.0;
        }
    }
    m
}

fn pad_matrix(rows: Vec<&[u32]>, width: usize) -> Vec<u32> {
    let mut out = vec![PAD; rows.len() * width];
    for (i, r) in rows.iter().enumerate() {
        out[i * width..i * width + r.len()].copy_from_slice(r);
    }
    out
}

/// Length-bucketed, seed-shuffled batches. Every pair appears exactly once.
/// The budget bounds `batch_size * max(src_width, tgt_width + 1)`; the +1
/// leaves room for the teacher's shifted input.
pub fn make_batches(
    pairs: &[SentencePair],
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<Batch>, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::Empty);
    }
    for (i, p) in pairs.iter().enumerate() {
        let len = p.src.len().max(p.tgt.len() + 1);
        if len > max_tokens {
            return Err(CorpusError::SentenceTooLong {
                index: i,
                len,
                max: max_tokens,
            });
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].tgt.len(), pairs[i].src.len(), i));

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut max_s = 0usize;
    let mut max_t = 0usize;
    for &i in &order {
        let s = pairs[i].src.len();
        let t = pairs[i].tgt.len();
        let new_s = max_s.max(s);
        let new_t = max_t.max(t);
        if !current.is_empty() && (current.len() + 1) * new_s.max(new_t + 1) > max_tokens {
            batches.push(std::mem::take(&mut current));
            max_s = 0;
            max_t = 0;
        }
        max_s = max_s.max(s);
        max_t = max_t.max(t);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);

    Ok(batches
        .into_iter()
        .map(|idxs| {
            let src_width = idxs.iter().map(|&i| pairs[i].src.len()).max().unwrap();
            let tgt_width = idxs.iter().map(|&i| pairs[i].tgt.len()).max().unwrap();
            Batch {
                src: pad_matrix(idxs.iter().map(|&i| pairs[i].src.as_slice()).collect(), src_width),
                src_lens: idxs.iter().map(|&i| pairs[i].src.len()).collect(),
                src_width,
                tgt: pad_matrix(idxs.iter().map(|&i| pairs[i].tgt.as_slice()).collect(), tgt_width),
                tgt_lens: idxs.iter().map(|&i| pairs[i].tgt.len()).collect(),
                tgt_width,
                origin: idxs,
            }
        })
        .collect())
}

/// Whitespace-tokenize one file, one sentence per line.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, CorpusError> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let toks: Vec<String> = line.split_whitespace().map(|s| s.to_string()).collect();
        if toks.is_empty() {
            return Err(CorpusError::Malformed {
                line: lineno + 1,
                msg: "empty sentence".into(),
            });
        }
        out.push(toks);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out)
}

/// Two aligned plain-text files (one sentence per line).
pub fn read_parallel(
    src_path: &Path,
    tgt_path: &Path,
) -> Result<Vec<(Vec<String>, Vec<String>)>, CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LengthMismatch {
            src: src.len(),
            tgt: tgt.len(),
        });
    }
    Ok(src.into_iter().zip(tgt).collect())
}

/// One file with `source TAB target` per line.
pub fn read_tsv(path: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>, CorpusError> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let mut fields = line.splitn(2, '\t');
        let (s, t) = match (fields.next(), fields.next()) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(CorpusError::Malformed {
                    line: lineno + 1,
                    msg: "expected source TAB target".into(),
                })
            }
        };
        let sv: Vec<String> = s.split_whitespace().map(|x| x.to_string()).collect();
        let tv: Vec<String> = t.split_whitespace().map(|x| x.to_string()).collect();
        if sv.is_empty() || tv.is_empty() {
            return Err(CorpusError::Malformed {
                line: lineno + 1,
                msg: "empty side".into(),
            });
        }
        out.push((sv, tv));
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|x| x.to_string()).collect()
    }

    #[test]
    fn vocab_enumeration() {
        let pairs = vec![(toks("a b"), toks("x")), (toks("a"), toks("x"))];
        let v = Vocabulary::build(&pairs, 1).unwrap();
        // reserved + {a, x} (count 2) + b (count 1)
        assert_eq!(v.len(), 7);
        for (i, name) in RESERVED.iter().enumerate() {
            assert_eq!(v.decode(i as u32), *name);
        }
        assert!(v.lookup("a").is_some());
        assert!(v.lookup("b").is_some());
        assert!(v.lookup("x").is_some());
    }

    #[test]
    fn vocab_min_count_threshold() {
        let pairs = vec![(toks("a b"), toks("x")), (toks("a"), toks("x"))];
        let v = Vocabulary::build(&pairs, 2).unwrap();
        assert!(v.lookup("a").is_some());
        assert!(v.lookup("x").is_some());
        assert!(v.lookup("b").is_none());
        assert_eq!(v.encode("b"), UNK);
    }

    #[test]
    fn vocab_bijection() {
        let pairs = vec![(toks("c a b"), toks("z y x"))];
        let v = Vocabulary::build(&pairs, 1).unwrap();
        for id in 0..v.len() as u32 {
            assert_eq!(v.encode(v.decode(id)), id);
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build(&[], 1), Err(CorpusError::Empty)));
    }

    #[test]
    fn alpha_values() {
        let pairs = vec![
            SentencePair::new(vec![4, 5], vec![6, 7]),
            SentencePair::new(vec![4, 5, 6], vec![6, 7, 8]),
        ];
        assert_eq!(length_ratio_alpha(&pairs).unwrap(), 1.0);
        let pairs = vec![
            SentencePair::new(vec![4], vec![6, 7]),
            SentencePair::new(vec![4, 5], vec![6, 7]),
        ];
        assert_eq!(length_ratio_alpha(&pairs).unwrap(), 1.5);
    }

    #[test]
    fn single_pair_batch() {
        let pairs = vec![SentencePair::new(vec![4, 5, 6], vec![7, 8])];
        let batches = make_batches(&pairs, 64, 0).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.size(), 1);
        assert_eq!(b.src_mask(), vec![1.0, 1.0, 1.0]);
        assert_eq!(b.tgt_mask(), vec![1.0, 1.0]);
    }

    #[test]
    fn two_pairs_padded_to_common_width() {
        let pairs = vec![
            SentencePair::new(vec![4, 5, 6], vec![4, 5, 6]),
            SentencePair::new(vec![4, 5, 6, 7, 8], vec![4, 5, 6, 7, 8]),
        ];
        let batches = make_batches(&pairs, 64, 0).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.src_width, 5);
        let sums: Vec<f64> = (0..2)
            .map(|i| b.src_mask()[i * 5..(i + 1) * 5].iter().sum())
            .collect();
        let mut sorted = sums.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![3.0, 5.0]);
    }

    #[test]
    fn epoch_covers_corpus_exactly() {
        let pairs: Vec<SentencePair> = (0..57)
            .map(|i| {
                let l = 1 + (i * 7) % 11;
                SentencePair::new(vec![4 + i as u32; l], vec![5 + i as u32; (l % 5) + 1])
            })
            .collect();
        let batches = make_batches(&pairs, 32, 123).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.origin.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..57).collect::<Vec<_>>());
        // contents match the original pairs
        for b in &batches {
            for (row, &orig) in b.origin.iter().enumerate() {
                assert_eq!(b.src_row(row), pairs[orig].src.as_slice());
                assert_eq!(b.tgt_row(row), pairs[orig].tgt.as_slice());
            }
        }
    }

    #[test]
    fn oversized_sentence_reported_with_index() {
        let pairs = vec![
            SentencePair::new(vec![4; 3], vec![5; 3]),
            SentencePair::new(vec![4; 40], vec![5; 2]),
        ];
        match make_batches(&pairs, 16, 0) {
            Err(CorpusError::SentenceTooLong { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected SentenceTooLong, got {other:?}"),
        }
    }
}
