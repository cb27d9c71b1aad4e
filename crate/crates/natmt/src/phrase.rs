//! Phrase tables: internal construction from parallel text (IBM Model 1 in
//! both directions, intersection symmetrization, consistent phrase-pair
//! extraction), Moses-format reading, greedy segmenting lookup, and
//! word-table restriction.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::corpus::{SentencePair, Vocabulary, UNK};
use crate::error::TableError;

/// Source index used for the empty (NULL) alignment word.
const NULL_SRC: u32 = u32::MAX;

/// Lexical translation probabilities t(target | source), sparse over the
/// co-occurring pairs. Per-source distributions sum to 1.
#[derive(Debug, Clone)]
pub struct AlignmentModel {
    t: HashMap<u32, HashMap<u32, f64>>,
}

impl AlignmentModel {
    pub fn prob(&self, src: Option<u32>, tgt: u32) -> f64 {
        let key = src.unwrap_or(NULL_SRC);
        self.t
            .get(&key)
            .and_then(|m| m.get(&tgt))
            .copied()
            .unwrap_or(0.0)
    }

    /// Highest-probability target for a source token, ties broken by the
    /// smaller target id.
    pub fn argmax(&self, src: u32) -> Option<(u32, f64)> {
        let m = self.t.get(&src)?;
        let mut best: Option<(u32, f64)> = None;
        for (&tgt, &p) in m {
            best = match best {
                None => Some((tgt, p)),
                Some((bt, bp)) => {
                    if p > bp || (p == bp && tgt < bt) {
                        Some((tgt, p))
                    } else {
                        Some((bt, bp))
                    }
                }
            };
        }
        best
    }

    /// Check per-source normalization, used by tests and debug assertions.
    pub fn max_normalization_error(&self) -> f64 {
        self.t
            .values()
            .map(|m| (m.values().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard IBM Model 1 EM with a NULL source token. Returns the model and
/// the per-iteration data log-likelihood (computed with the parameters in
/// force at the start of each iteration, so the sequence is non-decreasing).
pub fn train_ibm1(
    pairs: &[SentencePair],
    iterations: usize,
) -> Result<(AlignmentModel, Vec<f64>), TableError> {
    if pairs.is_empty() {
        return Err(TableError::EmptyCorpus);
    }
    let iterations = iterations.max(1);

    // uniform init over each source token's co-occurring targets
    let mut t: HashMap<u32, HashMap<u32, f64>> = HashMap::new();
    for p in pairs {
        for &f in &p.tgt {
            t.entry(NULL_SRC).or_default().insert(f, 0.0);
            for &e in &p.src {
                t.entry(e).or_default().insert(f, 0.0);
            }
        }
    }
    for m in t.values_mut() {
        let u = 1.0 / m.len() as f64;
        for v in m.values_mut() {
            *v = u;
        }
    }

    let mut loglik = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut counts: HashMap<u32, HashMap<u32, f64>> = HashMap::new();
        let mut ll = 0.0;
        for p in pairs {
            let norm = ((p.src.len() + 1) as f64).recip();
            for &f in &p.tgt {
                let mut denom = t[&NULL_SRC][&f];
                for &e in &p.src {
                    denom += t[&e][&f];
                }
                ll += (denom * norm).ln();
                let inv = denom.recip();
                *counts
                    .entry(NULL_SRC)
                    .or_default()
                    .entry(f)
                    .or_insert(0.0) += t[&NULL_SRC][&f] * inv;
                for &e in &p.src {
                    *counts.entry(e).or_default().entry(f).or_insert(0.0) += t[&e][&f] * inv;
                }
            }
        }
        loglik.push(ll);
        for (e, fs) in counts {
            let total: f64 = fs.values().sum();
            let m = t.get_mut(&e).unwrap();
            for (f, c) in fs {
                m.insert(f, c / total);
            }
        }
    }
    Ok((AlignmentModel { t }, loglik))
}

/// Per-target-position Viterbi alignment under IBM Model 1: each target
/// token picks its most likely source position, or None for NULL. Ties
/// prefer a real position over NULL, then the leftmost position.
pub fn viterbi_align(model: &AlignmentModel, src: &[u32], tgt: &[u32]) -> Vec<Option<usize>> {
    tgt.iter()
        .map(|&f| {
            let mut best: (Option<usize>, f64) = (None, model.prob(None, f));
            for (i, &e) in src.iter().enumerate() {
                let p = model.prob(Some(e), f);
                if p > best.1 {
                    best = (Some(i), p);
                }
            }
            best.0
        })
        .collect()
}

/// Mapping from source phrases (1..=L tokens) to candidate target phrases
/// sorted by descending probability; equal probabilities break ties
/// lexicographically on the target phrase.
#[derive(Debug, Clone, Default)]
pub struct PhraseTable {
    entries: BTreeMap<Vec<String>, Vec<(Vec<String>, f64)>>,
    max_src_len: usize,
}

impl PhraseTable {
    pub fn from_scored(
        scored: impl IntoIterator<Item = (Vec<String>, Vec<String>, f64)>,
    ) -> Self {
        let mut entries: BTreeMap<Vec<String>, Vec<(Vec<String>, f64)>> = BTreeMap::new();
        for (src, tgt, p) in scored {
            entries.entry(src).or_default().push((tgt, p));
        }
        let mut table = PhraseTable {
            max_src_len: entries.keys().map(|k| k.len()).max().unwrap_or(0),
            entries,
        };
        table.sort_candidates();
        table
    }

    fn sort_candidates(&mut self) {
        for cands in self.entries.values_mut() {
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        }
    }

    /// Maximum source phrase length present (the lookup search depth L).
    pub fn max_source_len(&self) -> usize {
        self.max_src_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn candidates(&self, src: &[String]) -> Option<&[(Vec<String>, f64)]> {
        self.entries.get(src).map(|v| v.as_slice())
    }

    pub fn best(&self, src: &[String]) -> Option<&(Vec<String>, f64)> {
        self.entries.get(src).and_then(|v| v.first())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<String>, &[(Vec<String>, f64)])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Native format: `src phrase TAB tgt phrase TAB prob`, sorted.
    pub fn write_tsv(&self, path: &Path) -> Result<(), TableError> {
        let f = File::create(path).map_err(|e| TableError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = BufWriter::new(f);
        for (src, cands) in &self.entries {
            for (tgt, p) in cands {
                writeln!(w, "{}\t{}\t{}", src.join(" "), tgt.join(" "), p).map_err(|e| {
                    TableError::Io {
                        path: path.display().to_string(),
                        source: e,
                    }
                })?;
            }
        }
        w.flush().map_err(|e| TableError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn read_tsv(path: &Path) -> Result<Self, TableError> {
        let f = File::open(path).map_err(|e| TableError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut scored = Vec::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| TableError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(TableError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            let p: f64 = fields[2].parse().map_err(|e| TableError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad probability {:?}: {e}", fields[2]),
            })?;
            scored.push((split_ws(fields[0]), split_ws(fields[1]), p));
        }
        Ok(PhraseTable::from_scored(scored))
    }
}

fn split_ws(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

/// Read a Moses phrase table (plain or gzip). Each line is
/// `src ||| tgt ||| scores...`; `score_col` selects which score to keep,
/// with the default 2 (third score) being the direct phrase translation
/// probability phi(e|f) in the standard five-score ordering.
pub fn parse_moses_table(path: &Path, score_col: usize) -> Result<PhraseTable, TableError> {
    let f = File::open(path).map_err(|e| TableError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(f))
    } else {
        Box::new(f)
    };
    let mut scored = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| TableError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("|||").map(|s| s.trim()).collect();
        if fields.len() < 3 {
            return Err(TableError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected at least 3 `|||` fields, got {}", fields.len()),
            });
        }
        let scores: Vec<&str> = fields[2].split_whitespace().collect();
        let raw = scores.get(score_col).ok_or_else(|| TableError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("score column {score_col} missing ({} scores)", scores.len()),
        })?;
        let p: f64 = raw.parse().map_err(|e| TableError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad score {raw:?}: {e}"),
        })?;
        scored.push((split_ws(fields[0]), split_ws(fields[1]), p));
    }
    Ok(PhraseTable::from_scored(scored))
}

/// Viterbi-align every pair in both directions, keep the intersection, then
/// extract alignment-consistent phrase pairs up to `max_len` source tokens
/// (target spans are capped at the same length), scored by relative
/// frequency p(tgt | src). Phrases containing reserved tokens are skipped.
pub fn extract_phrases(
    pairs: &[SentencePair],
    vocab: &Vocabulary,
    forward: &AlignmentModel,
    reverse: &AlignmentModel,
    max_len: usize,
) -> Result<PhraseTable, TableError> {
    if pairs.is_empty() {
        return Err(TableError::EmptyCorpus);
    }
    let max_len = max_len.max(1);
    let mut counts: BTreeMap<Vec<u32>, BTreeMap<Vec<u32>, usize>> = BTreeMap::new();
    for p in pairs {
        let fwd = viterbi_align(forward, &p.src, &p.tgt);
        let rev = viterbi_align(reverse, &p.tgt, &p.src);
        // intersection of the two directional alignments
        let mut links: Vec<(usize, usize)> = Vec::new();
        for (j, fa) in fwd.iter().enumerate() {
            if let Some(i) = fa {
                if rev[*i] == Some(j) {
                    links.push((*i, j));
                }
            }
        }
        let tgt_aligned: Vec<bool> = {
            let mut v = vec![false; p.tgt.len()];
            for &(_, j) in &links {
                v[j] = true;
            }
            v
        };
        for i1 in 0..p.src.len() {
            for i2 in i1..(i1 + max_len).min(p.src.len()) {
                let mut j_min = usize::MAX;
                let mut j_max = 0;
                let mut any = false;
                for &(i, j) in &links {
                    if i >= i1 && i <= i2 {
                        any = true;
                        j_min = j_min.min(j);
                        j_max = j_max.max(j);
                    }
                }
                if !any {
                    continue;
                }
                // consistency: no link from inside the target span to a
                // source position outside [i1, i2]
                let consistent = links
                    .iter()
                    .all(|&(i, j)| !(j >= j_min && j <= j_max) || (i >= i1 && i <= i2));
                if !consistent {
                    continue;
                }
                // extend over unaligned target boundary words
                let mut lo = j_min;
                loop {
                    let mut hi = j_max;
                    loop {
                        if hi - lo < max_len {
                            record_phrase(&mut counts, p, i1, i2, lo, hi);
                        }
                        if hi + 1 >= p.tgt.len() || tgt_aligned[hi + 1] {
                            break;
                        }
                        hi += 1;
                    }
                    if lo == 0 || tgt_aligned[lo - 1] {
                        break;
                    }
                    lo -= 1;
                }
            }
        }
    }

    let mut scored = Vec::new();
    for (src_ids, tgts) in counts {
        if src_ids.iter().any(|&id| id <= UNK) {
            continue;
        }
        let total: usize = tgts.values().sum();
        for (tgt_ids, c) in tgts {
            if tgt_ids.iter().any(|&id| id <= UNK) {
                continue;
            }
            scored.push((
                vocab.decode_seq(&src_ids),
                vocab.decode_seq(&tgt_ids),
                c as f64 / total as f64,
            ));
        }
    }
    Ok(PhraseTable::from_scored(scored))
}

fn record_phrase(
    counts: &mut BTreeMap<Vec<u32>, BTreeMap<Vec<u32>, usize>>,
    p: &SentencePair,
    i1: usize,
    i2: usize,
    j1: usize,
    j2: usize,
) {
    let src = p.src[i1..=i2].to_vec();
    let tgt = p.tgt[j1..=j2].to_vec();
    *counts.entry(src).or_default().entry(tgt).or_insert(0) += 1;
}

/// Greedy segmenting lookup: at position i try the longest span first
/// (length L down to 1); the first span with a table entry emits its best
/// candidate and the scan resumes at the first unconsumed token. Tokens
/// with no matching span are skipped and emit nothing.
pub fn greedy_lookup(tokens: &[String], table: &PhraseTable) -> Vec<String> {
    let l = table.max_source_len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = false;
        let top = l.min(tokens.len() - i);
        for span in (1..=top).rev() {
            if let Some((tgt, _)) = table.best(&tokens[i..i + span]) {
                out.extend(tgt.iter().cloned());
                i += span;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    out
}

/// Single-token restriction of a phrase table: each unigram source phrase
/// maps to its best single-token target. A source covered only by longer
/// phrases (or only multi-token targets) has no entry.
#[derive(Debug, Clone, Default)]
pub struct WordTable {
    map: BTreeMap<String, (String, f64)>,
}

impl WordTable {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&(String, f64)> {
        self.map.get(token)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &(String, f64))> {
        self.map.iter()
    }

    /// View the word table as a unigram phrase table so the same lookup
    /// path serves both.
    pub fn to_phrase_table(&self) -> PhraseTable {
        PhraseTable::from_scored(
            self.map
                .iter()
                .map(|(s, (t, p))| (vec![s.clone()], vec![t.clone()], *p)),
        )
    }

    pub fn write_tsv(&self, path: &Path) -> Result<(), TableError> {
        self.to_phrase_table().write_tsv(path)
    }

    pub fn read_tsv(path: &Path) -> Result<Self, TableError> {
        let table = PhraseTable::read_tsv(path)?;
        let mut map = BTreeMap::new();
        for (src, cands) in table.iter() {
            if src.len() != 1 {
                continue;
            }
            if let Some((tgt, p)) = cands.iter().find(|(t, _)| t.len() == 1) {
                map.insert(src[0].clone(), (tgt[0].clone(), *p));
            }
        }
        Ok(WordTable { map })
    }
}

pub fn extract_word_table(table: &PhraseTable) -> Result<WordTable, TableError> {
    if table.is_empty() {
        return Err(TableError::EmptyTable);
    }
    let mut map = BTreeMap::new();
    for (src, cands) in table.iter() {
        if src.len() != 1 {
            continue;
        }
        // candidates are sorted, so the first single-token target wins
        if let Some((tgt, p)) = cands.iter().find(|(t, _)| t.len() == 1) {
            map.insert(src[0].clone(), (tgt[0].clone(), *p));
        }
    }
    Ok(WordTable { map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|x| x.to_string()).collect()
    }

    fn mini_corpus(raw: &[(&str, &str)]) -> (Vec<SentencePair>, Vocabulary) {
        let raw: Vec<(Vec<String>, Vec<String>)> =
            raw.iter().map(|(s, t)| (toks(s), toks(t))).collect();
        let vocab = Vocabulary::build(&raw, 1).unwrap();
        let pairs = crate::corpus::encode_pairs(&raw, &vocab);
        (pairs, vocab)
    }

    #[test]
    fn ibm1_single_cooccurrence() {
        let (pairs, vocab) = mini_corpus(&[("a", "x")]);
        let (model, _) = train_ibm1(&pairs, 1).unwrap();
        let a = vocab.encode("a");
        let x = vocab.encode("x");
        assert!((model.prob(Some(a), x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ibm1_disambiguates_with_anchor() {
        let (pairs, vocab) = mini_corpus(&[("a", "x"), ("a b", "x y")]);
        let (model, _) = train_ibm1(&pairs, 10).unwrap();
        let (best_a, _) = model.argmax(vocab.encode("a")).unwrap();
        let (best_b, _) = model.argmax(vocab.encode("b")).unwrap();
        assert_eq!(vocab.decode(best_a), "x");
        assert_eq!(vocab.decode(best_b), "y");
        assert!(model.max_normalization_error() < 1e-6);
    }

    #[test]
    fn ibm1_loglik_non_decreasing() {
        let (pairs, _) = mini_corpus(&[
            ("a b c", "x y z"),
            ("c b", "z y"),
            ("a c", "x z"),
            ("b", "y"),
            ("a a b", "x x y"),
        ]);
        let (_, ll) = train_ibm1(&pairs, 8).unwrap();
        for w in ll.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood dropped: {w:?}");
        }
    }

    #[test]
    fn ibm1_empty_corpus() {
        assert!(matches!(train_ibm1(&[], 3), Err(TableError::EmptyCorpus)));
    }

    #[test]
    fn extraction_on_monotone_pairs() {
        let raw = [
            ("a b", "x y"),
            ("b c", "y z"),
            ("c a", "z x"),
            ("a", "x"),
            ("b c a", "y z x"),
        ];
        let (pairs, vocab) = mini_corpus(&raw);
        let (fwd, _) = train_ibm1(&pairs, 10).unwrap();
        let swapped: Vec<SentencePair> = pairs
            .iter()
            .map(|p| SentencePair::new(p.tgt.clone(), p.src.clone()))
            .collect();
        let (rev, _) = train_ibm1(&swapped, 10).unwrap();
        let table = extract_phrases(&pairs, &vocab, &fwd, &rev, 3).unwrap();
        for (s, t) in [("a", "x"), ("b", "y"), ("c", "z")] {
            let cands = table.candidates(&toks(s)).unwrap();
            assert_eq!(cands[0].0, toks(t));
            assert!((cands[0].1 - 1.0).abs() < 1e-12, "{s}->{t}: {cands:?}");
        }
        // all source phrases within the length cap, probabilities sum <= 1
        for (src, cands) in table.iter() {
            assert!(src.len() <= 3);
            let sum: f64 = cands.iter().map(|(_, p)| p).sum();
            assert!(sum <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn greedy_lookup_longest_match_wins() {
        let table = PhraseTable::from_scored(vec![
            (toks("a b"), toks("X"), 0.9),
            (toks("a"), toks("Y"), 0.8),
            (toks("b"), toks("Z"), 0.7),
        ]);
        assert_eq!(greedy_lookup(&toks("a b c"), &table), toks("X"));
        assert_eq!(greedy_lookup(&[], &table), Vec::<String>::new());
        // skipping: "c" alone has no translation
        assert_eq!(greedy_lookup(&toks("c"), &table), Vec::<String>::new());
        // resume after the match: "a b a" -> X Y
        assert_eq!(greedy_lookup(&toks("a b a"), &table), toks("X Y"));
    }

    #[test]
    fn greedy_lookup_picks_highest_probability() {
        let table = PhraseTable::from_scored(vec![
            (toks("a"), toks("P"), 0.2),
            (toks("a"), toks("Q"), 0.7),
            (toks("a"), toks("R"), 0.1),
        ]);
        assert_eq!(greedy_lookup(&toks("a"), &table), toks("Q"));
        // equal probabilities break lexicographically
        let table = PhraseTable::from_scored(vec![
            (toks("a"), toks("N"), 0.5),
            (toks("a"), toks("M"), 0.5),
        ]);
        assert_eq!(greedy_lookup(&toks("a"), &table), toks("M"));
    }

    #[test]
    fn moses_line_parses_third_score() {
        let dir = std::env::temp_dir().join(format!("natmt-moses-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("table.txt");
        std::fs::write(&path, "a b ||| X Y ||| 0.5 0.2 0.7 0.1 2.718\n").unwrap();
        let table = parse_moses_table(&path, 2).unwrap();
        let (tgt, p) = table.best(&toks("a b")).unwrap();
        assert_eq!(tgt, &toks("X Y"));
        assert!((p - 0.7).abs() < 1e-12);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn moses_empty_file_and_duplicates() {
        let dir = std::env::temp_dir().join(format!("natmt-moses2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let empty = dir.join("empty.txt");
        std::fs::write(&empty, "").unwrap();
        let table = parse_moses_table(&empty, 2).unwrap();
        assert!(table.is_empty());
        assert_eq!(table.max_source_len(), 0);

        let dup = dir.join("dup.txt");
        std::fs::write(
            &dup,
            "a ||| X ||| 0 0 0.3 0 0\na ||| Y ||| 0 0 0.6 0 0\na ||| Z ||| 0 0 0.1 0 0\n",
        )
        .unwrap();
        let table = parse_moses_table(&dup, 2).unwrap();
        let cands = table.candidates(&toks("a")).unwrap();
        assert_eq!(cands.len(), 3);
        assert_eq!(cands[0].0, toks("Y"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn moses_bad_score_reports_line() {
        let dir = std::env::temp_dir().join(format!("natmt-moses3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.txt");
        std::fs::write(&path, "a ||| X ||| 0.1 0.2 0.3\nb ||| Y ||| 0.1 0.2 oops\n").unwrap();
        match parse_moses_table(&path, 2) {
            Err(TableError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn word_table_is_argmax_restriction() {
        let table = PhraseTable::from_scored(vec![
            (toks("a"), toks("X"), 0.9),
            (toks("a"), toks("Y"), 0.1),
            (toks("a"), toks("X X"), 0.95),
            (toks("a b"), toks("Z"), 1.0),
        ]);
        let wt = extract_word_table(&table).unwrap();
        assert_eq!(wt.get("a").unwrap().0, "X");
        // "a b" is not a unigram, so no entry beyond "a"
        assert_eq!(wt.len(), 1);
        // every word-table entry exists in the phrase table
        for (s, (t, p)) in wt.iter() {
            let cands = table.candidates(&[s.clone()]).unwrap();
            assert!(cands.iter().any(|(tt, pp)| tt.len() == 1 && &tt[0] == t && pp == p));
        }
    }

    #[test]
    fn tsv_roundtrip_exact() {
        let table = PhraseTable::from_scored(vec![
            (toks("a b"), toks("X"), 0.125),
            (toks("a"), toks("Y Z"), 1.0 / 3.0),
            (toks("q"), toks("W"), 1e-9),
        ]);
        let dir = std::env::temp_dir().join(format!("natmt-tsv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.tsv");
        table.write_tsv(&path).unwrap();
        let back = PhraseTable::read_tsv(&path).unwrap();
        assert_eq!(back.len(), table.len());
        assert_eq!(back.max_source_len(), table.max_source_len());
        for (src, cands) in table.iter() {
            let got = back.candidates(src).unwrap();
            assert_eq!(got.len(), cands.len());
            for ((t1, p1), (t2, p2)) in cands.iter().zip(got) {
                assert_eq!(t1, t2);
                assert_eq!(p1.to_bits(), p2.to_bits());
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
