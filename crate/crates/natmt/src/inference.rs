//! Length-window prediction, parallel NAT decoding, teacher rescoring, and
//! latency accounting.

use std::time::Instant;

use serde::Serialize;

use crate::corpus::PAD;
use crate::decoder_input::{
    candidate_ids, input_from_candidates, InputMethod, InputResources, SoftCopyKernel,
};
use crate::error::ModelError;
use crate::model::{
    encode_detached, frozen_view, nat_argmax, teacher_scores, Forward, ModelKind,
    TransformerParams,
};
use crate::params::BoundParams;
use crate::tape::Tape;

/// Inference-time target length window: candidate lengths are
/// floor(alpha * T) - B ..= floor(alpha * T) + B, clamped below at 1.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LengthWindow {
    pub alpha: f64,
    pub b: usize,
}

impl LengthWindow {
    pub fn new(alpha: f64, b: usize) -> Result<Self, ModelError> {
        if alpha <= 0.0 {
            return Err(ModelError::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(LengthWindow { alpha, b })
    }
}

/// Sorted, duplicate-free candidate lengths, all >= 1. The floor is applied
/// once to alpha * T, then the window spans +-B around it.
pub fn predict_lengths(t_candidate: usize, window: &LengthWindow) -> Vec<usize> {
    debug_assert!(t_candidate >= 1);
    let center = (window.alpha * t_candidate as f64).floor() as i64;
    let b = window.b as i64;
    let mut out: Vec<usize> = (center - b..=center + b)
        .map(|l| l.max(1) as usize)
        .collect();
    out.dedup();
    out
}

/// One decoded candidate length.
#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    pub len: usize,
    pub tokens: Vec<u32>,
    /// Mean log-probability of the chosen tokens under the student.
    pub nat_score: f64,
    /// Teacher-forced mean log-probability, present when rescoring ran.
    pub teacher_score: Option<f64>,
}

/// Timing and pass counts for one sentence.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SentenceTiming {
    pub wall: f64,
    pub lookup: f64,
    pub rescore: f64,
    pub nat_passes: u64,
    pub at_passes: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct TranslateOptions {
    pub method: InputMethod,
    pub window: LengthWindow,
    pub kernel: SoftCopyKernel,
    /// Pad encoder and decoder widths to this fixed size so a single
    /// decoder pass costs the same regardless of sentence length. When
    /// None, tensors are sized to the sentence.
    pub pad_to: Option<usize>,
}

impl TranslateOptions {
    pub fn new(method: InputMethod, window: LengthWindow) -> Self {
        TranslateOptions {
            method,
            window,
            kernel: SoftCopyKernel::default(),
            pad_to: None,
        }
    }
}

fn pick_best(candidates: &[Candidate], rescored: bool) -> usize {
    let score = |c: &Candidate| {
        if rescored {
            c.teacher_score.unwrap_or(f64::NEG_INFINITY)
        } else {
            c.nat_score
        }
    };
    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (&candidates[i], &candidates[best]);
        let (sa, sb) = (score(a), score(b));
        // argmax; ties prefer the shorter candidate, then lexicographic
        if sa > sb
            || (sa == sb
                && (a.tokens.len() < b.tokens.len()
                    || (a.tokens.len() == b.tokens.len() && a.tokens < b.tokens)))
        {
            best = i;
        }
    }
    best
}

/// Translate one sentence with the non-autoregressive student: build the
/// candidate once, decode one NAT pass per predicted length, and when B >= 1
/// rescore all candidates with the teacher in a single teacher-forced pass.
pub fn nat_translate_sentence(
    student: &TransformerParams,
    teacher: Option<&TransformerParams>,
    resources: &InputResources,
    src: &[u32],
    opts: &TranslateOptions,
) -> Result<(Vec<u32>, Vec<Candidate>, SentenceTiming), ModelError> {
    assert_eq!(student.kind, ModelKind::Student);
    if opts.window.b >= 1 && teacher.is_none() {
        return Err(ModelError::TeacherRequired { b: opts.window.b });
    }
    let start = Instant::now();
    let mut timing = SentenceTiming::default();
    let nat0 = student.counters.nat_count();
    let at0 = teacher.map(|t| t.counters.at_count()).unwrap_or(0);

    let t_lookup = Instant::now();
    let cand = candidate_ids(opts.method, resources, &student.vocab, src)?;
    timing.lookup = t_lookup.elapsed().as_secs_f64();

    let t_cand = cand.len().max(1);
    let mut lengths = predict_lengths(t_cand, &opts.window);
    let cap = student.config.max_positions;
    for l in lengths.iter_mut() {
        *l = (*l).min(cap);
    }
    lengths.dedup();

    // encode once at a fixed width when requested
    let s_pad = opts.pad_to.map(|p| p.max(src.len())).unwrap_or(src.len());
    let mut src_ids = vec![PAD; s_pad];
    src_ids[..src.len()].copy_from_slice(src);
    let enc = encode_detached(student, &src_ids, 1, s_pad, &[src.len()])?;

    let frozen = frozen_view(&student.set);
    let mut candidates = Vec::with_capacity(lengths.len());
    for &t_y in &lengths {
        let t_pad = opts.pad_to.map(|p| p.max(t_y)).unwrap_or(t_y);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &frozen);
        let input = input_from_candidates(
            &mut tape,
            &bound,
            student.config.d_model,
            std::slice::from_ref(&cand),
            opts.method == InputMethod::Embed,
            &[t_y],
            t_pad,
            &opts.kernel,
        )?;
        let mut fwd = Forward::new(&mut tape, &bound, student);
        let enc_var = fwd
            .tape
            .constant(vec![1, enc.s, enc.d], enc.data.clone())?;
        let logits = fwd.nat_forward(
            input.z,
            1,
            t_pad,
            &[t_y],
            enc_var,
            enc.s,
            &enc.lens,
        )?;
        let decoded = nat_argmax(
            tape.data(logits),
            1,
            t_pad,
            student.vocab.len(),
            &[t_y],
        );
        let (tokens, nat_score) = decoded.into_iter().next().unwrap();
        candidates.push(Candidate {
            len: t_y,
            tokens,
            nat_score,
            teacher_score: None,
        });
    }

    let rescored = opts.window.b >= 1;
    if rescored {
        let t_rescore = Instant::now();
        let teacher = teacher.unwrap();
        let seqs: Vec<Vec<u32>> = candidates.iter().map(|c| c.tokens.clone()).collect();
        let scores = teacher_scores(teacher, src, &seqs)?;
        for (c, s) in candidates.iter_mut().zip(scores) {
            c.teacher_score = Some(s);
        }
        timing.rescore = t_rescore.elapsed().as_secs_f64();
    }

    let best = pick_best(&candidates, rescored);
    timing.wall = start.elapsed().as_secs_f64();
    timing.nat_passes = student.counters.nat_count() - nat0;
    timing.at_passes = teacher.map(|t| t.counters.at_count() - at0).unwrap_or(0);
    Ok((candidates[best].tokens.clone(), candidates, timing))
}

/// Translate a corpus sentence by sentence.
pub fn nat_translate_corpus(
    student: &TransformerParams,
    teacher: Option<&TransformerParams>,
    resources: &InputResources,
    sources: &[Vec<u32>],
    opts: &TranslateOptions,
) -> Result<Vec<Vec<u32>>, ModelError> {
    sources
        .iter()
        .map(|src| nat_translate_sentence(student, teacher, resources, src, opts).map(|r| r.0))
        .collect()
}

/// What `measure_latency` runs per sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LatencyMode {
    /// Greedy decoding with the autoregressive teacher.
    AtGreedy,
    /// Single-length NAT decoding (B = 0).
    NatB0,
    /// NAT decoding with a +-4 length window and teacher rescoring.
    NatB4,
}

impl LatencyMode {
    pub fn name(&self) -> &'static str {
        match self {
            LatencyMode::AtGreedy => "at-greedy",
            LatencyMode::NatB0 => "nat-b0",
            LatencyMode::NatB4 => "nat-b4",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyRecord {
    pub src_len: usize,
    pub out_len: usize,
    pub wall: f64,
    pub lookup: f64,
    pub rescore: f64,
    pub nat_passes: u64,
    pub at_passes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub mode: String,
    pub records: Vec<LatencyRecord>,
}

impl LatencyReport {
    pub fn mean_wall_ms(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        1e3 * self.records.iter().map(|r| r.wall).sum::<f64>() / self.records.len() as f64
    }

    /// OLS slope of wall time (ms) against output length with a 95%
    /// confidence interval (normal approximation).
    pub fn wall_slope_ci(&self) -> Option<(f64, f64, f64)> {
        let xs: Vec<f64> = self.records.iter().map(|r| r.out_len as f64).collect();
        let ys: Vec<f64> = self.records.iter().map(|r| r.wall * 1e3).collect();
        ols_slope_ci(&xs, &ys)
    }
}

/// Least-squares slope with a 95% CI; None when degenerate.
pub fn ols_slope_ci(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 3 || n != ys.len() {
        return None;
    }
    let nf = n as f64;
    let xbar = xs.iter().sum::<f64>() / nf;
    let ybar = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    Some((slope, slope - 1.96 * se, slope + 1.96 * se))
}

/// Per-sentence latency over a test set, sequential and single-sentence to
/// keep the timing honest. The first `warmup` sentences run but are not
/// recorded.
#[allow(clippy::too_many_arguments)]
pub fn measure_latency(
    mode: LatencyMode,
    student: Option<&TransformerParams>,
    teacher: Option<&TransformerParams>,
    resources: &InputResources,
    sources: &[Vec<u32>],
    method: InputMethod,
    alpha: f64,
    pad_to: Option<usize>,
    warmup: usize,
) -> Result<LatencyReport, ModelError> {
    let mut records = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let rec = match mode {
            LatencyMode::AtGreedy => {
                let teacher = teacher.ok_or(ModelError::TeacherRequired { b: 0 })?;
                teacher.counters.reset();
                let max_len = ((alpha * src.len() as f64).ceil() as usize + 6)
                    .min(teacher.config.max_positions - 1);
                let start = Instant::now();
                let decoded = crate::model::beam_search(teacher, src, 1, max_len)?;
                let wall = start.elapsed().as_secs_f64();
                LatencyRecord {
                    src_len: src.len(),
                    out_len: decoded.tokens.len(),
                    wall,
                    lookup: 0.0,
                    rescore: 0.0,
                    nat_passes: 0,
                    at_passes: teacher.counters.at_count(),
                }
            }
            LatencyMode::NatB0 | LatencyMode::NatB4 => {
                let student = student.ok_or_else(|| {
                    ModelError::Config("latency mode requires a student model".into())
                })?;
                let b = if mode == LatencyMode::NatB4 { 4 } else { 0 };
                let opts = TranslateOptions {
                    method,
                    window: LengthWindow::new(alpha, b)?,
                    kernel: SoftCopyKernel::default(),
                    pad_to,
                };
                student.counters.reset();
                if let Some(t) = teacher {
                    t.counters.reset();
                }
                let (tokens, _, timing) =
                    nat_translate_sentence(student, teacher, resources, src, &opts)?;
                LatencyRecord {
                    src_len: src.len(),
                    out_len: tokens.len(),
                    wall: timing.wall,
                    lookup: timing.lookup,
                    rescore: timing.rescore,
                    nat_passes: timing.nat_passes,
                    at_passes: timing.at_passes,
                }
            }
        };
        if i >= warmup {
            records.push(rec);
        }
    }
    Ok(LatencyReport {
        mode: mode.name().to_string(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicted_lengths_match_window_arithmetic() {
        let w = LengthWindow::new(1.1, 0).unwrap();
        assert_eq!(predict_lengths(10, &w), vec![11]);
        let w = LengthWindow::new(1.1, 4).unwrap();
        assert_eq!(predict_lengths(10, &w), vec![7, 8, 9, 10, 11, 12, 13, 14, 15]);
        let w = LengthWindow::new(0.9, 4).unwrap();
        assert_eq!(predict_lengths(1, &w), vec![1, 2, 3, 4]);
    }

    #[test]
    fn predicted_lengths_sorted_unique_positive() {
        for t in 1..30usize {
            for b in 0..5usize {
                let w = LengthWindow::new(0.7, b).unwrap();
                let ls = predict_lengths(t, &w);
                assert!(!ls.is_empty());
                assert!(ls.iter().all(|&l| l >= 1));
                assert!(ls.windows(2).all(|p| p[0] < p[1]));
            }
        }
    }

    #[test]
    fn alpha_must_be_positive() {
        assert!(LengthWindow::new(0.0, 1).is_err());
        assert!(LengthWindow::new(-1.0, 0).is_err());
    }

    #[test]
    fn rescoring_pick_is_order_independent() {
        let mk = |len: usize, toks: Vec<u32>, ts: f64| Candidate {
            len,
            tokens: toks,
            nat_score: 0.0,
            teacher_score: Some(ts),
        };
        let a = mk(2, vec![5, 6], -0.5);
        let b = mk(3, vec![5, 6, 7], -0.25);
        let c = mk(4, vec![4, 4, 4, 4], -0.8);
        let set1 = vec![a.clone(), b.clone(), c.clone()];
        let set2 = vec![c.clone(), a.clone(), b.clone()];
        assert_eq!(set1[pick_best(&set1, true)].tokens, set2[pick_best(&set2, true)].tokens);
        // ties: shorter wins, then lexicographic
        let t1 = mk(2, vec![9, 9], -0.5);
        let t2 = mk(2, vec![5, 5], -0.5);
        let t3 = mk(3, vec![5, 5, 5], -0.5);
        let set = vec![t1, t2, t3];
        assert_eq!(set[pick_best(&set, true)].tokens, vec![5, 5]);
    }

    #[test]
    fn ols_slope_recovers_line() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 + 0.5 * x).collect();
        let (slope, lo, hi) = ols_slope_ci(&xs, &ys).unwrap();
        assert!((slope - 0.5).abs() < 1e-12);
        assert!(lo <= 0.5 && 0.5 <= hi);
        // pure noise around a constant: CI should typically contain 0
        let ys2: Vec<f64> = xs.iter().map(|x| 1.0 + (x * 977.0).sin() * 0.1).collect();
        let (_, lo2, hi2) = ols_slope_ci(&xs, &ys2).unwrap();
        assert!(lo2 < 0.0 && hi2 > 0.0);
    }
}
