//! Enhanced decoder inputs for the non-autoregressive decoder.
//!
//! Four ways to produce the candidate sequence z̃: copy the source tokens
//! (baseline), translate them through a phrase or word table, or map the
//! source embeddings into the target embedding space with a learned d x d
//! matrix. A Gaussian soft-copy kernel then adjusts the candidate to the
//! required target length. The mapping path is regularized by a
//! sentence-level L2 alignment loss and a word-level adversarial loss.

use std::str::FromStr;

use crate::corpus::Vocabulary;
use crate::error::ModelError;
use crate::params::BoundParams;
use crate::phrase::{greedy_lookup, PhraseTable};
use crate::tape::{Tape, Var};

/// Gaussian length-mapping kernel. Entry (j, i) weighs candidate position i
/// when producing target position j:
///   w_ij = exp(-(j - j'(i))^2 / tau),  j'(i) = i * T_y / T_z̃
/// with 1-based i and j, so the kernel is exactly diagonal when the lengths
/// match. By default each target row is normalized to sum to 1, making z_j
/// a convex combination; `raw` keeps the unnormalized weights.
#[derive(Debug, Clone, Copy)]
pub struct SoftCopyKernel {
    pub tau: f64,
    pub raw: bool,
}

impl Default for SoftCopyKernel {
    fn default() -> Self {
        SoftCopyKernel {
            tau: 0.3,
            raw: false,
        }
    }
}

impl SoftCopyKernel {
    pub fn new(tau: f64) -> Self {
        SoftCopyKernel { tau, raw: false }
    }

    /// Dense (t_dst, t_src) weight matrix, row-major.
    pub fn weights(&self, t_src: usize, t_dst: usize) -> Vec<f64> {
        assert!(t_src >= 1 && t_dst >= 1 && self.tau > 0.0);
        let mut w = vec![0.0; t_dst * t_src];
        let ratio = t_dst as f64 / t_src as f64;
        for j in 0..t_dst {
            let row = &mut w[j * t_src..(j + 1) * t_src];
            let mut d2 = vec![0.0; t_src];
            for (i, slot) in d2.iter_mut().enumerate() {
                let dist = (j + 1) as f64 - (i + 1) as f64 * ratio;
                *slot = dist * dist;
            }
            if self.raw {
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = (-d2[i] / self.tau).exp();
                }
            } else {
                // normalize in shifted log space so tiny tau cannot
                // underflow a whole row to zero
                let dmin = d2.iter().cloned().fold(f64::INFINITY, f64::min);
                let mut sum = 0.0;
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = (-(d2[i] - dmin) / self.tau).exp();
                    sum += *slot;
                }
                for slot in row.iter_mut() {
                    *slot /= sum;
                }
            }
        }
        w
    }
}

/// Map a (t_src, d) candidate embedding matrix to (t_dst, d) through the
/// kernel. Differentiable with respect to the candidate embeddings.
pub fn soft_length_map(
    tape: &mut Tape,
    candidate: Var,
    t_dst: usize,
    kernel: &SoftCopyKernel,
) -> Result<Var, ModelError> {
    let sh = tape.shape(candidate).to_vec();
    if sh.len() != 2 {
        return Err(ModelError::Config(format!(
            "soft_length_map expects (t, d), got {sh:?}"
        )));
    }
    let t_src = sh[0];
    let w = kernel.weights(t_src, t_dst);
    let k = tape.constant(vec![t_dst, t_src], w)?;
    Ok(tape.matmul(k, candidate)?)
}

/// E_z̃ = E_x W: transform source-side embeddings toward the target-side
/// embedding space. Gradients flow to both inputs.
pub fn map_embeddings(tape: &mut Tape, e_x: Var, w: Var) -> Result<Var, ModelError> {
    Ok(tape.matmul(e_x, w)?)
}

/// Sentence-level alignment loss: the Euclidean distance between the mapped
/// mean source embedding and the mean target embedding, averaged over the
/// batch. `e_x` and `e_y` are (B, d) sentence embeddings (token averages
/// over non-PAD positions).
pub fn align_loss(tape: &mut Tape, e_x: Var, e_y: Var, w: Var) -> Result<Var, ModelError> {
    let mapped = tape.matmul(e_x, w)?;
    let diff = tape.sub(mapped, e_y)?;
    let norms = tape.l2_norm_rows(diff)?;
    Ok(tape.mean_all(norms)?)
}

/// Discriminator logits for a (N, d) batch of embeddings: a two-layer MLP
/// with hidden width d and ReLU. The confidence score is sigmoid(logit),
/// strictly inside (0, 1).
pub fn discriminator_logits(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
) -> Result<Var, ModelError> {
    let w1 = bound.var("disc.w1")?;
    let b1 = bound.var("disc.b1")?;
    let w2 = bound.var("disc.w2")?;
    let b2 = bound.var("disc.b2")?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    Ok(tape.add_bias(o, b2)?)
}

/// Word-level value function of the adversarial game:
///   V with `mean over target tokens of log f_D(e(y))`
///   plus  `mean over mapped source tokens of log(1 - f_D(f_G(e(x))))`.
/// The discriminator ascends this value; the generator descends it.
/// Stable log-sigmoid keeps both terms finite.
pub fn adversarial_value(
    tape: &mut Tape,
    bound: &BoundParams,
    mapped: Var,
    target_emb: Var,
) -> Result<Var, ModelError> {
    let t_logits = discriminator_logits(tape, bound, target_emb)?;
    let t_term = tape.log_sigmoid(t_logits);
    let t_mean = tape.mean_all(t_term)?;
    let m_logits = discriminator_logits(tape, bound, mapped)?;
    let m_neg = tape.neg(m_logits);
    let m_term = tape.log_sigmoid(m_neg);
    let m_mean = tape.mean_all(m_term)?;
    Ok(tape.add(t_mean, m_mean)?)
}

/// How the decoder input candidate is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMethod {
    /// Source embeddings fed straight through the length mapper.
    Copy,
    /// Greedy phrase-table lookup, then embed the target tokens.
    Phrase,
    /// Word-table lookup (unigram restriction of the phrase table).
    Word,
    /// Learned linear mapping of source embeddings.
    Embed,
}

impl InputMethod {
    pub fn name(&self) -> &'static str {
        match self {
            InputMethod::Copy => "copy",
            InputMethod::Phrase => "phrase",
            InputMethod::Word => "word",
            InputMethod::Embed => "embed",
        }
    }
}

impl FromStr for InputMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(InputMethod::Copy),
            "phrase" => Ok(InputMethod::Phrase),
            "word" => Ok(InputMethod::Word),
            "embed" => Ok(InputMethod::Embed),
            other => Err(format!(
                "unknown decoder-input method {other:?} (expected copy|phrase|word|embed)"
            )),
        }
    }
}

/// Lookup tables the phrase/word methods need. The word table is stored as
/// a unigram phrase table so both share the lookup path.
#[derive(Default, Clone, Copy)]
pub struct InputResources<'a> {
    pub phrase_table: Option<&'a PhraseTable>,
    pub word_table: Option<&'a PhraseTable>,
}

/// The assembled decoder input for one batch.
#[derive(Debug)]
pub struct DecoderInputBatch {
    /// (B, t_max, d) embeddings, zero rows beyond each sentence's length.
    pub z: Var,
    /// Candidate length T_z̃ per sentence (lookup output length, or the
    /// source length for copy/embed).
    pub cand_lens: Vec<usize>,
    /// True where lookup skipped every source token; such sentences get a
    /// zero decoder input.
    pub empty_candidate: Vec<bool>,
}

/// Produce the candidate token sequence z̃ for one source sentence. For the
/// lookup methods this runs the greedy segmenting lookup; copy and embed
/// keep the source tokens themselves.
pub fn candidate_ids(
    method: InputMethod,
    resources: &InputResources,
    vocab: &Vocabulary,
    src: &[u32],
) -> Result<Vec<u32>, ModelError> {
    match method {
        InputMethod::Copy | InputMethod::Embed => Ok(src.to_vec()),
        InputMethod::Phrase => {
            let table = resources.phrase_table.ok_or(ModelError::MissingResource {
                method: "phrase",
                resource: "phrase table",
            })?;
            let tokens = vocab.decode_seq(src);
            Ok(vocab.encode_seq(&greedy_lookup(&tokens, table)))
        }
        InputMethod::Word => {
            let table = resources.word_table.ok_or(ModelError::MissingResource {
                method: "word",
                resource: "word table",
            })?;
            let tokens = vocab.decode_seq(src);
            Ok(vocab.encode_seq(&greedy_lookup(&tokens, table)))
        }
    }
}

/// Embed candidate token rows, optionally apply the learned mapping, and
/// length-map each row to its target length. Empty candidates become zero
/// rows with a warning flag.
#[allow(clippy::too_many_arguments)]
pub fn input_from_candidates(
    tape: &mut Tape,
    bound: &BoundParams,
    d_model: usize,
    candidates: &[Vec<u32>],
    apply_mapping: bool,
    tgt_lens: &[usize],
    t_max: usize,
    kernel: &SoftCopyKernel,
) -> Result<DecoderInputBatch, ModelError> {
    debug_assert_eq!(candidates.len(), tgt_lens.len());
    let embed_tok = bound.var("embed.tok")?;
    let scale = (d_model as f64).sqrt();
    let map_w = if apply_mapping {
        Some(bound.var("map.w")?)
    } else {
        None
    };
    let mut parts = Vec::with_capacity(candidates.len());
    let mut cand_lens = Vec::with_capacity(candidates.len());
    let mut empty_candidate = Vec::with_capacity(candidates.len());
    for (cand_ids, &t_y) in candidates.iter().zip(tgt_lens) {
        cand_lens.push(cand_ids.len());
        empty_candidate.push(cand_ids.is_empty());
        if cand_ids.is_empty() {
            parts.push(tape.constant(vec![t_y, d_model], vec![0.0; t_y * d_model])?);
            continue;
        }
        let idx: Vec<usize> = cand_ids.iter().map(|&x| x as usize).collect();
        let e = tape.gather_rows(embed_tok, &idx)?;
        let e = tape.scale(e, scale);
        let e = match map_w {
            Some(w) => map_embeddings(tape, e, w)?,
            None => e,
        };
        parts.push(soft_length_map(tape, e, t_y, kernel)?);
    }
    let z = tape.pad_stack_rows(&parts, t_max)?;
    Ok(DecoderInputBatch {
        z,
        cand_lens,
        empty_candidate,
    })
}

/// Build the decoder input z for a batch of unpadded source rows.
/// `tgt_lens[i]` is the desired output length T_y for sentence i; every
/// sentence is placed into a (B, t_max, d) tensor.
#[allow(clippy::too_many_arguments)]
pub fn build_decoder_input(
    tape: &mut Tape,
    bound: &BoundParams,
    method: InputMethod,
    resources: &InputResources,
    vocab: &Vocabulary,
    d_model: usize,
    src_rows: &[&[u32]],
    tgt_lens: &[usize],
    t_max: usize,
    kernel: &SoftCopyKernel,
) -> Result<DecoderInputBatch, ModelError> {
    let candidates: Vec<Vec<u32>> = src_rows
        .iter()
        .map(|&src| candidate_ids(method, resources, vocab, src))
        .collect::<Result<_, _>>()?;
    input_from_candidates(
        tape,
        bound,
        d_model,
        &candidates,
        method == InputMethod::Embed,
        tgt_lens,
        t_max,
        kernel,
    )
}
