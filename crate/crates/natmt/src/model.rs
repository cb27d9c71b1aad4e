//! Transformer encoder plus two decoder heads: an autoregressive teacher
//! and a non-autoregressive student. The student decoder runs without a
//! causal mask and adds a positional attention sublayer (queries and keys
//! are positional embeddings, values are the hidden states) between
//! self-attention and encoder-decoder attention.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{Vocabulary, BOS, EOS, PAD};
use crate::error::ModelError;
use crate::optim::OptimizerState;
use crate::params::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive mask value that zeroes a softmax slot exactly in f64.
pub const NEG_MASK: f64 = -1e30;

/// First vocabulary id that ordinary decoding may emit; PAD/BOS/EOS/UNK are
/// reserved below it. EOS terminates autoregressive decoding.
pub const FIRST_CONTENT_ID: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 2,
            d_ff: 128,
            dropout: 0.0,
            max_positions: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0
            || self.d_model == 0
            || self.heads == 0
            || self.d_ff == 0
            || self.max_positions == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Decoder/encoder forward-pass counters, used by latency accounting.
#[derive(Debug, Default)]
pub struct PassCounters {
    pub nat: AtomicU64,
    pub at: AtomicU64,
}

impl PassCounters {
    pub fn reset(&self) {
        self.nat.store(0, Ordering::Relaxed);
        self.at.store(0, Ordering::Relaxed);
    }

    pub fn nat_count(&self) -> u64 {
        self.nat.load(Ordering::Relaxed)
    }

    pub fn at_count(&self) -> u64 {
        self.at.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: ModelKind,
    config: ModelConfig,
    vocab: Vec<String>,
    alpha: f64,
}

/// All parameters of one model plus the joint vocabulary it was built for.
pub struct TransformerParams {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// Training-set target/source length ratio, kept for inference defaults.
    pub alpha: f64,
    pub set: ParamSet,
    pub counters: PassCounters,
}

fn xavier(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).unwrap().with_grad()
}

fn zeros_vec(n: usize) -> Tensor {
    Tensor::zeros(vec![n]).with_grad()
}

fn ones_vec(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap().with_grad()
}

fn sinusoidal(max_positions: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_positions * d];
    for pos in 0..max_positions {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_positions, d], data).unwrap()
}

fn insert_attention(set: &mut ParamSet, rng: &mut ChaCha20Rng, prefix: &str, d: usize) {
    for part in ["wq", "wk", "wv", "wo"] {
        set.insert(format!("{prefix}.{part}"), xavier(rng, d, d));
    }
    for part in ["bq", "bk", "bv", "bo"] {
        set.insert(format!("{prefix}.{part}"), zeros_vec(d));
    }
}

fn insert_ffn(set: &mut ParamSet, rng: &mut ChaCha20Rng, prefix: &str, d: usize, ff: usize) {
    set.insert(format!("{prefix}.w1"), xavier(rng, d, ff));
    set.insert(format!("{prefix}.b1"), zeros_vec(ff));
    set.insert(format!("{prefix}.w2"), xavier(rng, ff, d));
    set.insert(format!("{prefix}.b2"), zeros_vec(d));
}

fn insert_ln(set: &mut ParamSet, prefix: &str, d: usize) {
    set.insert(format!("{prefix}.g"), ones_vec(d));
    set.insert(format!("{prefix}.b"), zeros_vec(d));
}

impl TransformerParams {
    fn init_common(
        kind: ModelKind,
        config: ModelConfig,
        vocab: Vocabulary,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7ab5_13f0);
        let mut set = ParamSet::new();
        // token embeddings are shared across source, target, and the tied
        // output projection
        let std = 1.0 / (d as f64).sqrt();
        let emb: Vec<f64> = (0..vocab.len() * d)
            .map(|_| {
                // Box-Muller from two uniforms
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        set.insert(
            "embed.tok",
            Tensor::new(vec![vocab.len(), d], emb).unwrap().with_grad(),
        );
        set.insert("embed.pos", sinusoidal(config.max_positions, d));

        for i in 0..config.layers {
            insert_attention(&mut set, &mut rng, &format!("enc.{i}.self"), d);
            insert_ln(&mut set, &format!("enc.{i}.ln1"), d);
            insert_ffn(&mut set, &mut rng, &format!("enc.{i}.ffn"), d, config.d_ff);
            insert_ln(&mut set, &format!("enc.{i}.ln2"), d);
        }
        for i in 0..config.layers {
            insert_attention(&mut set, &mut rng, &format!("dec.{i}.self"), d);
            insert_ln(&mut set, &format!("dec.{i}.ln1"), d);
            if kind == ModelKind::Student {
                insert_attention(&mut set, &mut rng, &format!("dec.{i}.pos"), d);
                insert_ln(&mut set, &format!("dec.{i}.lnp"), d);
            }
            insert_attention(&mut set, &mut rng, &format!("dec.{i}.cross"), d);
            insert_ln(&mut set, &format!("dec.{i}.ln2"), d);
            insert_ffn(&mut set, &mut rng, &format!("dec.{i}.ffn"), d, config.d_ff);
            insert_ln(&mut set, &format!("dec.{i}.ln3"), d);
        }
        if kind == ModelKind::Student {
            // embedding-space mapping starts at identity, so the mapped
            // input initially equals a plain copy of the source embeddings
            let mut eye = vec![0.0; d * d];
            for i in 0..d {
                eye[i * d + i] = 1.0;
            }
            set.insert("map.w", Tensor::new(vec![d, d], eye).unwrap().with_grad());
            // two-layer MLP discriminator with hidden width d
            set.insert("disc.w1", xavier(&mut rng, d, d));
            set.insert("disc.b1", zeros_vec(d));
            set.insert("disc.w2", xavier(&mut rng, d, 1));
            set.insert("disc.b2", zeros_vec(1));
        }
        Ok(TransformerParams {
            kind,
            config,
            vocab,
            alpha,
            set,
            counters: PassCounters::default(),
        })
    }

    pub fn init_teacher(
        config: ModelConfig,
        vocab: Vocabulary,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        Self::init_common(ModelKind::Teacher, config, vocab, alpha, seed)
    }

    pub fn init_student(
        config: ModelConfig,
        vocab: Vocabulary,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        Self::init_common(ModelKind::Student, config, vocab, alpha, seed)
    }

    /// Names updated by the main optimizer: everything trainable except the
    /// discriminator.
    pub fn main_names(&self) -> Vec<String> {
        self.set
            .iter()
            .filter(|(n, t)| t.requires_grad() && !n.starts_with("disc."))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Discriminator parameters, updated only by the adversarial optimizer.
    pub fn disc_names(&self) -> Vec<String> {
        self.set
            .iter()
            .filter(|(n, t)| t.requires_grad() && n.starts_with("disc."))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerState>) -> Result<(), ModelError> {
        let meta = CheckpointMeta {
            kind: self.kind,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            alpha: self.alpha,
        };
        checkpoint::write_checkpoint(path, &meta, &self.set, optimizer)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<OptimizerState>), ModelError> {
        let (meta, set, opt): (CheckpointMeta, _, _) = checkpoint::read_checkpoint(path)?;
        meta.config.validate()?;
        Ok((
            TransformerParams {
                kind: meta.kind,
                config: meta.config,
                vocab: Vocabulary::from_tokens(meta.vocab),
                alpha: meta.alpha,
                set,
                counters: PassCounters::default(),
            },
            opt,
        ))
    }
}

/// Encoder output for one batch, still attached to its tape.
#[derive(Debug)]
pub struct EncoderState {
    pub hidden: Var,
    pub b: usize,
    pub s: usize,
    pub lens: Vec<usize>,
}

/// Encoder output detached into plain data, for reuse across decode-step
/// tapes during inference.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub data: Vec<f64>,
    pub b: usize,
    pub s: usize,
    pub lens: Vec<usize>,
    pub d: usize,
}

impl EncoderState {
    pub fn detach(&self, tape: &Tape, d: usize) -> EncodedSource {
        EncodedSource {
            data: tape.data(self.hidden).to_vec(),
            b: self.b,
            s: self.s,
            lens: self.lens.clone(),
            d,
        }
    }
}

impl EncodedSource {
    /// Repeat per-sentence encoder states row-wise (`reps[i]` copies of
    /// sentence i), e.g. one copy per live beam hypothesis.
    pub fn replicate(&self, reps: &[usize]) -> EncodedSource {
        assert_eq!(reps.len(), self.b);
        let stride = self.s * self.d;
        let total: usize = reps.iter().sum();
        let mut data = Vec::with_capacity(total * stride);
        let mut lens = Vec::with_capacity(total);
        for (i, &r) in reps.iter().enumerate() {
            for _ in 0..r {
                data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
                lens.push(self.lens[i]);
            }
        }
        EncodedSource {
            data,
            b: total,
            s: self.s,
            lens,
            d: self.d,
        }
    }
}

/// Attention weights captured during a forward pass, for mask checks.
#[derive(Debug, Default)]
pub struct AttnTrace {
    /// (site label, shape, weights)
    pub records: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// Additive key-padding mask of shape (B, tq, tk).
pub fn key_padding_mask(b: usize, tq: usize, tk: usize, key_lens: &[usize]) -> Vec<f64> {
    debug_assert_eq!(key_lens.len(), b);
    let mut m = vec![0.0; b * tq * tk];
    for (i, &len) in key_lens.iter().enumerate() {
        for q in 0..tq {
            for k in len..tk {
                m[(i * tq + q) * tk + k] = NEG_MASK;
            }
        }
    }
    m
}

/// Key-padding mask combined with a causal restriction (query q may attend
/// keys <= q).
pub fn causal_key_mask(b: usize, t: usize, key_lens: &[usize]) -> Vec<f64> {
    let mut m = key_padding_mask(b, t, t, key_lens);
    for i in 0..b {
        for q in 0..t {
            for k in (q + 1)..t {
                m[(i * t + q) * t + k] = NEG_MASK;
            }
        }
    }
    m
}

/// One forward pass in progress: the tape, bound parameters, and optional
/// instrumentation.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a BoundParams,
    pub cfg: &'a ModelConfig,
    pub vocab_size: usize,
    pub counters: Option<&'a PassCounters>,
    pub trace: Option<&'a mut AttnTrace>,
    pub dropout_rng: Option<&'a mut ChaCha20Rng>,
}

impl<'a> Forward<'a> {
    pub fn new(
        tape: &'a mut Tape,
        bound: &'a BoundParams,
        params: &'a TransformerParams,
    ) -> Self {
        Forward {
            tape,
            bound,
            cfg: &params.config,
            vocab_size: params.vocab.len(),
            counters: Some(&params.counters),
            trace: None,
            dropout_rng: None,
        }
    }

    fn maybe_dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let p = self.cfg.dropout;
        if p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        let n = self.tape.data(x).len();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(self.tape.shape(x).to_vec(), mask)?;
        Ok(self.tape.mul(x, m)?)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id: bad,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embeddings scaled by sqrt(d) plus positional embeddings,
    /// shaped (b, t, d).
    pub fn embed(&mut self, ids: &[u32], b: usize, t: usize) -> Result<Var, ModelError> {
        self.check_ids(ids)?;
        if t > self.cfg.max_positions {
            return Err(ModelError::Config(format!(
                "sequence length {t} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let d = self.cfg.d_model;
        let tok = self.bound.var("embed.tok")?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = self.tape.gather_rows(tok, &idx)?;
        let e = self.tape.scale(e, (d as f64).sqrt());
        let p = self.positions(b, t)?;
        let x = self.tape.add(e, p)?;
        let x = self.tape.reshape(x, vec![b, t, d])?;
        self.maybe_dropout(x)
    }

    /// Positional embedding rows 0..t repeated for each batch row, (b*t, d).
    fn positions(&mut self, b: usize, t: usize) -> Result<Var, ModelError> {
        let pos = self.bound.var("embed.pos")?;
        let idx: Vec<usize> = (0..b * t).map(|i| i % t).collect();
        Ok(self.tape.gather_rows(pos, &idx)?)
    }

    /// Multi-head scaled dot-product attention with projections named
    /// `prefix.{wq,wk,wv,wo,bq,bk,bv,bo}`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        prefix: &str,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&[f64]>,
        site: &str,
    ) -> Result<Var, ModelError> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let qsh = self.tape.shape(q_in).to_vec();
        let ksh = self.tape.shape(k_in).to_vec();
        let (b, tq, tk) = (qsh[0], qsh[1], ksh[1]);

        let wq = self.bound.var(&format!("{prefix}.wq"))?;
        let wk = self.bound.var(&format!("{prefix}.wk"))?;
        let wv = self.bound.var(&format!("{prefix}.wv"))?;
        let wo = self.bound.var(&format!("{prefix}.wo"))?;
        let bq = self.bound.var(&format!("{prefix}.bq"))?;
        let bk = self.bound.var(&format!("{prefix}.bk"))?;
        let bv = self.bound.var(&format!("{prefix}.bv"))?;
        let bo = self.bound.var(&format!("{prefix}.bo"))?;

        let q = self.tape.matmul(q_in, wq)?;
        let q = self.tape.add_bias(q, bq)?;
        let k = self.tape.matmul(k_in, wk)?;
        let k = self.tape.add_bias(k, bk)?;
        let v = self.tape.matmul(v_in, wv)?;
        let v = self.tape.add_bias(v, bv)?;

        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_last(q, h * dh, dh)?;
            let kh = self.tape.slice_last(k, h * dh, dh)?;
            let vh = self.tape.slice_last(v, h * dh, dh)?;
            let kt = self.tape.transpose_last(kh)?;
            let scores = self.tape.bmm(qh, kt)?;
            let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let weights = self.tape.softmax_last(scores, mask.map(|m| m.to_vec()))?;
            if let Some(tr) = self.trace.as_deref_mut() {
                tr.records.push((
                    format!("{site}.h{h}"),
                    vec![b, tq, tk],
                    self.tape.data(weights).to_vec(),
                ));
            }
            let ctx = self.tape.bmm(weights, vh)?;
            head_outs.push(ctx);
        }
        let ctx = self.tape.concat_last(&head_outs)?;
        let out = self.tape.matmul(ctx, wo)?;
        let out = self.tape.add_bias(out, bo)?;
        self.maybe_dropout(out)
    }

    fn sublayer_norm(&mut self, prefix: &str, x: Var, sub: Var) -> Result<Var, ModelError> {
        let g = self.bound.var(&format!("{prefix}.g"))?;
        let b = self.bound.var(&format!("{prefix}.b"))?;
        let sum = self.tape.add(x, sub)?;
        Ok(self.tape.layer_norm(sum, g, b, 1e-6)?)
    }

    fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let w1 = self.bound.var(&format!("{prefix}.w1"))?;
        let b1 = self.bound.var(&format!("{prefix}.b1"))?;
        let w2 = self.bound.var(&format!("{prefix}.w2"))?;
        let b2 = self.bound.var(&format!("{prefix}.b2"))?;
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_bias(h, b1)?;
        let h = self.tape.relu(h);
        let out = self.tape.matmul(h, w2)?;
        let out = self.tape.add_bias(out, b2)?;
        self.maybe_dropout(out)
    }

    /// Full encoder stack. PAD positions are masked out of attention keys.
    pub fn encode(&mut self, src_ids: &[u32], b: usize, s: usize, lens: &[usize]) -> Result<EncoderState, ModelError> {
        debug_assert_eq!(src_ids.len(), b * s);
        let mut x = self.embed(src_ids, b, s)?;
        let mask = key_padding_mask(b, s, s, lens);
        for i in 0..self.cfg.layers {
            let attn = self.attention(
                &format!("enc.{i}.self"),
                x,
                x,
                x,
                Some(&mask),
                &format!("enc.{i}.self"),
            )?;
            x = self.sublayer_norm(&format!("enc.{i}.ln1"), x, attn)?;
            let ff = self.ffn(&format!("enc.{i}.ffn"), x)?;
            x = self.sublayer_norm(&format!("enc.{i}.ln2"), x, ff)?;
        }
        Ok(EncoderState {
            hidden: x,
            b,
            s,
            lens: lens.to_vec(),
        })
    }

    /// Tied output projection: logits = h x embed.tok^T, shape (b, t, V).
    pub fn output_logits(&mut self, h: Var) -> Result<Var, ModelError> {
        let tok = self.bound.var("embed.tok")?;
        let tok_t = self.tape.transpose_last(tok)?;
        Ok(self.tape.matmul(h, tok_t)?)
    }

    /// Autoregressive decoder with teacher forcing. `tgt_in` is the
    /// BOS-shifted target; position t's logits depend only on positions
    /// <= t and the encoder states.
    #[allow(clippy::too_many_arguments)]
    pub fn at_forward(
        &mut self,
        tgt_in: &[u32],
        b: usize,
        t: usize,
        tgt_in_lens: &[usize],
        enc_hidden: Var,
        enc_s: usize,
        enc_lens: &[usize],
    ) -> Result<Var, ModelError> {
        if let Some(c) = self.counters {
            c.at.fetch_add(1, Ordering::Relaxed);
        }
        let mut x = self.embed(tgt_in, b, t)?;
        let self_mask = causal_key_mask(b, t, tgt_in_lens);
        let cross_mask = key_padding_mask(b, t, enc_s, enc_lens);
        for i in 0..self.cfg.layers {
            let attn = self.attention(
                &format!("dec.{i}.self"),
                x,
                x,
                x,
                Some(&self_mask),
                &format!("dec.{i}.self"),
            )?;
            x = self.sublayer_norm(&format!("dec.{i}.ln1"), x, attn)?;
            let cross = self.attention(
                &format!("dec.{i}.cross"),
                x,
                enc_hidden,
                enc_hidden,
                Some(&cross_mask),
                &format!("dec.{i}.cross"),
            )?;
            x = self.sublayer_norm(&format!("dec.{i}.ln2"), x, cross)?;
            let ff = self.ffn(&format!("dec.{i}.ffn"), x)?;
            x = self.sublayer_norm(&format!("dec.{i}.ln3"), x, ff)?;
        }
        self.output_logits(x)
    }

    /// Non-autoregressive decoder: one pass produces logits for every
    /// target position. `z` is the enhanced decoder input, (b, t, d).
    #[allow(clippy::too_many_arguments)]
    pub fn nat_forward(
        &mut self,
        z: Var,
        b: usize,
        t: usize,
        tgt_lens: &[usize],
        enc_hidden: Var,
        enc_s: usize,
        enc_lens: &[usize],
    ) -> Result<Var, ModelError> {
        if let Some(c) = self.counters {
            c.nat.fetch_add(1, Ordering::Relaxed);
        }
        if t > self.cfg.max_positions {
            return Err(ModelError::Config(format!(
                "target length {t} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let d = self.cfg.d_model;
        let pos = self.positions(b, t)?;
        let pos = self.tape.reshape(pos, vec![b, t, d])?;
        let mut x = self.tape.add(z, pos)?;
        x = self.maybe_dropout(x)?;
        let self_mask = key_padding_mask(b, t, t, tgt_lens);
        let cross_mask = key_padding_mask(b, t, enc_s, enc_lens);
        for i in 0..self.cfg.layers {
            let attn = self.attention(
                &format!("dec.{i}.self"),
                x,
                x,
                x,
                Some(&self_mask),
                &format!("dec.{i}.self"),
            )?;
            x = self.sublayer_norm(&format!("dec.{i}.ln1"), x, attn)?;
            // positional attention: queries/keys are positional embeddings,
            // values are the current hidden states
            let pattn = self.attention(
                &format!("dec.{i}.pos"),
                pos,
                pos,
                x,
                Some(&self_mask),
                &format!("dec.{i}.pos"),
            )?;
            x = self.sublayer_norm(&format!("dec.{i}.lnp"), x, pattn)?;
            let cross = self.attention(
                &format!("dec.{i}.cross"),
                x,
                enc_hidden,
                enc_hidden,
                Some(&cross_mask),
                &format!("dec.{i}.cross"),
            )?;
            x = self.sublayer_norm(&format!("dec.{i}.ln2"), x, cross)?;
            let ff = self.ffn(&format!("dec.{i}.ffn"), x)?;
            x = self.sublayer_norm(&format!("dec.{i}.ln3"), x, ff)?;
        }
        self.output_logits(x)
    }
}

/// Run the encoder outside any training tape and detach the result.
pub fn encode_detached(
    params: &TransformerParams,
    src_ids: &[u32],
    b: usize,
    s: usize,
    lens: &[usize],
) -> Result<EncodedSource, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &frozen_view(&params.set));
    let mut fwd = Forward::new(&mut tape, &bound, params);
    let state = fwd.encode(src_ids, b, s, lens)?;
    Ok(state.detach(&tape, params.config.d_model))
}

/// A clone of the parameter set with gradients disabled, so inference
/// tapes skip all adjoint work.
pub fn frozen_view(set: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in set.iter() {
        let frozen = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
        out.insert(name, frozen);
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = maxv + row.iter().map(|&x| (x - maxv).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<u32>,
    sum_lp: f64,
    finished: bool,
    truncated: bool,
}

impl Hyp {
    /// Length-normalized score; the EOS emission counts as one term.
    fn score(&self) -> f64 {
        self.sum_lp / (self.tokens.len() + 1) as f64
    }
}

/// Result of decoding one sentence.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    /// Length-normalized log-probability, EOS included.
    pub score: f64,
    /// True when the hypothesis hit max_len and EOS was forced.
    pub truncated: bool,
}

/// Length-normalized beam search over the autoregressive model for a group
/// of source sentences, batching all live hypotheses into each step's
/// forward pass. Decoding emits content tokens only (reserved ids never
/// appear in the output); EOS terminates a hypothesis and is forced at
/// `max_len`. beam_size = 1 is greedy decoding.
pub fn beam_search_group(
    params: &TransformerParams,
    sources: &[&[u32]],
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Decoded>, ModelError> {
    assert!(beam_size >= 1 && max_len >= 1);
    let b = sources.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let s = sources.iter().map(|x| x.len()).max().unwrap();
    let lens: Vec<usize> = sources.iter().map(|x| x.len()).collect();
    let mut src_ids = vec![PAD; b * s];
    for (i, src) in sources.iter().enumerate() {
        src_ids[i * s..i * s + src.len()].copy_from_slice(src);
    }
    let enc = encode_detached(params, &src_ids, b, s, &lens)?;
    let frozen = frozen_view(&params.set);

    let vocab = params.vocab.len();
    let mut live: Vec<Vec<Hyp>> = (0..b)
        .map(|_| {
            vec![Hyp {
                tokens: Vec::new(),
                sum_lp: 0.0,
                finished: false,
                truncated: false,
            }]
        })
        .collect();
    let mut done: Vec<Vec<Hyp>> = vec![Vec::new(); b];

    for step in 0..=max_len {
        let reps: Vec<usize> = live.iter().map(|h| h.len()).collect();
        let rows: usize = reps.iter().sum();
        if rows == 0 {
            break;
        }
        let width = step + 1;
        let mut tgt_in = Vec::with_capacity(rows * width);
        for hyps in &live {
            for h in hyps {
                tgt_in.push(BOS);
                tgt_in.extend_from_slice(&h.tokens);
            }
        }
        let enc_rep = enc.replicate(&reps);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &frozen);
        let mut fwd = Forward::new(&mut tape, &bound, params);
        let enc_var = fwd
            .tape
            .constant(vec![enc_rep.b, enc_rep.s, enc_rep.d], enc_rep.data.clone())?;
        let logits = fwd.at_forward(
            &tgt_in,
            rows,
            width,
            &vec![width; rows],
            enc_var,
            enc_rep.s,
            &enc_rep.lens,
        )?;
        let ldata = tape.data(logits);

        let mut row = 0;
        for i in 0..b {
            let n_live = live[i].len();
            let mut expansions: Vec<Hyp> = Vec::new();
            for h_idx in 0..n_live {
                let h = &live[i][h_idx];
                let base = ((row + h_idx) * width + step) * vocab;
                let lp = log_softmax_row(&ldata[base..base + vocab]);
                if step == max_len {
                    // out of positions: force EOS
                    let mut fin = h.clone();
                    fin.sum_lp += lp[EOS as usize];
                    fin.finished = true;
                    fin.truncated = true;
                    done[i].push(fin);
                    continue;
                }
                // EOS closes the hypothesis (skipped at step 0 so decoding
                // never returns an empty sentence)
                if step > 0 {
                    let mut fin = h.clone();
                    fin.sum_lp += lp[EOS as usize];
                    fin.finished = true;
                    done[i].push(fin);
                }
                for tok in FIRST_CONTENT_ID..vocab as u32 {
                    let mut ext = h.clone();
                    ext.tokens.push(tok);
                    ext.sum_lp += lp[tok as usize];
                    expansions.push(ext);
                }
            }
            row += n_live;
            expansions.sort_by(|a, b| {
                b.sum_lp
                    .total_cmp(&a.sum_lp)
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            expansions.truncate(beam_size);
            live[i] = expansions;
            // keep only the best finished candidates to bound memory
            done[i].sort_by(|a, b| {
                b.score()
                    .total_cmp(&a.score())
                    .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            done[i].truncate(beam_size.max(4));
        }
    }

    Ok(done
        .into_iter()
        .map(|mut hyps| {
            hyps.sort_by(|a, b| {
                b.score()
                    .total_cmp(&a.score())
                    .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            let best = hyps.into_iter().next().expect("at least one hypothesis");
            let score = best.score();
            Decoded {
                tokens: best.tokens,
                score,
                truncated: best.truncated,
            }
        })
        .collect())
}

/// Beam search for a single sentence.
pub fn beam_search(
    params: &TransformerParams,
    source: &[u32],
    beam_size: usize,
    max_len: usize,
) -> Result<Decoded, ModelError> {
    Ok(beam_search_group(params, &[source], beam_size, max_len)?
        .pop()
        .expect("one result"))
}

/// Teacher-forced average per-token log-probability of each candidate
/// (EOS emission included), all candidates scored in one forward pass.
pub fn teacher_scores(
    params: &TransformerParams,
    source: &[u32],
    candidates: &[Vec<u32>],
) -> Result<Vec<f64>, ModelError> {
    assert_eq!(params.kind, ModelKind::Teacher);
    let n = candidates.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let enc = encode_detached(params, source, 1, source.len(), &[source.len()])?;
    let enc_rep = enc.replicate(&[n]);
    let width = candidates.iter().map(|c| c.len()).max().unwrap() + 1;
    let mut tgt_in = vec![PAD; n * width];
    let mut in_lens = Vec::with_capacity(n);
    for (i, c) in candidates.iter().enumerate() {
        tgt_in[i * width] = BOS;
        tgt_in[i * width + 1..i * width + 1 + c.len()].copy_from_slice(c);
        in_lens.push(c.len() + 1);
    }
    let frozen = frozen_view(&params.set);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &frozen);
    let mut fwd = Forward::new(&mut tape, &bound, params);
    let enc_var = fwd
        .tape
        .constant(vec![enc_rep.b, enc_rep.s, enc_rep.d], enc_rep.data.clone())?;
    let logits = fwd.at_forward(
        &tgt_in,
        n,
        width,
        &in_lens,
        enc_var,
        enc_rep.s,
        &enc_rep.lens,
    )?;
    let ldata = tape.data(logits);
    let vocab = params.vocab.len();
    let mut out = Vec::with_capacity(n);
    for (i, c) in candidates.iter().enumerate() {
        let mut sum = 0.0;
        for (t, &tok) in c.iter().enumerate() {
            let base = (i * width + t) * vocab;
            let lp = log_softmax_row(&ldata[base..base + vocab]);
            sum += lp[tok as usize];
        }
        let base = (i * width + c.len()) * vocab;
        let lp = log_softmax_row(&ldata[base..base + vocab]);
        sum += lp[EOS as usize];
        out.push(sum / (c.len() + 1) as f64);
    }
    Ok(out)
}

/// Per-position argmax over content tokens plus the mean log-probability of
/// the chosen tokens, one entry per batch row.
pub fn nat_argmax(
    logits: &[f64],
    b: usize,
    t: usize,
    vocab: usize,
    tgt_lens: &[usize],
) -> Vec<(Vec<u32>, f64)> {
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let len = tgt_lens[i];
        let mut tokens = Vec::with_capacity(len);
        let mut sum_lp = 0.0;
        for pos in 0..len {
            let base = (i * t + pos) * vocab;
            let row = &logits[base..base + vocab];
            let lp = log_softmax_row(row);
            let mut best = FIRST_CONTENT_ID as usize;
            for v in (FIRST_CONTENT_ID as usize)..vocab {
                if lp[v] > lp[best] {
                    best = v;
                }
            }
            tokens.push(best as u32);
            sum_lp += lp[best];
        }
        let mean = if len > 0 { sum_lp / len as f64 } else { 0.0 };
        out.push((tokens, mean));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::mask_from_lens;

    fn tiny_vocab(content: usize) -> Vocabulary {
        let mut toks: Vec<String> = crate::corpus::RESERVED.iter().map(|s| s.to_string()).collect();
        for i in 0..content {
            toks.push(format!("w{i}"));
        }
        Vocabulary::from_tokens(toks)
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            dropout: 0.0,
            max_positions: 16,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.heads = 3;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.layers = 0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn encoder_shapes_and_batch_independence() {
        let vocab = tiny_vocab(5);
        let p = TransformerParams::init_teacher(tiny_config(), vocab, 1.0, 3).unwrap();
        let ids = [4u32, 5, 6, 7, 8, PAD];
        let run = |ids: &[u32], b: usize, s: usize, lens: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &p.set);
            let mut fwd = Forward::new(&mut tape, &bound, &p);
            let st = fwd.encode(ids, b, s, lens).unwrap();
            assert_eq!(tape.shape(st.hidden), &[b, s, 8]);
            tape.data(st.hidden).to_vec()
        };
        let both = run(&ids, 2, 3, &[3, 2]);
        // permuting the batch permutes outputs identically
        let swapped_ids = [7u32, 8, PAD, 4, 5, 6];
        let swapped = run(&swapped_ids, 2, 3, &[2, 3]);
        let stride = 3 * 8;
        for j in 0..stride {
            assert_eq!(both[j], swapped[stride + j]);
            assert_eq!(both[stride + j], swapped[j]);
        }
    }

    #[test]
    fn encoder_out_of_range_id() {
        let vocab = tiny_vocab(2);
        let p = TransformerParams::init_teacher(tiny_config(), vocab, 1.0, 3).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p.set);
        let mut fwd = Forward::new(&mut tape, &bound, &p);
        let err = fwd.encode(&[99], 1, 1, &[1]).unwrap_err();
        assert!(matches!(err, ModelError::TokenOutOfRange { id: 99, .. }));
    }

    #[test]
    fn encoder_padding_invariance() {
        let vocab = tiny_vocab(6);
        let p = TransformerParams::init_teacher(tiny_config(), vocab, 1.0, 11).unwrap();
        let run = |ids: &[u32], s: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &p.set);
            let mut fwd = Forward::new(&mut tape, &bound, &p);
            let st = fwd.encode(ids, 1, s, &[4]).unwrap();
            tape.data(st.hidden)[..4 * 8].to_vec()
        };
        let narrow = run(&[4, 5, 6, 7], 4);
        let wide = run(&[4, 5, 6, 7, PAD, PAD, PAD], 7);
        for (a, b) in narrow.iter().zip(&wide) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn at_causality_exact() {
        let vocab = tiny_vocab(5);
        let p = TransformerParams::init_teacher(tiny_config(), vocab, 1.0, 5).unwrap();
        let src = [4u32, 5, 6];
        let run = |tgt_in: &[u32]| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &p.set);
            let mut fwd = Forward::new(&mut tape, &bound, &p);
            let st = fwd.encode(&src, 1, 3, &[3]).unwrap();
            let enc_hidden = st.hidden;
            let logits = fwd
                .at_forward(tgt_in, 1, 4, &[4], enc_hidden, 3, &[3])
                .unwrap();
            tape.data(logits).to_vec()
        };
        let base = run(&[BOS, 7, 8, 4]);
        let perturbed = run(&[BOS, 7, 8, 6]); // change position 3
        let v = p.vocab.len();
        // logits at positions 0..=2 are bit-identical
        for pos in 0..3 {
            for j in 0..v {
                assert_eq!(base[pos * v + j], perturbed[pos * v + j], "pos {pos}");
            }
        }
        // position 3 must differ somewhere
        assert!((0..v).any(|j| base[3 * v + j] != perturbed[3 * v + j]));
    }

    #[test]
    fn nat_is_fully_connected_and_counts_passes() {
        let vocab = tiny_vocab(5);
        let p = TransformerParams::init_student(tiny_config(), vocab, 1.0, 5).unwrap();
        let src = [4u32, 5, 6];
        let d = p.config.d_model;
        let run = |zdata: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &p.set);
            let mut fwd = Forward::new(&mut tape, &bound, &p);
            let st = fwd.encode(&src, 1, 3, &[3]).unwrap();
            let enc_hidden = st.hidden;
            let z = fwd.tape.constant(vec![1, 3, d], zdata).unwrap();
            let logits = fwd.nat_forward(z, 1, 3, &[3], enc_hidden, 3, &[3]).unwrap();
            tape.data(logits).to_vec()
        };
        p.counters.reset();
        let mut z0 = vec![0.1; 3 * d];
        let base = run(z0.clone());
        assert_eq!(p.counters.nat_count(), 1);
        // perturb position 2, expect logits at position 0 to change
        for v in z0[2 * d..3 * d].iter_mut() {
            *v += 0.5;
        }
        let new = run(z0);
        let v = p.vocab.len();
        assert!((0..v).any(|j| (base[j] - new[j]).abs() > 1e-12));
    }

    #[test]
    fn nat_zero_input_zero_positions_gives_identical_rows() {
        let vocab = tiny_vocab(5);
        let mut p = TransformerParams::init_student(tiny_config(), vocab, 1.0, 5).unwrap();
        // zero out the positional table
        let pos = p.set.get_mut("embed.pos").unwrap();
        let n = pos.numel();
        pos.data_mut().copy_from_slice(&vec![0.0; n]);
        let d = p.config.d_model;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p.set);
        let mut fwd = Forward::new(&mut tape, &bound, &p);
        let st = fwd.encode(&[4, 5], 1, 2, &[2]).unwrap();
        let enc_hidden = st.hidden;
        let z = fwd.tape.constant(vec![1, 3, d], vec![0.0; 3 * d]).unwrap();
        let logits = fwd.nat_forward(z, 1, 3, &[3], enc_hidden, 2, &[2]).unwrap();
        let v = p.vocab.len();
        let data = tape.data(logits);
        for pos in 1..3 {
            for j in 0..v {
                assert!(
                    (data[j] - data[pos * v + j]).abs() < 1e-12,
                    "row {pos} differs"
                );
            }
        }
    }

    #[test]
    fn pad_keys_get_exactly_zero_attention() {
        let vocab = tiny_vocab(6);
        let p = TransformerParams::init_student(tiny_config(), vocab, 1.0, 9).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p.set);
        let mut trace = AttnTrace::default();
        let d = p.config.d_model;
        {
            let mut fwd = Forward::new(&mut tape, &bound, &p);
            fwd.trace = Some(&mut trace);
            let st = fwd.encode(&[4, 5, PAD, PAD], 1, 4, &[2]).unwrap();
            let enc_hidden = st.hidden;
            let z = fwd.tape.constant(vec![1, 3, d], vec![0.3; 3 * d]).unwrap();
            fwd.nat_forward(z, 1, 3, &[2], enc_hidden, 4, &[2]).unwrap();
        }
        assert!(!trace.records.is_empty());
        for (site, shape, weights) in &trace.records {
            let tk = shape[2];
            let key_limit = if site.contains("cross") || site.starts_with("enc") {
                2 // source real length
            } else {
                2 // target real length
            };
            for (idx, w) in weights.iter().enumerate() {
                let k = idx % tk;
                if k >= key_limit {
                    assert_eq!(*w, 0.0, "site {site} leaked attention to PAD key {k}");
                }
            }
            // rows still sum to 1
            for row in weights.chunks(tk) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn teacher_forced_reference_likelihood_is_finite() {
        let vocab = tiny_vocab(5);
        let p = TransformerParams::init_teacher(tiny_config(), vocab, 1.0, 21).unwrap();
        let scores = teacher_scores(&p, &[4, 5], &[vec![6, 7, 8]]).unwrap();
        assert!(scores[0].is_finite());
    }

    #[test]
    fn beam_one_equals_stepwise_argmax() {
        let vocab = tiny_vocab(4);
        let p = TransformerParams::init_teacher(tiny_config(), vocab, 1.0, 31).unwrap();
        let src = [4u32, 6, 5];
        let beam = beam_search(&p, &src, 1, 6).unwrap();

        // reference greedy: argmax over content tokens + EOS at each step
        let enc = encode_detached(&p, &src, 1, 3, &[3]).unwrap();
        let frozen = frozen_view(&p.set);
        let mut tokens: Vec<u32> = Vec::new();
        for step in 0..=6usize {
            let width = step + 1;
            let mut tgt_in = vec![BOS];
            tgt_in.extend_from_slice(&tokens);
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &frozen);
            let mut fwd = Forward::new(&mut tape, &bound, &p);
            let enc_var = fwd
                .tape
                .constant(vec![1, enc.s, enc.d], enc.data.clone())
                .unwrap();
            let logits = fwd
                .at_forward(&tgt_in, 1, width, &[width], enc_var, enc.s, &enc.lens)
                .unwrap();
            let v = p.vocab.len();
            let row = &tape.data(logits)[step * v..(step + 1) * v];
            let lp = log_softmax_row(row);
            let mut best = EOS as usize;
            for tok in (FIRST_CONTENT_ID as usize)..v {
                if lp[tok] > lp[best] {
                    best = tok;
                }
            }
            if step == 0 {
                // greedy also never stops at length 0
                best = ((FIRST_CONTENT_ID as usize)..v)
                    .max_by(|&a, &b| lp[a].total_cmp(&lp[b]))
                    .unwrap();
            }
            if best == EOS as usize || step == 6 {
                break;
            }
            tokens.push(best as u32);
        }
        assert_eq!(beam.tokens, tokens);
    }

    #[test]
    fn beam_matches_exhaustive_search_on_tiny_model() {
        // 3 content tokens, max_len 3: beam 27 covers the whole tree
        let vocab = tiny_vocab(3);
        for seed in [1u64, 2, 3] {
            let p = TransformerParams::init_teacher(tiny_config(), vocab.clone(), 1.0, seed).unwrap();
            let src = [4u32, 5];
            let got = beam_search(&p, &src, 27, 3).unwrap();

            // exhaustive: any token sequence of length 1..=3 over content ids
            let mut best: Option<(Vec<u32>, f64)> = None;
            let mut stack: Vec<Vec<u32>> = vec![vec![]];
            while let Some(seq) = stack.pop() {
                if !seq.is_empty() {
                    let score = teacher_scores(&p, &src, &[seq.clone()]).unwrap()[0];
                    let better = match &best {
                        None => true,
                        Some((bt, bs)) => {
                            score > *bs
                                || ((score - bs).abs() < 1e-15 && seq.len() < bt.len())
                        }
                    };
                    if better {
                        best = Some((seq.clone(), score));
                    }
                }
                if seq.len() < 3 {
                    for tok in FIRST_CONTENT_ID..(FIRST_CONTENT_ID + 3) {
                        let mut ext = seq.clone();
                        ext.push(tok);
                        stack.push(ext);
                    }
                }
            }
            let (best_seq, best_score) = best.unwrap();
            assert!(
                (got.score - best_score).abs() < 1e-9,
                "seed {seed}: beam score {} vs exhaustive {best_score}",
                got.score
            );
            assert_eq!(got.tokens, best_seq, "seed {seed}");
        }
    }

    #[test]
    fn beam_score_dominates_greedy() {
        let vocab = tiny_vocab(4);
        for seed in [11u64, 12, 13, 14] {
            let p = TransformerParams::init_teacher(tiny_config(), vocab.clone(), 1.0, seed).unwrap();
            let src = [4u32, 7, 5, 6];
            let greedy = beam_search(&p, &src, 1, 5).unwrap();
            let beam = beam_search(&p, &src, 4, 5).unwrap();
            assert!(
                beam.score >= greedy.score - 1e-12,
                "seed {seed}: beam {} < greedy {}",
                beam.score,
                greedy.score
            );
        }
    }

    #[test]
    fn grouped_beam_matches_per_sentence() {
        let vocab = tiny_vocab(5);
        let p = TransformerParams::init_teacher(tiny_config(), vocab, 1.0, 77).unwrap();
        let sources: Vec<Vec<u32>> = vec![vec![4, 5], vec![6, 7], vec![8, 4]];
        let refs: Vec<&[u32]> = sources.iter().map(|v| v.as_slice()).collect();
        let grouped = beam_search_group(&p, &refs, 3, 5).unwrap();
        for (i, src) in sources.iter().enumerate() {
            let single = beam_search(&p, src, 3, 5).unwrap();
            assert_eq!(grouped[i].tokens, single.tokens, "sentence {i}");
            assert!((grouped[i].score - single.score).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model() {
        let vocab = tiny_vocab(5);
        let p = TransformerParams::init_student(tiny_config(), vocab, 1.25, 42).unwrap();
        let dir = std::env::temp_dir().join(format!("natmt-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        p.save(&path, None).unwrap();
        let (q, opt) = TransformerParams::load(&path).unwrap();
        assert!(opt.is_none());
        assert_eq!(q.kind, ModelKind::Student);
        assert_eq!(q.alpha, 1.25);
        assert_eq!(q.vocab.len(), p.vocab.len());
        for (name, t) in p.set.iter() {
            let u = q.set.get(name).unwrap();
            assert_eq!(t.data(), u.data(), "param {name}");
            assert_eq!(t.requires_grad(), u.requires_grad());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loss_masking_padding_invariance_through_decoder() {
        // widening the target padding must not change the masked loss
        let vocab = tiny_vocab(6);
        let p = TransformerParams::init_student(tiny_config(), vocab, 1.0, 13).unwrap();
        let d = p.config.d_model;
        let loss_at_width = |t: usize| -> f64 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &p.set);
            let mut fwd = Forward::new(&mut tape, &bound, &p);
            let st = fwd.encode(&[4, 5, 6], 1, 3, &[3]).unwrap();
            let enc_hidden = st.hidden;
            let mut zdata = vec![0.0; t * d];
            for (i, v) in zdata.iter_mut().enumerate().take(2 * d) {
                *v = (i % 7) as f64 * 0.1 - 0.3;
            }
            let z = fwd.tape.constant(vec![1, t, d], zdata).unwrap();
            let logits = fwd.nat_forward(z, 1, t, &[2], enc_hidden, 3, &[3]).unwrap();
            let flat = tape.reshape(logits, vec![t, p.vocab.len()]).unwrap();
            let mut targets = vec![0usize; t];
            targets[0] = 7;
            targets[1] = 8;
            let weights = mask_from_lens(&[2], t);
            let loss = tape.cross_entropy_mean(flat, &targets, &weights).unwrap();
            tape.value(loss)
        };
        let narrow = loss_at_width(2);
        let wide = loss_at_width(5);
        assert!(
            (narrow - wide).abs() < 1e-9,
            "loss changed under padding: {narrow} vs {wide}"
        );
    }
}
