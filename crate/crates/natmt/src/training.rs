//! Teacher training, sequence-level knowledge distillation, and
//! non-autoregressive training with the combined loss
//! `L_neg + mu * L_align + lambda * L_adv`, alternating discriminator
//! ascent with joint descent.

use serde::Serialize;

use crate::bleu::bleu;
use crate::corpus::{length_ratio_alpha, make_batches, Batch, SentencePair, Vocabulary, BOS, EOS, PAD};
use crate::decoder_input::{
    adversarial_value, align_loss, build_decoder_input, InputMethod, InputResources,
    SoftCopyKernel,
};
use crate::error::ModelError;
use crate::inference::{nat_translate_corpus, LengthWindow, TranslateOptions};
use crate::model::{beam_search_group, Forward, ModelConfig, TransformerParams};
use crate::optim::{adam_step, OptimizerState};
use crate::params::BoundParams;
use crate::tape::{Tape, Var};

/// Knobs for one training run. The loss weights default to mu = 0.1 and
/// lambda = 1.0, which keep the three losses on the same scale.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mu: f64,
    pub lambda: f64,
    pub epochs: usize,
    /// Token budget per batch: batch_size * max(src_width, tgt_width + 1).
    pub max_tokens: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub warmup: u64,
    /// Discriminator ascent steps per joint descent step.
    pub d_steps: usize,
    pub method: InputMethod,
    pub tau: f64,
    pub raw_kernel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mu: 0.1,
            lambda: 1.0,
            epochs: 4,
            max_tokens: 2048,
            seed: 7,
            base_lr: 2e-3,
            warmup: 60,
            d_steps: 1,
            method: InputMethod::Copy,
            tau: 0.3,
            raw_kernel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.mu < 0.0 || self.lambda < 0.0 {
            return Err(ModelError::Config("mu and lambda must be nonnegative".into()));
        }
        if self.epochs == 0 || self.max_tokens == 0 || self.base_lr <= 0.0 || self.tau <= 0.0 {
            return Err(ModelError::Config(
                "epochs, max_tokens, base_lr and tau must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn kernel(&self) -> SoftCopyKernel {
        SoftCopyKernel {
            tau: self.tau,
            raw: self.raw_kernel,
        }
    }
}

/// Per-step loss bookkeeping. `total` always equals
/// `l_neg + mu * l_align + lambda * l_adv`.
#[derive(Debug, Clone, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_neg: f64,
    pub l_align: f64,
    pub l_adv: f64,
    pub v_word: f64,
    pub total: f64,
}

/// Per-epoch progress for either model.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Teacher: validation cross-entropy. Student: validation BLEU.
    pub valid_metric: f64,
}

fn check_finite(value: f64, component: &str, step: u64) -> Result<(), ModelError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Diverged {
            component: component.to_string(),
            step,
        })
    }
}

/// Teacher-forced inputs for one batch: BOS-shifted rows of width T+1,
/// targets ending in EOS, and 0/1 loss weights.
fn teacher_io(batch: &Batch) -> (Vec<u32>, Vec<usize>, Vec<usize>, Vec<f64>, usize) {
    let b = batch.size();
    let width = batch.tgt_width + 1;
    let mut tgt_in = vec![PAD; b * width];
    let mut targets = vec![0usize; b * width];
    let mut weights = vec![0.0; b * width];
    let mut in_lens = Vec::with_capacity(b);
    for i in 0..b {
        let row = batch.tgt_row(i);
        tgt_in[i * width] = BOS;
        tgt_in[i * width + 1..i * width + 1 + row.len()].copy_from_slice(row);
        for (t, &tok) in row.iter().enumerate() {
            targets[i * width + t] = tok as usize;
            weights[i * width + t] = 1.0;
        }
        targets[i * width + row.len()] = EOS as usize;
        weights[i * width + row.len()] = 1.0;
        in_lens.push(row.len() + 1);
    }
    (tgt_in, in_lens, targets, weights, width)
}

fn teacher_batch_loss(
    params: &TransformerParams,
    batch: &Batch,
) -> Result<(Tape, BoundParams, Var), ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params.set);
    let (tgt_in, in_lens, targets, weights, width) = teacher_io(batch);
    let b = batch.size();
    let mut fwd = Forward::new(&mut tape, &bound, params);
    let enc = fwd.encode(&batch.src, b, batch.src_width, &batch.src_lens)?;
    let logits = fwd.at_forward(
        &tgt_in,
        b,
        width,
        &in_lens,
        enc.hidden,
        batch.src_width,
        &batch.src_lens,
    )?;
    let flat = tape.reshape(logits, vec![b * width, params.vocab.len()])?;
    let loss = tape.cross_entropy_mean(flat, &targets, &weights)?;
    Ok((tape, bound, loss))
}

/// Mean teacher-forced cross-entropy over a corpus, without updates.
pub fn teacher_loss(
    params: &TransformerParams,
    pairs: &[SentencePair],
    max_tokens: usize,
) -> Result<f64, ModelError> {
    let batches = make_batches(pairs, max_tokens, 0)
        .map_err(|e| ModelError::Config(format!("validation batching: {e}")))?;
    let mut total = 0.0;
    let mut count = 0.0;
    for batch in &batches {
        let frozen = crate::model::frozen_view(&params.set);
        let view = TransformerParams {
            kind: params.kind,
            config: params.config.clone(),
            vocab: params.vocab.clone(),
            alpha: params.alpha,
            set: frozen,
            counters: Default::default(),
        };
        let (tape, _, loss) = teacher_batch_loss(&view, batch)?;
        let tokens: f64 = batch.tgt_lens.iter().map(|l| (l + 1) as f64).sum();
        total += tape.value(loss) * tokens;
        count += tokens;
    }
    Ok(total / count)
}

/// Teacher-forced next-token accuracy (EOS position included).
pub fn teacher_token_accuracy(
    params: &TransformerParams,
    pairs: &[SentencePair],
    max_tokens: usize,
) -> Result<f64, ModelError> {
    let batches = make_batches(pairs, max_tokens, 0)
        .map_err(|e| ModelError::Config(format!("validation batching: {e}")))?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for batch in &batches {
        let frozen = crate::model::frozen_view(&params.set);
        let view = TransformerParams {
            kind: params.kind,
            config: params.config.clone(),
            vocab: params.vocab.clone(),
            alpha: params.alpha,
            set: frozen,
            counters: Default::default(),
        };
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &view.set);
        let (tgt_in, in_lens, targets, weights, width) = teacher_io(batch);
        let b = batch.size();
        let mut fwd = Forward::new(&mut tape, &bound, &view);
        let enc = fwd.encode(&batch.src, b, batch.src_width, &batch.src_lens)?;
        let logits = fwd.at_forward(
            &tgt_in,
            b,
            width,
            &in_lens,
            enc.hidden,
            batch.src_width,
            &batch.src_lens,
        )?;
        let data = tape.data(logits);
        let v = params.vocab.len();
        for (row, (&target, &w)) in targets.iter().zip(&weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let slice = &data[row * v..(row + 1) * v];
            let argmax = slice
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            total += 1;
            hit += usize::from(argmax == target);
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Train the autoregressive teacher with teacher-forced cross-entropy,
/// keeping the parameters from the epoch with the best validation loss.
pub fn train_teacher(
    train: &[SentencePair],
    valid: &[SentencePair],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TransformerParams, Vec<EpochStats>), ModelError> {
    cfg.validate()?;
    let alpha = length_ratio_alpha(train).map_err(|e| ModelError::Config(e.to_string()))?;
    let mut params = TransformerParams::init_teacher(model_cfg, vocab, alpha, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.base_lr, cfg.warmup);
    let names = params.main_names();
    let mut best: Option<(f64, crate::params::ParamSet)> = None;
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(train, cfg.max_tokens, cfg.seed.wrapping_add(epoch as u64))
            .map_err(|e| ModelError::Config(format!("batching: {e}")))?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let (mut tape, bound, loss) = teacher_batch_loss(&params, batch)?;
            let value = tape.value(loss);
            step += 1;
            check_finite(value, "teacher cross-entropy", step)?;
            epoch_loss += value;
            tape.backward(loss)?;
            bound.collect_grads(&tape, &mut params.set)?;
            adam_step(&mut params.set, &mut opt, &names)?;
            params.set.zero_grads();
        }
        epoch_loss /= batches.len() as f64;
        let valid_loss = teacher_loss(&params, valid, cfg.max_tokens)?;
        if best.as_ref().map_or(true, |(b, _)| valid_loss < *b) {
            best = Some((valid_loss, params.set.clone()));
        }
        stats.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            valid_metric: valid_loss,
        });
    }
    if let Some((_, set)) = best {
        params.set = set;
    }
    Ok((params, stats))
}

/// Replace every target with the frozen teacher's beam-search translation.
/// Sentences are decoded in length-sorted chunks so each step batches all
/// live hypotheses. Returns the distilled corpus (original order) and the
/// number of truncated decodes.
pub fn distill(
    teacher: &TransformerParams,
    pairs: &[SentencePair],
    beam: usize,
    chunk: usize,
) -> Result<(Vec<SentencePair>, usize), ModelError> {
    let chunk = chunk.max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].src.len(), i));
    let mut out: Vec<Option<SentencePair>> = vec![None; pairs.len()];
    let mut truncated = 0;
    for group in order.chunks(chunk) {
        let sources: Vec<&[u32]> = group.iter().map(|&i| pairs[i].src.as_slice()).collect();
        let max_src = sources.iter().map(|s| s.len()).max().unwrap();
        let max_len = (2 * max_src + 5).min(teacher.config.max_positions - 1);
        let decoded = beam_search_group(teacher, &sources, beam, max_len)?;
        for (&i, d) in group.iter().zip(decoded) {
            truncated += usize::from(d.truncated);
            out[i] = Some(SentencePair::new(pairs[i].src.clone(), d.tokens));
        }
    }
    Ok((out.into_iter().map(|p| p.unwrap()).collect(), truncated))
}

/// Indices of non-PAD positions in a padded (b, width) id matrix.
fn real_positions(ids: &[u32], width: usize, lens: &[usize]) -> Vec<usize> {
    let mut idx = Vec::new();
    for (i, &len) in lens.iter().enumerate() {
        for t in 0..len {
            debug_assert_ne!(ids[i * width + t], PAD);
            idx.push(ids[i * width + t] as usize);
        }
    }
    idx
}

/// One discriminator ascent step on a batch: maximizes the word-level value
/// function over the discriminator parameters only. Every other parameter,
/// including the mapping matrix, stays bit-identical.
pub fn discriminator_update(
    params: &mut TransformerParams,
    batch: &Batch,
    disc_opt: &mut OptimizerState,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params.set);
    let embed = bound.var("embed.tok")?;
    let w = bound.var("map.w")?;
    let src_idx = real_positions(&batch.src, batch.src_width, &batch.src_lens);
    let tgt_idx = real_positions(&batch.tgt, batch.tgt_width, &batch.tgt_lens);
    let e_src = tape.gather_rows(embed, &src_idx)?;
    let mapped = tape.matmul(e_src, w)?;
    let e_tgt = tape.gather_rows(embed, &tgt_idx)?;
    let v = adversarial_value(&mut tape, &bound, mapped, e_tgt)?;
    let value = tape.value(v);
    let loss = tape.neg(v); // ascend V by descending -V
    tape.backward(loss)?;
    bound.collect_grads(&tape, &mut params.set)?;
    let disc_names = params.disc_names();
    adam_step(&mut params.set, disc_opt, &disc_names)?;
    params.set.zero_grads();
    Ok(value)
}

/// One full alternation: `d_steps` discriminator ascent updates (when the
/// adversarial loss is active), then one joint descent step over encoder,
/// decoder and mapping parameters with the discriminator frozen.
#[allow(clippy::too_many_arguments)]
pub fn gan_alternation_step(
    params: &mut TransformerParams,
    batch: &Batch,
    resources: &InputResources,
    cfg: &TrainConfig,
    main_opt: &mut OptimizerState,
    disc_opt: &mut OptimizerState,
    step: u64,
) -> Result<LossRecord, ModelError> {
    let adversarial = cfg.method == InputMethod::Embed && cfg.lambda > 0.0;
    let aligned = cfg.method == InputMethod::Embed && cfg.mu > 0.0;
    let mut v_word = 0.0;
    if adversarial {
        for _ in 0..cfg.d_steps.max(1) {
            v_word = discriminator_update(params, batch, disc_opt)?;
        }
        check_finite(v_word, "discriminator value", step)?;
    }

    let b = batch.size();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params.set);
    let mut fwd = Forward::new(&mut tape, &bound, params);
    let enc = fwd.encode(&batch.src, b, batch.src_width, &batch.src_lens)?;
    let enc_hidden = enc.hidden;
    let src_rows: Vec<&[u32]> = (0..b).map(|i| batch.src_row(i)).collect();
    let input = build_decoder_input(
        &mut tape,
        &bound,
        cfg.method,
        resources,
        &params.vocab,
        params.config.d_model,
        &src_rows,
        &batch.tgt_lens,
        batch.tgt_width,
        &cfg.kernel(),
    )?;
    let mut fwd = Forward::new(&mut tape, &bound, params);
    let logits = fwd.nat_forward(
        input.z,
        b,
        batch.tgt_width,
        &batch.tgt_lens,
        enc_hidden,
        batch.src_width,
        &batch.src_lens,
    )?;
    let flat = tape.reshape(logits, vec![b * batch.tgt_width, params.vocab.len()])?;
    let targets: Vec<usize> = batch.tgt.iter().map(|&t| t as usize).collect();
    let weights = batch.tgt_mask();
    let l_neg = tape.cross_entropy_mean(flat, &targets, &weights)?;

    let mut total = l_neg;
    let mut l_align_val = 0.0;
    let mut l_adv_val = 0.0;
    if aligned || adversarial {
        let embed = bound.var("embed.tok")?;
        let w = bound.var("map.w")?;
        if aligned {
            let src_all: Vec<usize> = batch.src.iter().map(|&t| t as usize).collect();
            let tgt_all: Vec<usize> = batch.tgt.iter().map(|&t| t as usize).collect();
            let es = tape.gather_rows(embed, &src_all)?;
            let es = tape.reshape(es, vec![b, batch.src_width, params.config.d_model])?;
            let ex = tape.masked_mean_rows(es, &batch.src_mask())?;
            let et = tape.gather_rows(embed, &tgt_all)?;
            let et = tape.reshape(et, vec![b, batch.tgt_width, params.config.d_model])?;
            let ey = tape.masked_mean_rows(et, &batch.tgt_mask())?;
            let l_align = align_loss(&mut tape, ex, ey, w)?;
            l_align_val = tape.value(l_align);
            check_finite(l_align_val, "alignment loss", step)?;
            let weighted = tape.scale(l_align, cfg.mu);
            total = tape.add(total, weighted)?;
        }
        if adversarial {
            let src_idx = real_positions(&batch.src, batch.src_width, &batch.src_lens);
            let tgt_idx = real_positions(&batch.tgt, batch.tgt_width, &batch.tgt_lens);
            let e_src = tape.gather_rows(embed, &src_idx)?;
            let mapped = tape.matmul(e_src, w)?;
            let e_tgt = tape.gather_rows(embed, &tgt_idx)?;
            let v = adversarial_value(&mut tape, &bound, mapped, e_tgt)?;
            l_adv_val = tape.value(v);
            check_finite(l_adv_val, "adversarial loss", step)?;
            let weighted = tape.scale(v, cfg.lambda);
            total = tape.add(total, weighted)?;
        }
    }
    let l_neg_val = tape.value(l_neg);
    check_finite(l_neg_val, "NAT cross-entropy", step)?;
    let total_val = tape.value(total);
    tape.backward(total)?;
    bound.collect_grads(&tape, &mut params.set)?;
    let main_names = params.main_names();
    adam_step(&mut params.set, main_opt, &main_names)?;
    params.set.zero_grads();

    Ok(LossRecord {
        step,
        l_neg: l_neg_val,
        l_align: l_align_val,
        l_adv: l_adv_val,
        v_word,
        total: total_val,
    })
}

/// Greedy (B = 0) validation BLEU of a student against reference pairs.
pub fn student_valid_bleu(
    params: &TransformerParams,
    valid: &[SentencePair],
    resources: &InputResources,
    method: InputMethod,
    kernel: &SoftCopyKernel,
) -> Result<f64, ModelError> {
    let sources: Vec<Vec<u32>> = valid.iter().map(|p| p.src.clone()).collect();
    let opts = TranslateOptions {
        method,
        window: LengthWindow::new(params.alpha, 0)?,
        kernel: *kernel,
        pad_to: None,
    };
    let hyps = nat_translate_corpus(params, None, resources, &sources, &opts)?;
    let hyp_tok: Vec<Vec<String>> = hyps.iter().map(|h| params.vocab.decode_seq(h)).collect();
    let ref_tok: Vec<Vec<String>> = valid
        .iter()
        .map(|p| params.vocab.decode_seq(&p.tgt))
        .collect();
    bleu(&hyp_tok, &ref_tok, true).map_err(|e| ModelError::Config(format!("validation BLEU: {e}")))
}

/// Train the non-autoregressive student on a distilled corpus. Target
/// lengths during training come from the distilled references; model
/// selection is greedy validation BLEU per epoch.
pub fn train_nat(
    distilled: &[SentencePair],
    valid: &[SentencePair],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    resources: &InputResources,
) -> Result<(TransformerParams, Vec<LossRecord>, Vec<EpochStats>), ModelError> {
    cfg.validate()?;
    let alpha = length_ratio_alpha(distilled).map_err(|e| ModelError::Config(e.to_string()))?;
    let mut params = TransformerParams::init_student(model_cfg, vocab, alpha, cfg.seed)?;
    let mut main_opt = OptimizerState::new(cfg.base_lr, cfg.warmup);
    let mut disc_opt = OptimizerState::new(cfg.base_lr, cfg.warmup);
    let mut records = Vec::new();
    let mut stats = Vec::new();
    let mut best: Option<(f64, crate::params::ParamSet)> = None;
    let mut step = 0u64;
    let kernel = cfg.kernel();
    for epoch in 0..cfg.epochs {
        let batches = make_batches(distilled, cfg.max_tokens, cfg.seed.wrapping_add(epoch as u64))
            .map_err(|e| ModelError::Config(format!("batching: {e}")))?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            step += 1;
            let rec = gan_alternation_step(
                &mut params,
                batch,
                resources,
                cfg,
                &mut main_opt,
                &mut disc_opt,
                step,
            )?;
            epoch_loss += rec.l_neg;
            records.push(rec);
        }
        epoch_loss /= batches.len() as f64;
        let valid_bleu = student_valid_bleu(&params, valid, resources, cfg.method, &kernel)?;
        if best.as_ref().map_or(true, |(b, _)| valid_bleu > *b) {
            best = Some((valid_bleu, params.set.clone()));
        }
        stats.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            valid_metric: valid_bleu,
        });
    }
    if let Some((_, set)) = best {
        params.set = set;
    }
    Ok((params, records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::encode_pairs;
    use crate::optim::adam_step as raw_adam_step;
    use crate::params::ParamSet;
    use crate::tensor::Tensor;
    use crate::toy::{ToyGenerator, ToySpec};

    fn tiny_setup(n: usize) -> (Vec<SentencePair>, Vec<SentencePair>, Vocabulary) {
        let gen = ToyGenerator::new(ToySpec {
            source_types: 8,
            min_len: 2,
            max_len: 5,
            swap: false,
            seed: 3,
        });
        let train_raw = gen.generate(n, 0);
        let valid_raw = gen.generate(16, 1);
        let vocab = Vocabulary::build(&train_raw, 1).unwrap();
        (
            encode_pairs(&train_raw, &vocab),
            encode_pairs(&valid_raw, &vocab),
            vocab,
        )
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            dropout: 0.0,
            max_positions: 16,
        }
    }

    #[test]
    fn repeated_batch_loss_decreases() {
        let (train, _, vocab) = tiny_setup(8);
        let alpha = 1.0;
        let mut params =
            TransformerParams::init_teacher(tiny_model(), vocab, alpha, 5).unwrap();
        let mut opt = OptimizerState::new(5e-4, 1);
        let names = params.main_names();
        let batch = &make_batches(&train, 256, 0).unwrap()[0];
        let mut losses = Vec::new();
        for _ in 0..10 {
            let (mut tape, bound, loss) = teacher_batch_loss(&params, batch).unwrap();
            losses.push(tape.value(loss));
            tape.backward(loss).unwrap();
            bound.collect_grads(&tape, &mut params.set).unwrap();
            raw_adam_step(&mut params.set, &mut opt, &names).unwrap();
            params.set.zero_grads();
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
        }
    }

    #[test]
    fn teacher_training_is_seed_deterministic() {
        let (train, valid, vocab) = tiny_setup(24);
        let cfg = TrainConfig {
            epochs: 1,
            max_tokens: 128,
            seed: 11,
            base_lr: 1e-3,
            warmup: 10,
            ..TrainConfig::default()
        };
        let (p1, _) = train_teacher(&train, &valid, vocab.clone(), tiny_model(), &cfg).unwrap();
        let (p2, _) = train_teacher(&train, &valid, vocab, tiny_model(), &cfg).unwrap();
        for (name, t) in p1.set.iter() {
            let u = p2.set.get(name).unwrap();
            assert_eq!(t.data(), u.data(), "param {name} differs between runs");
        }
    }

    #[test]
    fn distill_preserves_cardinality_and_is_idempotent() {
        let (train, _, vocab) = tiny_setup(12);
        let params = TransformerParams::init_teacher(tiny_model(), vocab, 1.0, 9).unwrap();
        let (d1, _) = distill(&params, &train, 2, 5).unwrap();
        assert_eq!(d1.len(), train.len());
        for (orig, dist) in train.iter().zip(&d1) {
            assert_eq!(orig.src, dist.src);
            assert!(!dist.tgt.is_empty());
        }
        let (d2, _) = distill(&params, &train, 2, 5).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn discriminator_update_leaves_mapping_untouched() {
        let (train, _, vocab) = tiny_setup(8);
        let mut params = TransformerParams::init_student(tiny_model(), vocab, 1.0, 13).unwrap();
        let mut disc_opt = OptimizerState::new(1e-3, 1);
        let batch = &make_batches(&train, 128, 0).unwrap()[0];
        let w_before = params.set.get("map.w").unwrap().data().to_vec();
        let emb_before = params.set.get("embed.tok").unwrap().data().to_vec();
        let d_before = params.set.get("disc.w1").unwrap().data().to_vec();
        discriminator_update(&mut params, batch, &mut disc_opt).unwrap();
        assert_eq!(params.set.get("map.w").unwrap().data(), &w_before[..]);
        assert_eq!(params.set.get("embed.tok").unwrap().data(), &emb_before[..]);
        assert_ne!(params.set.get("disc.w1").unwrap().data(), &d_before[..]);
    }

    #[test]
    fn joint_step_leaves_discriminator_untouched() {
        let (train, _, vocab) = tiny_setup(8);
        let mut params = TransformerParams::init_student(tiny_model(), vocab, 1.0, 13).unwrap();
        let mut main_opt = OptimizerState::new(1e-3, 1);
        let mut disc_opt = OptimizerState::new(1e-3, 1);
        let cfg = TrainConfig {
            method: InputMethod::Embed,
            d_steps: 1,
            ..TrainConfig::default()
        };
        let batch = &make_batches(&train, 128, 0).unwrap()[0];
        // run one full alternation, then check the joint phase respected
        // the frozen discriminator by re-running with lambda busy
        let d_after_disc = {
            let mut p2 = TransformerParams::init_student(tiny_model(), p_vocab(&params), 1.0, 13).unwrap();
            let mut dopt = OptimizerState::new(1e-3, 1);
            discriminator_update(&mut p2, batch, &mut dopt).unwrap();
            p2.set.get("disc.w1").unwrap().data().to_vec()
        };
        gan_alternation_step(
            &mut params,
            batch,
            &InputResources::default(),
            &cfg,
            &mut main_opt,
            &mut disc_opt,
            1,
        )
        .unwrap();
        // the single d_step produced exactly the same discriminator as a
        // standalone update; the joint step changed everything else but
        // not the discriminator
        assert_eq!(params.set.get("disc.w1").unwrap().data(), &d_after_disc[..]);
        let rec = gan_alternation_step(
            &mut params,
            batch,
            &InputResources::default(),
            &cfg,
            &mut main_opt,
            &mut disc_opt,
            2,
        )
        .unwrap();
        assert!((rec.total - (rec.l_neg + cfg.mu * rec.l_align + cfg.lambda * rec.l_adv)).abs() < 1e-9);
    }

    fn p_vocab(p: &TransformerParams) -> Vocabulary {
        Vocabulary::from_tokens(p.vocab.tokens().to_vec())
    }

    #[test]
    fn lambda_zero_skips_discriminator() {
        let (train, _, vocab) = tiny_setup(8);
        let mut params = TransformerParams::init_student(tiny_model(), vocab, 1.0, 13).unwrap();
        let mut main_opt = OptimizerState::new(1e-3, 1);
        let mut disc_opt = OptimizerState::new(1e-3, 1);
        let cfg = TrainConfig {
            method: InputMethod::Embed,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let batch = &make_batches(&train, 128, 0).unwrap()[0];
        let d_before = params.set.get("disc.w1").unwrap().data().to_vec();
        let rec = gan_alternation_step(
            &mut params,
            batch,
            &InputResources::default(),
            &cfg,
            &mut main_opt,
            &mut disc_opt,
            1,
        )
        .unwrap();
        assert_eq!(params.set.get("disc.w1").unwrap().data(), &d_before[..]);
        assert_eq!(rec.l_adv, 0.0);
        assert_eq!(rec.v_word, 0.0);
        assert!((rec.total - (rec.l_neg + cfg.mu * rec.l_align)).abs() < 1e-12);
    }

    #[test]
    fn copy_method_reduces_to_plain_cross_entropy() {
        let (train, _, vocab) = tiny_setup(8);
        let mut params = TransformerParams::init_student(tiny_model(), vocab, 1.0, 13).unwrap();
        let mut main_opt = OptimizerState::new(1e-3, 1);
        let mut disc_opt = OptimizerState::new(1e-3, 1);
        let cfg = TrainConfig {
            method: InputMethod::Copy,
            mu: 0.0,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let batch = &make_batches(&train, 128, 0).unwrap()[0];
        let rec = gan_alternation_step(
            &mut params,
            batch,
            &InputResources::default(),
            &cfg,
            &mut main_opt,
            &mut disc_opt,
            1,
        )
        .unwrap();
        assert_eq!(rec.l_align, 0.0);
        assert_eq!(rec.l_adv, 0.0);
        assert_eq!(rec.total, rec.l_neg);
    }

    /// Two separable 2-D clusters: the discriminator should first tell them
    /// apart almost perfectly, then the generator should drag the mapped
    /// cluster onto the target one until the discriminator is near chance.
    #[test]
    fn gan_dynamics_on_2d_clusters() {
        let d = 2usize;
        let mut set = ParamSet::new();
        let mut eye = vec![0.0; 4];
        eye[0] = 1.0;
        eye[3] = 1.0;
        set.insert("map.w", Tensor::new(vec![2, 2], eye).unwrap().with_grad());
        set.insert(
            "disc.w1",
            Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.1, 0.4]).unwrap().with_grad(),
        );
        set.insert("disc.b1", Tensor::zeros(vec![2]).with_grad());
        set.insert(
            "disc.w2",
            Tensor::new(vec![2, 1], vec![0.5, -0.3]).unwrap().with_grad(),
        );
        set.insert("disc.b2", Tensor::zeros(vec![1]).with_grad());

        let n = 32;
        let src_pts: Vec<f64> = (0..n)
            .flat_map(|i| {
                let t = i as f64 / n as f64;
                [-2.0 + 0.3 * t, -2.0 - 0.2 * t]
            })
            .collect();
        let tgt_pts: Vec<f64> = (0..n)
            .flat_map(|i| {
                let t = i as f64 / n as f64;
                [2.0 - 0.25 * t, 2.0 + 0.35 * t]
            })
            .collect();

        let disc_names = vec![
            "disc.w1".to_string(),
            "disc.b1".to_string(),
            "disc.w2".to_string(),
            "disc.b2".to_string(),
        ];
        let gen_names = vec!["map.w".to_string()];
        let mut disc_opt = OptimizerState::new(5e-2, 1);
        let mut gen_opt = OptimizerState::new(5e-2, 1);

        let accuracy = |set: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, set);
            let s = tape.leaf(vec![n, d], src_pts.clone(), false).unwrap();
            let w = bound.var("map.w").unwrap();
            let mapped = tape.matmul(s, w).unwrap();
            let t = tape.leaf(vec![n, d], tgt_pts.clone(), false).unwrap();
            let lm = crate::decoder_input::discriminator_logits(&mut tape, &bound, mapped).unwrap();
            let lt = crate::decoder_input::discriminator_logits(&mut tape, &bound, t).unwrap();
            let mut correct = 0;
            for &v in tape.data(lt) {
                correct += usize::from(v > 0.0);
            }
            for &v in tape.data(lm) {
                correct += usize::from(v <= 0.0);
            }
            correct as f64 / (2 * n) as f64
        };

        let run_phase = |set: &mut ParamSet,
                             steps: usize,
                             update_disc: bool,
                             disc_opt: &mut OptimizerState,
                             gen_opt: &mut OptimizerState| {
            for _ in 0..steps {
                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, set);
                let s = tape.leaf(vec![n, d], src_pts.clone(), false).unwrap();
                let w = bound.var("map.w").unwrap();
                let mapped = tape.matmul(s, w).unwrap();
                let t = tape.leaf(vec![n, d], tgt_pts.clone(), false).unwrap();
                let v = adversarial_value(&mut tape, &bound, mapped, t).unwrap();
                let loss = if update_disc { tape.neg(v) } else { v };
                tape.backward(loss).unwrap();
                bound.collect_grads(&tape, set).unwrap();
                if update_disc {
                    raw_adam_step(set, disc_opt, &disc_names).unwrap();
                } else {
                    raw_adam_step(set, gen_opt, &gen_names).unwrap();
                }
                for (_, t) in set.iter_mut() {
                    t.zero_grad();
                }
            }
        };

        // discriminator-only warmup: separable clusters are easy
        run_phase(&mut set, 150, true, &mut disc_opt, &mut gen_opt);
        let acc0 = accuracy(&set);
        assert!(acc0 >= 0.95, "warmup discriminator accuracy {acc0}");

        // alternate: the generator drives the discriminator toward chance
        for _ in 0..400 {
            run_phase(&mut set, 1, true, &mut disc_opt, &mut gen_opt);
            run_phase(&mut set, 1, false, &mut disc_opt, &mut gen_opt);
        }
        let acc1 = accuracy(&set);
        assert!(
            (acc1 - 0.5).abs() <= 0.15,
            "discriminator accuracy after adversarial training: {acc1}"
        );
    }
}
