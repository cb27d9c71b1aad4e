// Temporary calibration harness for picking training budgets.
// Usage: calibrate <phase> [args...]
//   teacher <epochs> <lr> <warmup>
//   full <teacher_epochs> <nat_epochs> <lr> <warmup> [seed]

use std::time::Instant;

use natmt::bleu::bleu;
use natmt::corpus::{encode_pairs, SentencePair, Vocabulary};
use natmt::decoder_input::{InputMethod, InputResources};
use natmt::inference::{nat_translate_corpus, LengthWindow, TranslateOptions};
use natmt::model::{beam_search_group, ModelConfig};
use natmt::phrase::{extract_phrases, extract_word_table, train_ibm1};
use natmt::toy::{ToyGenerator, ToySpec};
use natmt::training::{distill, teacher_token_accuracy, train_nat, train_teacher, TrainConfig};

fn to_strings(v: &Vocabulary, seqs: &[Vec<u32>]) -> Vec<Vec<String>> {
    seqs.iter().map(|s| v.decode_seq(s)).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let phase = args.get(1).map(|s| s.as_str()).unwrap_or("teacher");

    let gen = ToyGenerator::new(ToySpec::default());
    let train_raw = gen.generate(5000, 0);
    let valid_raw = gen.generate(500, 1);
    let test_raw = gen.generate(500, 2);
    let vocab = Vocabulary::build(&train_raw, 1).unwrap();
    let train = encode_pairs(&train_raw, &vocab);
    let valid = encode_pairs(&valid_raw, &vocab);
    let test = encode_pairs(&test_raw, &vocab);
    let refs: Vec<Vec<u32>> = test.iter().map(|p| p.tgt.clone()).collect();
    let model_cfg = ModelConfig::default();

    match phase {
        "teacher" => {
            let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
            let warmup: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);
            let max_tokens: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2048);
            let cfg = TrainConfig {
                epochs,
                base_lr: lr,
                warmup,
                max_tokens,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let (teacher, stats) =
                train_teacher(&train, &valid, vocab.clone(), model_cfg, &cfg).unwrap();
            let acc = teacher_token_accuracy(&teacher, &valid, 2048).unwrap();
            eprintln!(
                "teacher epochs={epochs} lr={lr} warmup={warmup}: {:?}, acc={acc:.4}",
                t0.elapsed()
            );
            for s in &stats {
                eprintln!("  epoch {}: train {:.4} valid {:.4}", s.epoch, s.train_loss, s.valid_metric);
            }
            if acc > 0.9 {
                let t0 = Instant::now();
                let test_srcs: Vec<&[u32]> = test.iter().map(|p| p.src.as_slice()).collect();
                let mut hyps = Vec::new();
                for chunk in test_srcs.chunks(32) {
                    for d in beam_search_group(&teacher, chunk, 4, 29).unwrap() {
                        hyps.push(d.tokens);
                    }
                }
                let b = bleu(&to_strings(&vocab, &hyps), &to_strings(&vocab, &refs), true).unwrap();
                eprintln!("teacher test BLEU (beam 4): {b:.2} in {:?}", t0.elapsed());
            }
        }
        "full" => {
            let t_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
            let n_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
            let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
            let warmup: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(30);
            let seed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1);
            let tcfg = TrainConfig {
                epochs: t_epochs,
                base_lr: lr,
                warmup,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let (teacher, _) =
                train_teacher(&train, &valid, vocab.clone(), model_cfg.clone(), &tcfg).unwrap();
            let acc = teacher_token_accuracy(&teacher, &valid, 2048).unwrap();
            eprintln!("teacher: {:?} acc={acc:.4}", t0.elapsed());

            let t0 = Instant::now();
            let (distilled, truncated) = distill(&teacher, &train, 4, 32).unwrap();
            let exact = distilled.iter().zip(&train).filter(|(d, t)| d.tgt == t.tgt).count();
            eprintln!(
                "distill: {:?} truncated={truncated} exact={exact}/{}",
                t0.elapsed(),
                train.len()
            );

            let t0 = Instant::now();
            let (fwd, _) = train_ibm1(&train, 10).unwrap();
            let swapped: Vec<SentencePair> = train
                .iter()
                .map(|p| SentencePair::new(p.tgt.clone(), p.src.clone()))
                .collect();
            let (rev, _) = train_ibm1(&swapped, 10).unwrap();
            let table = extract_phrases(&train, &vocab, &fwd, &rev, 4).unwrap();
            let word = extract_word_table(&table).unwrap().to_phrase_table();
            eprintln!("tables: {:?}", t0.elapsed());

            for method in [
                InputMethod::Copy,
                InputMethod::Phrase,
                InputMethod::Word,
                InputMethod::Embed,
            ] {
                let resources = InputResources {
                    phrase_table: Some(&table),
                    word_table: Some(&word),
                };
                let ncfg = TrainConfig {
                    method,
                    seed,
                    epochs: n_epochs,
                    base_lr: lr,
                    warmup,
                    ..TrainConfig::default()
                };
                let t0 = Instant::now();
                let (student, _, nstats) = train_nat(
                    &distilled,
                    &valid,
                    vocab.clone(),
                    model_cfg.clone(),
                    &ncfg,
                    &resources,
                )
                .unwrap();
                let dt = t0.elapsed();
                let opts = TranslateOptions {
                    method,
                    window: LengthWindow::new(student.alpha, 0).unwrap(),
                    kernel: ncfg.kernel(),
                    pad_to: None,
                };
                let srcs: Vec<Vec<u32>> = test.iter().map(|p| p.src.clone()).collect();
                let hyps = nat_translate_corpus(&student, None, &resources, &srcs, &opts).unwrap();
                let b = bleu(&to_strings(&vocab, &hyps), &to_strings(&vocab, &refs), true).unwrap();
                eprintln!(
                    "NAT {:?}: {:?}, valid {:?}, test BLEU(B=0) {b:.2}",
                    method,
                    dt,
                    nstats.iter().map(|s| (s.valid_metric * 100.0).round() / 100.0).collect::<Vec<_>>()
                );
            }
        }
        other => eprintln!("unknown phase {other}"),
    }
}
