//! Command-line entry point wiring all pipelines: corpus generation, table
//! building, teacher/student training, distillation, translation,
//! evaluation, and latency measurement.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use natmt::bleu::{bleu, bleu_by_length_bucket};
use natmt::config::Settings;
use natmt::corpus::{
    encode_pairs, read_lines, read_parallel, read_tsv, SentencePair, Vocabulary,
};
use natmt::decoder_input::{InputMethod, InputResources};
use natmt::error::ModelError;
use natmt::inference::{
    measure_latency, nat_translate_corpus, LatencyMode, LengthWindow, TranslateOptions,
};
use natmt::model::{beam_search_group, ModelKind, TransformerParams};
use natmt::phrase::{
    extract_phrases, extract_word_table, parse_moses_table, train_ibm1, PhraseTable, WordTable,
};
use natmt::toy::{ToyGenerator, ToySpec};
use natmt::training::{distill, train_nat, train_teacher};

#[derive(Parser)]
#[command(
    name = "natmt",
    about = "Non-autoregressive translation with enhanced decoder inputs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the training/inference subcommands. Precedence is
/// defaults < --config file < explicit flags. `natmt config-keys` prints
/// every key with its default.
#[derive(Args, Debug, Default)]
struct Common {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Length-ratio alpha (default: the value stored in the checkpoint)
    #[arg(long)]
    alpha: Option<f64>,
    /// Half-width B of the inference length window
    #[arg(long = "window-B")]
    window_b: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    d_steps: Option<usize>,
    /// Use the unnormalized kernel weights
    #[arg(long)]
    raw_kernel: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    em_iterations: Option<usize>,
    #[arg(long)]
    max_phrase_len: Option<usize>,
    #[arg(long)]
    moses_score_col: Option<usize>,
    #[arg(long)]
    distill_chunk: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<Settings, ModelError> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.load_file(path)?;
        }
        macro_rules! ov {
            ($($field:ident),*) => {
                $( if let Some(v) = self.$field { s.$field = v; } )*
            };
        }
        ov!(
            seed, mu, lambda, tau, alpha, window_b, beam, epochs, base_lr, warmup, max_tokens,
            d_steps, layers, d_model, heads, d_ff, dropout, max_positions, min_count,
            em_iterations, max_phrase_len, moses_score_col, distill_chunk
        );
        if self.raw_kernel {
            s.raw_kernel = true;
        }
        Ok(s)
    }
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Source-side text file (one sentence per line)
    #[arg(long)]
    src: Option<PathBuf>,
    /// Target-side text file, aligned with --src
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Single file with `source TAB target` per line
    #[arg(long)]
    tsv: Option<PathBuf>,
}

impl CorpusArgs {
    fn read(&self) -> Result<Vec<(Vec<String>, Vec<String>)>, Box<dyn std::error::Error>> {
        match (&self.src, &self.tgt, &self.tsv) {
            (Some(s), Some(t), None) => Ok(read_parallel(s, t)?),
            (None, None, Some(f)) => Ok(read_tsv(f)?),
            _ => Err("provide either --src and --tgt, or --tsv".into()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic cipher corpus
    GenToy {
        /// Output directory for {train,valid,test}.{src,tgt}
        #[arg(long)]
        out: PathBuf,
        /// Training pairs
        #[arg(long, default_value_t = 5000)]
        pairs: usize,
        #[arg(long, default_value_t = 500)]
        valid: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 23)]
        source_types: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        /// Disable the deterministic local swaps
        #[arg(long)]
        no_swap: bool,
    },
    /// Print every config key with its default value
    ConfigKeys,
    /// Build a phrase table from a parallel corpus (internal aligner)
    BuildTable {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Output table (native TSV)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Translate text by greedy phrase-table lookup only
    Lookup {
        /// Phrase table path
        #[arg(long)]
        table: PathBuf,
        /// Table format: native TSV or Moses (plain or .gz)
        #[arg(long, default_value = "native")]
        format: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Restrict a phrase table to its best single-token entries
    ExtractWordTable {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value = "native")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the autoregressive teacher
    TrainTeacher {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        valid_src: PathBuf,
        #[arg(long)]
        valid_tgt: PathBuf,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Replace targets with the frozen teacher's beam-search output
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out_src: PathBuf,
        #[arg(long)]
        out_tgt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the non-autoregressive student on a distilled corpus
    TrainNat {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        valid_src: PathBuf,
        #[arg(long)]
        valid_tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decoder-input method: copy | phrase | word | embed
        #[arg(long = "decoder-input", default_value = "copy")]
        decoder_input: String,
        /// Phrase table (native TSV) for --decoder-input phrase
        #[arg(long)]
        table: Option<PathBuf>,
        /// Word table (native TSV) for --decoder-input word
        #[arg(long)]
        word_table: Option<PathBuf>,
        /// Write one JSON loss record per step
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Translate plain text with a trained model
    Translate {
        /// Student or teacher checkpoint
        #[arg(long)]
        model: PathBuf,
        /// Teacher checkpoint, required when --window-B >= 1
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long = "decoder-input", default_value = "copy")]
        decoder_input: String,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        word_table: Option<PathBuf>,
        /// Pad every sentence to this width for length-independent cost
        #[arg(long)]
        pad_to: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Corpus BLEU (and optional length-bucket table) as JSON
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        r#ref: PathBuf,
        #[arg(long)]
        case_insensitive: bool,
        /// Comma-separated reference-length bucket edges, e.g. 5,10,20
        #[arg(long)]
        buckets: Option<String>,
        /// Optional JSON output path (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sentence decoding latency as JSON
    Latency {
        /// Student checkpoint (NAT modes)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Teacher checkpoint (at-greedy mode and rescoring)
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// at-greedy | nat-b0 | nat-b4
        #[arg(long)]
        mode: String,
        #[arg(long = "decoder-input", default_value = "copy")]
        decoder_input: String,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        word_table: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long)]
        pad_to: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn write_sentences(path: &Path, sents: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sents {
        writeln!(w, "{}", s.join(" "))?;
    }
    w.flush()
}

/// Like read_lines but keeps empty lines as empty sentences, which
/// hypothesis files may legitimately contain.
fn read_hyp_lines(path: &Path) -> std::io::Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect())
}

fn load_table(
    path: &Path,
    format: &str,
    score_col: usize,
) -> Result<PhraseTable, Box<dyn std::error::Error>> {
    match format {
        "native" => Ok(PhraseTable::read_tsv(path)?),
        "moses" => Ok(parse_moses_table(path, score_col)?),
        other => Err(format!("unknown table format {other:?} (native|moses)").into()),
    }
}

fn load_resources(
    table: &Option<PathBuf>,
    word_table: &Option<PathBuf>,
) -> Result<(Option<PhraseTable>, Option<PhraseTable>), Box<dyn std::error::Error>> {
    let phrase = table.as_deref().map(PhraseTable::read_tsv).transpose()?;
    let word = word_table
        .as_deref()
        .map(|p| WordTable::read_tsv(p).map(|w| w.to_phrase_table()))
        .transpose()?;
    Ok((phrase, word))
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::GenToy {
            out,
            pairs,
            valid,
            test,
            seed,
            source_types,
            min_len,
            max_len,
            no_swap,
        } => {
            let gen = ToyGenerator::new(ToySpec {
                source_types,
                min_len,
                max_len,
                swap: !no_swap,
                seed,
            });
            std::fs::create_dir_all(&out)?;
            for (name, n, stream) in [("train", pairs, 0u64), ("valid", valid, 1), ("test", test, 2)]
            {
                let data = gen.generate(n, stream);
                let srcs: Vec<Vec<String>> = data.iter().map(|(s, _)| s.clone()).collect();
                let tgts: Vec<Vec<String>> = data.iter().map(|(_, t)| t.clone()).collect();
                write_sentences(&out.join(format!("{name}.src")), &srcs)?;
                write_sentences(&out.join(format!("{name}.tgt")), &tgts)?;
            }
            eprintln!("wrote {pairs}/{valid}/{test} pairs to {}", out.display());
            Ok(())
        }
        Command::ConfigKeys => {
            print!("{}", Settings::documented_defaults());
            Ok(())
        }
        Command::BuildTable { corpus, out, common } => {
            let settings = common.resolve()?;
            let raw = corpus.read()?;
            let vocab = Vocabulary::build(&raw, settings.min_count)?;
            let pairs = encode_pairs(&raw, &vocab);
            let (fwd, _) = train_ibm1(&pairs, settings.em_iterations)?;
            let swapped: Vec<SentencePair> = pairs
                .iter()
                .map(|p| SentencePair::new(p.tgt.clone(), p.src.clone()))
                .collect();
            let (rev, _) = train_ibm1(&swapped, settings.em_iterations)?;
            let table = extract_phrases(&pairs, &vocab, &fwd, &rev, settings.max_phrase_len)?;
            table.write_tsv(&out)?;
            eprintln!(
                "wrote {} source phrases (L = {}) to {}",
                table.len(),
                table.max_source_len(),
                out.display()
            );
            Ok(())
        }
        Command::Lookup {
            table,
            format,
            input,
            output,
            common,
        } => {
            let settings = common.resolve()?;
            let table = load_table(&table, &format, settings.moses_score_col)?;
            let sents = read_lines(&input)?;
            let hyps: Vec<Vec<String>> = sents
                .iter()
                .map(|s| natmt::phrase::greedy_lookup(s, &table))
                .collect();
            write_sentences(&output, &hyps)?;
            eprintln!("translated {} sentences", hyps.len());
            Ok(())
        }
        Command::ExtractWordTable {
            table,
            format,
            out,
            common,
        } => {
            let settings = common.resolve()?;
            let table = load_table(&table, &format, settings.moses_score_col)?;
            let word = extract_word_table(&table)?;
            word.write_tsv(&out)?;
            eprintln!("wrote {} word entries to {}", word.len(), out.display());
            Ok(())
        }
        Command::TrainTeacher {
            corpus,
            valid_src,
            valid_tgt,
            out,
            common,
        } => {
            let settings = common.resolve()?;
            let raw = corpus.read()?;
            let vocab = Vocabulary::build(&raw, settings.min_count)?;
            let train = encode_pairs(&raw, &vocab);
            let valid_raw = read_parallel(&valid_src, &valid_tgt)?;
            let valid = encode_pairs(&valid_raw, &vocab);
            let cfg = settings.train_config(InputMethod::Copy);
            let (teacher, stats) =
                train_teacher(&train, &valid, vocab, settings.model_config(), &cfg)?;
            for s in &stats {
                eprintln!(
                    "epoch {}: train loss {:.4}, valid loss {:.4}",
                    s.epoch, s.train_loss, s.valid_metric
                );
            }
            teacher.save(&out, None)?;
            eprintln!("saved teacher to {}", out.display());
            Ok(())
        }
        Command::Distill {
            teacher,
            corpus,
            out_src,
            out_tgt,
            common,
        } => {
            let settings = common.resolve()?;
            let (teacher, _) = TransformerParams::load(&teacher)?;
            if teacher.kind != ModelKind::Teacher {
                return Err("distillation needs a teacher checkpoint".into());
            }
            let raw = corpus.read()?;
            let pairs: Vec<SentencePair> = raw
                .iter()
                .map(|(s, t)| {
                    SentencePair::new(teacher.vocab.encode_seq(s), teacher.vocab.encode_seq(t))
                })
                .collect();
            let (distilled, truncated) =
                distill(&teacher, &pairs, settings.beam, settings.distill_chunk)?;
            let srcs: Vec<Vec<String>> = raw.iter().map(|(s, _)| s.clone()).collect();
            let tgts: Vec<Vec<String>> = distilled
                .iter()
                .map(|p| teacher.vocab.decode_seq(&p.tgt))
                .collect();
            write_sentences(&out_src, &srcs)?;
            write_sentences(&out_tgt, &tgts)?;
            eprintln!(
                "distilled {} sentences ({} truncated) with beam {}",
                distilled.len(),
                truncated,
                settings.beam
            );
            Ok(())
        }
        Command::TrainNat {
            corpus,
            valid_src,
            valid_tgt,
            out,
            decoder_input,
            table,
            word_table,
            loss_log,
            common,
        } => {
            let settings = common.resolve()?;
            let method: InputMethod = decoder_input.parse()?;
            let raw = corpus.read()?;
            let vocab = Vocabulary::build(&raw, settings.min_count)?;
            let train = encode_pairs(&raw, &vocab);
            let valid_raw = read_parallel(&valid_src, &valid_tgt)?;
            let valid = encode_pairs(&valid_raw, &vocab);
            let (phrase, word) = load_resources(&table, &word_table)?;
            let resources = InputResources {
                phrase_table: phrase.as_ref(),
                word_table: word.as_ref(),
            };
            let cfg = settings.train_config(method);
            let (student, records, stats) = train_nat(
                &train,
                &valid,
                vocab,
                settings.model_config(),
                &cfg,
                &resources,
            )?;
            for s in &stats {
                eprintln!(
                    "epoch {}: train L_neg {:.4}, valid BLEU {:.2}",
                    s.epoch, s.train_loss, s.valid_metric
                );
            }
            if let Some(path) = loss_log {
                let mut w = BufWriter::new(File::create(&path)?);
                for r in &records {
                    writeln!(w, "{}", serde_json::to_string(r)?)?;
                }
                w.flush()?;
            }
            student.save(&out, None)?;
            eprintln!("saved student to {}", out.display());
            Ok(())
        }
        Command::Translate {
            model,
            teacher,
            input,
            output,
            decoder_input,
            table,
            word_table,
            pad_to,
            common,
        } => {
            let settings = common.resolve()?;
            let (model, _) = TransformerParams::load(&model)?;
            let sents = read_lines(&input)?;
            let sources: Vec<Vec<u32>> = sents.iter().map(|s| model.vocab.encode_seq(s)).collect();
            let hyps: Vec<Vec<String>> = match model.kind {
                ModelKind::Teacher => {
                    let refs: Vec<&[u32]> = sources.iter().map(|s| s.as_slice()).collect();
                    let mut out_tok = Vec::with_capacity(refs.len());
                    for chunk in refs.chunks(settings.distill_chunk.max(1)) {
                        let max_src = chunk.iter().map(|s| s.len()).max().unwrap_or(1);
                        let max_len = (2 * max_src + 5).min(model.config.max_positions - 1);
                        for d in beam_search_group(&model, chunk, settings.beam, max_len)? {
                            out_tok.push(model.vocab.decode_seq(&d.tokens));
                        }
                    }
                    out_tok
                }
                ModelKind::Student => {
                    let method: InputMethod = decoder_input.parse()?;
                    let (phrase, word) = load_resources(&table, &word_table)?;
                    let resources = InputResources {
                        phrase_table: phrase.as_ref(),
                        word_table: word.as_ref(),
                    };
                    let teacher_model = teacher
                        .as_deref()
                        .map(TransformerParams::load)
                        .transpose()?
                        .map(|(m, _)| m);
                    let alpha = if settings.alpha > 0.0 {
                        settings.alpha
                    } else {
                        model.alpha
                    };
                    let opts = TranslateOptions {
                        method,
                        window: LengthWindow::new(alpha, settings.window_b)?,
                        kernel: settings.train_config(method).kernel(),
                        pad_to,
                    };
                    let toks = nat_translate_corpus(
                        &model,
                        teacher_model.as_ref(),
                        &resources,
                        &sources,
                        &opts,
                    )?;
                    toks.iter().map(|t| model.vocab.decode_seq(t)).collect()
                }
            };
            write_sentences(&output, &hyps)?;
            eprintln!("translated {} sentences", hyps.len());
            Ok(())
        }
        Command::Eval {
            hyp,
            r#ref,
            case_insensitive,
            buckets,
            out,
        } => {
            let hyps = read_hyp_lines(&hyp)?;
            let refs = read_lines(&r#ref)?;
            let score = bleu(&hyps, &refs, !case_insensitive)?;
            let mut summary = serde_json::json!({
                "bleu": score,
                "sentences": hyps.len(),
                "case_sensitive": !case_insensitive,
            });
            if let Some(edges) = buckets {
                let edges: Vec<usize> = edges
                    .split(',')
                    .map(|e| e.trim().parse())
                    .collect::<Result<_, _>>()?;
                let table = bleu_by_length_bucket(&hyps, &refs, &edges, !case_insensitive)?;
                summary["buckets"] = serde_json::json!(table
                    .iter()
                    .map(|b| serde_json::json!({
                        "min_len": b.min_len,
                        "max_len": b.max_len,
                        "count": b.count,
                        "bleu": b.bleu,
                    }))
                    .collect::<Vec<_>>());
            }
            let text = serde_json::to_string_pretty(&summary)?;
            match out {
                Some(path) => std::fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Latency {
            model,
            teacher,
            input,
            mode,
            decoder_input,
            table,
            word_table,
            warmup,
            pad_to,
            out,
            common,
        } => {
            let settings = common.resolve()?;
            let mode = match mode.as_str() {
                "at-greedy" => LatencyMode::AtGreedy,
                "nat-b0" => LatencyMode::NatB0,
                "nat-b4" => LatencyMode::NatB4,
                other => return Err(format!("unknown mode {other:?}").into()),
            };
            let method: InputMethod = decoder_input.parse()?;
            let student = model
                .as_deref()
                .map(TransformerParams::load)
                .transpose()?
                .map(|(m, _)| m);
            let teacher = teacher
                .as_deref()
                .map(TransformerParams::load)
                .transpose()?
                .map(|(m, _)| m);
            let any_model = student
                .as_ref()
                .or(teacher.as_ref())
                .ok_or("latency needs --model or --teacher")?;
            let sents = read_lines(&input)?;
            let sources: Vec<Vec<u32>> =
                sents.iter().map(|s| any_model.vocab.encode_seq(s)).collect();
            let alpha = if settings.alpha > 0.0 {
                settings.alpha
            } else {
                any_model.alpha
            };
            let (phrase, word) = load_resources(&table, &word_table)?;
            let resources = InputResources {
                phrase_table: phrase.as_ref(),
                word_table: word.as_ref(),
            };
            let report = measure_latency(
                mode,
                student.as_ref(),
                teacher.as_ref(),
                &resources,
                &sources,
                method,
                alpha,
                pad_to,
                warmup,
            )?;
            let summary = serde_json::json!({
                "mode": report.mode,
                "sentences": report.records.len(),
                "mean_wall_ms": report.mean_wall_ms(),
                "wall_slope_ci_ms_per_token": report.wall_slope_ci(),
                "records": report.records,
            });
            let text = serde_json::to_string_pretty(&summary)?;
            match out {
                Some(path) => std::fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
