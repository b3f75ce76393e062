use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use irmatch_core::bpe::{train_bpe, Vocabulary, DEFAULT_MIN_FREQ, DEFAULT_VOCAB_SIZE};
use irmatch_core::corpus::{paired_corpus, read_jsonl, write_jsonl, CorpusRecord};
use irmatch_core::encoder::{Checkpoint, EncoderModel, ModelConfig};
use irmatch_core::eval::{self, LabeledScore, Protocol};
use irmatch_core::ir::{normalize, parse_ir_text, NormalizePolicy, Origin};
use irmatch_core::matcher::{embed_document, search, EmbeddingIndex, IndexEntry, DEFAULT_THRESHOLD};
use irmatch_core::mlm::{pretrain, MaskUnit, Masker, PretrainConfig};
use irmatch_core::synth::{generate, SynthSpec};
use irmatch_core::triplet::{
    epoch_summaries, finetune, FinetuneConfig, Pair, Towers, UniformNegatives, DEFAULT_MARGIN,
};

#[derive(Parser)]
#[command(name = "irmatch", version, about = "Binary-to-source code matching over normalized LLVM IR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and normalize `.ll` files into a corpus.jsonl
    Prepare {
        /// Files or directories (all `*.ll` inside, sorted)
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// key = value normalization policy
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value = "source")]
        origin: Origin,
        #[arg(long)]
        language: Option<String>,
    },
    /// Learn a BPE vocabulary from a corpus
    TrainBpe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        vocab_size: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_FREQ)]
        min_freq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-token pre-training
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// key = value model config; vocab_size is taken from the vocabulary
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value = "token")]
        unit: MaskUnit,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `<out>.step<N>` every N steps
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// CSV training log `step,loss,lr`
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune with the margin ranking loss on paired documents
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the vocabulary stored in the initial checkpoint
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        alpha: f64,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Separate binary and source encoders
        #[arg(long)]
        two_tower: bool,
        #[arg(long)]
        out: PathBuf,
        /// CSV per-epoch log `epoch,steps,loss,pos_sim,neg_sim`
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Embed every document of a corpus into an index
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank index entries against one binary `.ll` query
    Match {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score paired documents under the 1-positive-N-negatives protocol
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = eval::DEFAULT_NEGATIVES)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// scores.jsonl; the protocol goes to `<out>.protocol.json`
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision/recall/F1 report with a threshold sweep
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "0.5:0.98:0.02")]
        sweep: String,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Sweep as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a paired synthetic corpus
    Synth {
        #[arg(long, default_value_t = 50)]
        groups: usize,
        #[arg(long, default_value_t = 2)]
        variants: usize,
        #[arg(long, default_value_t = 0.5)]
        strength: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_policy(path: Option<&Path>) -> Result<NormalizePolicy> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(NormalizePolicy::from_kv_str(&text)?)
        }
        None => Ok(NormalizePolicy::default()),
    }
}

fn ll_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> =
                std::fs::read_dir(input)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            found.retain(|p| p.extension().is_some_and(|e| e == "ll"));
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!("no .ll files found");
    }
    Ok(files)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// `--vocab` if given, else the one stored in the checkpoint.
fn resolve_vocab(explicit: Option<&Path>, ckpt: &Checkpoint) -> Result<Vocabulary> {
    match (explicit, &ckpt.vocab) {
        (Some(p), _) => Ok(Vocabulary::load(p)?),
        (None, Some(v)) => Ok(v.clone()),
        (None, None) => bail!("checkpoint carries no vocabulary; pass --vocab"),
    }
}

fn towers(ckpt: &Checkpoint) -> Towers {
    Towers { binary: ckpt.model.clone(), source: ckpt.source_model.clone() }
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn protocol_path(scores: &Path) -> PathBuf {
    let mut name = scores.as_os_str().to_owned();
    name.push(".protocol.json");
    PathBuf::from(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { inputs, out, policy, origin, language } => {
            let policy = load_policy(policy.as_deref())?;
            let mut records = Vec::new();
            let mut seen = HashSet::new();
            for file in ll_files(&inputs)? {
                let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                let id = file.file_stem().and_then(|s| s.to_str()).unwrap_or("doc").to_string();
                if !seen.insert(id.clone()) {
                    bail!("duplicate document id {id}");
                }
                let doc = parse_ir_text(&text)
                    .with_context(|| format!("parsing {}", file.display()))?
                    .with_id(id)
                    .with_origin(origin)
                    .with_language(language.clone());
                let normalized = normalize(&doc, &policy);
                let unknown = normalized.unknown_opcodes();
                if !unknown.is_empty() {
                    eprintln!("{}: unknown opcodes {:?}", file.display(), unknown);
                }
                records.push(CorpusRecord::from_document(&normalized));
            }
            write_jsonl(&out, &records)?;
            eprintln!("wrote {} documents to {}", records.len(), out.display());
        }
        Command::TrainBpe { corpus, vocab_size, min_freq, out } => {
            let records: Vec<CorpusRecord> = read_jsonl(&corpus)?;
            let vocab = train_bpe(records.iter().map(|r| &r.tokens), vocab_size, min_freq)?;
            vocab.save(&out)?;
            eprintln!("{} tokens, {} merges", vocab.len(), vocab.merges().len());
        }
        Command::Pretrain { corpus, vocab, config, steps, batch_size, unit, seed, checkpoint_every, out, log } => {
            let vocab = Vocabulary::load(&vocab)?;
            let mut model_config = match config {
                Some(p) => ModelConfig::from_kv_str(&std::fs::read_to_string(p)?)?,
                None => ModelConfig::default(),
            };
            model_config.vocab_size = vocab.len();
            let records: Vec<CorpusRecord> = read_jsonl(&corpus)?;
            let inputs: Vec<_> = records
                .iter()
                .map(|r| irmatch_core::bpe::build_model_input(&vocab.encode(&r.tokens), None, model_config.max_len))
                .collect();
            let train = PretrainConfig { steps, batch_size, unit, checkpoint_every, ..PretrainConfig::default() };
            let masker = Masker::new(&vocab, unit);
            let save = |model: &EncoderModel, path: &Path| {
                let mut ckpt = Checkpoint::new(model.clone());
                ckpt.vocab = Some(vocab.clone());
                ckpt.save(path)
            };
            let (model, rows) = pretrain(&inputs, model_config, &train, &masker, seed, |step, model| {
                let mut p = out.as_os_str().to_owned();
                p.push(format!(".step{step}"));
                save(model, Path::new(&p))
            })?;
            save(&model, &out)?;
            if let Some(log) = log {
                let mut csv = String::from("step,loss,lr\n");
                for r in &rows {
                    csv.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
                }
                std::fs::write(log, csv)?;
            }
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                eprintln!("loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, rows.len());
            }
        }
        Command::Train { pairs, corpus, vocab, init, alpha, steps, batch_size, seed, two_tower, out, log } => {
            let ckpt = load_checkpoint(&init)?;
            let vocab = resolve_vocab(vocab.as_deref(), &ckpt)?;
            let records: Vec<CorpusRecord> = read_jsonl(&corpus)?;
            let pairs: Vec<Pair> = read_jsonl(&pairs)?;
            let n_pairs = pairs.len();
            let paired = paired_corpus(&records, pairs, &vocab, ckpt.config().max_len)?;
            let config = FinetuneConfig { steps, batch_size, margin: alpha, two_tower, ..FinetuneConfig::default() };
            let (tuned, rows) = finetune(towers(&ckpt), &paired, &config, seed, &mut UniformNegatives)?;
            let epochs = epoch_summaries(&rows, n_pairs.div_ceil(batch_size.max(1)));
            for e in &epochs {
                eprintln!(
                    "epoch {} loss {:.4} pos {:.3} neg {:.3}",
                    e.epoch, e.mean_loss, e.mean_pos_sim, e.mean_neg_sim
                );
            }
            if let Some(log) = log {
                let mut csv = String::from("epoch,steps,loss,pos_sim,neg_sim\n");
                for e in &epochs {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        e.epoch, e.steps, e.mean_loss, e.mean_pos_sim, e.mean_neg_sim
                    ));
                }
                std::fs::write(log, csv)?;
            }
            Checkpoint { vocab: Some(vocab), model: tuned.binary, source_model: tuned.source }.save(&out)?;
        }
        Command::Embed { model, corpus, vocab, out } => {
            let ckpt = load_checkpoint(&model)?;
            let vocab = resolve_vocab(vocab.as_deref(), &ckpt)?;
            let towers = towers(&ckpt);
            let records: Vec<CorpusRecord> = read_jsonl(&corpus)?;
            let mut index = EmbeddingIndex::new(ckpt.fingerprint(), ckpt.config().d_model);
            for r in records {
                let embedding = embed_document(towers.for_origin(r.origin), &r.tokens, &vocab)?;
                index.push(IndexEntry {
                    doc_id: r.doc_id,
                    embedding,
                    origin: r.origin,
                    language_tag: r.language_tag,
                })?;
            }
            index.save(&out)?;
            eprintln!("indexed {} documents", index.len());
        }
        Command::Match { model, query, index, threshold, top_k, policy, vocab, out } => {
            let ckpt = load_checkpoint(&model)?;
            let vocab = resolve_vocab(vocab.as_deref(), &ckpt)?;
            let policy = load_policy(policy.as_deref())?;
            let text = std::fs::read_to_string(&query)?;
            let doc = normalize(&parse_ir_text(&text)?.with_origin(Origin::Binary), &policy);
            let tokens = irmatch_core::ir::to_token_stream(&doc);
            let embedding = embed_document(&ckpt.model, &tokens, &vocab)?;
            let index = EmbeddingIndex::load(&index)?;
            let hits = search(&embedding, &index, top_k, &ckpt.fingerprint())?;
            let hits: Vec<_> = hits
                .into_iter()
                .map(|h| json!({"doc_id": h.doc_id, "score": h.score, "matched": h.score >= threshold}))
                .collect();
            let report = json!({
                "query": query.display().to_string(),
                "model_fingerprint": index.model_fingerprint,
                "threshold": threshold,
                "hits": hits,
            });
            write_json(out.as_deref(), &report)?;
        }
        Command::Score { model, corpus, pairs, vocab, negatives, seed, out } => {
            let ckpt = load_checkpoint(&model)?;
            let vocab = resolve_vocab(vocab.as_deref(), &ckpt)?;
            let records: Vec<CorpusRecord> = read_jsonl(&corpus)?;
            let pairs: Vec<Pair> = read_jsonl(&pairs)?;
            let paired = paired_corpus(&records, pairs, &vocab, ckpt.config().max_len)?;
            let protocol = Protocol::one_vs_negatives(negatives, seed);
            let scores = eval::score_protocol(&towers(&ckpt), &paired, &protocol)?;
            write_jsonl(&out, &scores)?;
            std::fs::write(protocol_path(&out), serde_json::to_string_pretty(&protocol)?)?;
            eprintln!("{} scored pairs", scores.len());
        }
        Command::Eval { scores, sweep, threshold, out, csv } => {
            let items: Vec<LabeledScore> = read_jsonl(&scores)?;
            let grid = eval::parse_grid(&sweep)?;
            let sidecar = protocol_path(&scores);
            let protocol =
                if sidecar.exists() { Some(serde_json::from_str(&std::fs::read_to_string(sidecar)?)?) } else { None };
            let report = eval::report(&items, threshold, &grid, protocol)?;
            write_json(Some(&out), &serde_json::to_value(&report)?)?;
            if let Some(csv) = csv {
                std::fs::write(csv, eval::sweep_csv(&report.sweep))?;
            }
            let fmt = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x:.4}"));
            eprintln!(
                "threshold {threshold}: P {} R {} F1 {}",
                fmt(report.precision),
                fmt(report.recall),
                fmt(report.f1)
            );
        }
        Command::Synth { groups, variants, strength, seed, policy, out_dir } => {
            let spec = SynthSpec { n_groups: groups, variants_per_group: variants, seed, transform_strength: strength };
            let corpus = generate(&spec)?;
            corpus.write_to(&out_dir, &load_policy(policy.as_deref())?)?;
            eprintln!("{} documents, {} pairs in {}", corpus.docs.len(), corpus.pairs.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
