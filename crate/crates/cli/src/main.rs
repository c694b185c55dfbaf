use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use codesum::codec::{tokenize_comment, TokenSequence};
use codesum::corpus::{
    clean_corpus, leakage, length_histograms, load_jsonl, save_jsonl, split_dataset, SplitScheme, TrainSplit,
    ValidationSplit,
};
use codesum::decoder::BeamConfig;
use codesum::metrics::{comment_entropy, corpus_bleu, BleuAggregation};
use codesum::trainer::{self, write_history_csv, Checkpoint, Schedule, TrainConfig};
use codesum::vocab::{build_vocabulary, build_word_counts, EnglishDictionary, Vocabulary};

const TRAIN_FILE: &str = "train.jsonl";
const VALIDATION_FILE: &str = "validation.jsonl";
const TEST_FILE: &str = "test.jsonl";
const HISTORY_FILE: &str = "history.csv";

#[derive(Parser)]
#[command(name = "codesum", version, about = "Generate one-sentence comments for source code")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw code/comment records and write train/validation/test splits.
    Ingest {
        /// Raw records, one JSON object per line.
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory for the split files.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Build the output vocabulary from training comments.
    BuildVocab {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<u64>,
        /// Word list to use instead of the built-in one.
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write its best checkpoint.
    Train {
        /// Directory holding train.jsonl and validation.jsonl.
        #[arg(long = "in")]
        input: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary file; built from the training comments when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the comment generated for one piece of code.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Vocabulary file; defaults to the one stored with the model.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Source file; standard input when absent.
        #[arg(long)]
        code: Option<PathBuf>,
        #[command(flatten)]
        beam: BeamArgs,
    },
    /// Score predictions against references and print a JSON report.
    #[command(group(ArgGroup::new("source").required(true).args(["pred", "model"])))]
    Evaluate {
        /// Predicted comments, one per line.
        #[arg(long, requires = "reference", conflicts_with_all = ["model", "input"])]
        pred: Option<PathBuf>,
        /// Reference comments, one per line.
        #[arg(long = "ref", requires = "pred")]
        reference: Option<PathBuf>,
        /// Model to generate predictions with, for the records in --in.
        #[arg(long, requires = "input")]
        model: Option<PathBuf>,
        #[arg(long = "in", requires = "model")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sentence-mean")]
        aggregation: Aggregation,
        #[command(flatten)]
        beam: BeamArgs,
    },
    /// Print filtering, length, entropy, and leakage statistics for raw records.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
}

#[derive(Args)]
struct SplitArgs {
    /// `ratio` or `fixed-test:N`.
    #[arg(long, default_value = "ratio")]
    scheme: SplitScheme,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BeamArgs {
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Aggregation {
    SentenceMean,
    Corpus,
}

impl From<Aggregation> for BleuAggregation {
    fn from(a: Aggregation) -> Self {
        match a {
            Aggregation::SentenceMean => BleuAggregation::SentenceMean,
            Aggregation::Corpus => BleuAggregation::Corpus,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainConfig,
    beam: BeamConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl BeamArgs {
    fn resolve(&self) -> Result<BeamConfig> {
        let mut beam = load_config(self.config.as_deref())?.beam;
        if let Some(width) = self.beam {
            beam.width = width;
        }
        if let Some(max_len) = self.max_len {
            beam.max_len = max_len;
        }
        beam.validate()?;
        Ok(beam)
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_model(dir: &Path, vocab: Option<&Path>) -> Result<(Checkpoint, Vocabulary)> {
    let loaded = match vocab {
        Some(path) => {
            let vocab = Vocabulary::load(path).with_context(|| format!("reading {}", path.display()))?;
            (Checkpoint::load(dir, &vocab)?, vocab)
        }
        None => Checkpoint::load_dir(dir)?,
    };
    Ok(loaded)
}

fn read_lines(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(tokenize_comment).collect())
}

fn ingest(input: &Path, out: &Path, split: &SplitArgs) -> Result<()> {
    let records = load_jsonl(input).with_context(|| format!("reading {}", input.display()))?;
    let (clean, report) = clean_corpus(records);
    let splits = split_dataset(clean, split.scheme, split.seed)?;
    fs::create_dir_all(out)?;
    save_jsonl(&out.join(TRAIN_FILE), splits.train.records())?;
    save_jsonl(&out.join(VALIDATION_FILE), splits.validation.records())?;
    save_jsonl(&out.join(TEST_FILE), splits.test.records())?;
    print_json(&json!({
        "filter": report,
        "train": splits.train.len(),
        "validation": splits.validation.len(),
        "test": splits.test.len(),
    }))
}

fn build_vocab(
    input: &Path,
    out: &Path,
    threshold: Option<u64>,
    dictionary: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let threshold = threshold.unwrap_or(load_config(config)?.train.vocab_threshold);
    let records = load_jsonl(input).with_context(|| format!("reading {}", input.display()))?;
    let dict = match dictionary {
        Some(path) => EnglishDictionary::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => EnglishDictionary::embedded(),
    };
    let comments: Vec<&str> = records.iter().map(|r| r.comment.as_str()).collect();
    let vocab = build_vocabulary(&build_word_counts(&comments), &dict, threshold)?;
    vocab.save(out)?;
    print_json(&json!({
        "size": vocab.len(),
        "threshold": vocab.threshold(),
        "fingerprint": vocab.fingerprint(),
    }))
}

fn train(
    input: &Path,
    out: &Path,
    vocab: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut train_config = load_config(config)?.train;
    if let Some(seed) = seed {
        train_config.seed = seed;
    }
    if let Some(epochs) = epochs {
        train_config.schedule = Schedule::Epochs(epochs);
    }
    let read = |name: &str| {
        let path = input.join(name);
        load_jsonl(&path).with_context(|| format!("reading {}", path.display()))
    };
    let train_split = TrainSplit::from_records(read(TRAIN_FILE)?);
    let validation = ValidationSplit::from_records(read(VALIDATION_FILE)?);
    let vocab = match vocab {
        Some(path) => Vocabulary::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let comments: Vec<&str> = train_split.records().iter().map(|r| r.comment.as_str()).collect();
            build_vocabulary(
                &build_word_counts(&comments),
                &EnglishDictionary::embedded(),
                train_config.vocab_threshold,
            )?
        }
    };

    let outcome = trainer::train(&train_split, &validation, &vocab, &train_config, |row| {
        eprintln!("epoch {} train {:.4} validation {:.4}", row.epoch, row.train_loss, row.val_loss);
    })?;
    outcome.best.save(out, &vocab)?;
    let mut history = Vec::new();
    write_history_csv(&mut history, &outcome.history)?;
    fs::write(out.join(HISTORY_FILE), history)?;
    print_json(&json!({
        "best_position": outcome.best.manifest.position,
        "best_validation_loss": outcome.best.manifest.validation_loss,
        "skipped": outcome.skipped,
        "epochs": outcome.history.len(),
    }))
}

fn predict(model: &Path, vocab: Option<&Path>, code: Option<&Path>, beam: &BeamArgs) -> Result<()> {
    let beam = beam.resolve()?;
    let source = match code {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).context("reading standard input")?;
            s
        }
    };
    let (checkpoint, vocab) = load_model(model, vocab)?;
    println!("{}", checkpoint.model.predict(&source, &vocab, &beam)?);
    Ok(())
}

fn entropy_bits(comments: &[TokenSequence]) -> Option<f64> {
    comment_entropy(comments).ok().map(|e| e.entropy_bits)
}

fn evaluate(
    pred: Option<&Path>,
    reference: Option<&Path>,
    model: Option<&Path>,
    input: Option<&Path>,
    aggregation: Aggregation,
    beam: &BeamArgs,
) -> Result<()> {
    let (predictions, references) = match (pred, reference, model, input) {
        (Some(p), Some(r), _, _) => (read_lines(p)?, read_lines(r)?),
        (_, _, Some(m), Some(i)) => {
            let beam = beam.resolve()?;
            let (checkpoint, vocab) = load_model(m, None)?;
            let records = load_jsonl(i).with_context(|| format!("reading {}", i.display()))?;
            let mut predictions = Vec::with_capacity(records.len());
            for r in &records {
                predictions.push(tokenize_comment(&checkpoint.model.predict(&r.code, &vocab, &beam)?));
            }
            (predictions, records.iter().map(|r| tokenize_comment(&r.comment)).collect())
        }
        _ => unreachable!("argument groups are enforced by the parser"),
    };
    if predictions.len() != references.len() {
        bail!(
            "{} predictions but {} references",
            predictions.len(),
            references.len()
        );
    }
    let pairs: Vec<(TokenSequence, TokenSequence)> =
        predictions.iter().cloned().zip(references.iter().cloned()).collect();
    let bleu = corpus_bleu(&pairs, aggregation.into())?;
    print_json(&json!({
        "score": bleu.score,
        "n_pairs": bleu.n_pairs,
        "mean_p_n": bleu.mean_precisions,
        "mean_B": bleu.mean_brevity_penalty,
        "entropy_pred": entropy_bits(&predictions),
        "entropy_ref": entropy_bits(&references),
    }))
}

fn stats(input: &Path, split: &SplitArgs) -> Result<()> {
    let records = load_jsonl(input).with_context(|| format!("reading {}", input.display()))?;
    let (clean, report) = clean_corpus(records);
    let comments: Vec<TokenSequence> = clean.iter().map(|r| tokenize_comment(&r.comment)).collect();
    let entropy = comment_entropy(&comments).ok();
    let histograms = length_histograms(&clean);
    let splits = split_dataset(clean, split.scheme, split.seed)?;
    print_json(&json!({
        "filter": report,
        "lengths": histograms,
        "entropy": entropy,
        "leakage": leakage(splits.train.records(), splits.test.records()),
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, out, split } => ingest(&input, &out, &split),
        Command::BuildVocab {
            input,
            out,
            threshold,
            dictionary,
            config,
        } => build_vocab(&input, &out, threshold, dictionary.as_deref(), config.as_deref()),
        Command::Train {
            input,
            out,
            vocab,
            config,
            seed,
            epochs,
        } => train(&input, &out, vocab.as_deref(), config.as_deref(), seed, epochs),
        Command::Predict { model, vocab, code, beam } => predict(&model, vocab.as_deref(), code.as_deref(), &beam),
        Command::Evaluate {
            pred,
            reference,
            model,
            input,
            aggregation,
            beam,
        } => evaluate(
            pred.as_deref(),
            reference.as_deref(),
            model.as_deref(),
            input.as_deref(),
            aggregation,
            &beam,
        ),
        Command::Stats { input, split } => stats(&input, &split),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
