//! Mini-batch training with Adam, per-epoch (or per-round) validation,
//! best-model retention, and checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_target, tokenize_comment};
use crate::corpus::{DatasetRecord, TrainSplit, ValidationSplit};
use crate::model::{Example, Model, ModelConfig, ModelError};
use crate::numerics::{AdamConfig, AdamState, GradientMap, NumericsError, ParamSet};
use crate::vocab::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
const FORMAT_VERSION: u32 = 1;

/// Examples per gradient work unit. Fixed so the summation order, and hence
/// the result, does not depend on the number of threads.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("no {0} record could be encoded with this vocabulary")]
    NothingEncodable(&'static str),
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("schedule must have at least one epoch or round with at least one sample")]
    Schedule,
    #[error("training diverged at step {step} of position {position}")]
    Diverged {
        position: usize,
        step: u64,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint was trained with vocabulary {expected}, but {found} was supplied")]
    Compatibility { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Full passes over the training split.
    Epochs(usize),
    /// Fixed-size rounds drawn without replacement from repeated passes,
    /// each validated on the same subset of the validation split.
    Rounds {
        rounds: usize,
        samples_per_round: usize,
        validation_samples: usize,
    },
}

impl Schedule {
    pub fn len(&self) -> usize {
        match *self {
            Schedule::Epochs(n) => n,
            Schedule::Rounds { rounds, .. } => rounds,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn paper_rounds() -> Self {
        Schedule::Rounds {
            rounds: 100,
            samples_per_round: 100_000,
            validation_samples: 9_600,
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Epochs(25)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub vocab_threshold: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            batch_size: 32,
            vocab_threshold: 10,
            seed: 0,
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            clip_norm: 5.0,
        }
    }
}

/// Losses after one epoch or round, in nats per target token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based epoch or round number.
    pub epoch: usize,
    /// Mean loss over the examples seen in this epoch, each measured just
    /// before the update that used it.
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_history_csv(mut out: impl Write, history: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss")?;
    for row in history {
        writeln!(out, "{},{},{}", row.epoch, row.train_loss, row.val_loss)?;
    }
    out.flush()
}

/// Encodes records for `model`. Records whose comment cannot be spelled
/// with `vocab` are skipped and counted.
pub fn prepare_examples(
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    model: &Model,
) -> Result<(Vec<Example>, usize), ModelError> {
    let mut examples = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for record in records {
        let Ok(target) = encode_target(&tokenize_comment(&record.comment), vocab) else {
            skipped += 1;
            continue;
        };
        let Ok(code_ids) = model.code_ids(&record.code) else {
            skipped += 1;
            continue;
        };
        examples.push(Example { code_ids, target });
    }
    Ok((examples, skipped))
}

/// Mean teacher-forced loss over `examples`, summed in input order.
pub fn validate(model: &Model, examples: &[Example]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let losses = examples
        .par_iter()
        .map(|e| model.loss(e))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Validation loss of `model` on a record split.
pub fn validation_loss(
    model: &Model,
    vocab: &Vocabulary,
    split: &ValidationSplit,
) -> Result<f64, TrainError> {
    let (examples, _) = prepare_examples(split.records(), vocab, model)?;
    validate(model, &examples)
}

/// Per-example losses and the summed gradient of a batch.
fn batch_gradients(model: &Model, batch: &[&Example]) -> Result<(Vec<f64>, GradientMap), ModelError> {
    let chunks = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut losses = Vec::with_capacity(chunk.len());
            let mut sum = GradientMap::empty(model.params.len());
            for example in chunk {
                let (loss, grads) = model.loss_and_gradients(example)?;
                losses.push(loss);
                sum.accumulate(&grads)?;
            }
            Ok((losses, sum))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut total = GradientMap::empty(model.params.len());
    for (l, g) in chunks {
        losses.extend(l);
        total.accumulate(&g)?;
    }
    Ok((losses, total))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation loss seen.
    pub best: Checkpoint,
    /// Parameters after the last epoch or round.
    pub last: Model,
    pub history: Vec<HistoryRow>,
    /// Training records left out because they could not be encoded.
    pub skipped: usize,
}

/// Fits a freshly initialized model. `on_epoch` sees every history row as
/// it is produced.
pub fn train(
    train_split: &TrainSplit,
    validation_split: &ValidationSplit,
    vocab: &Vocabulary,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome, TrainError> {
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if validation_split.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if config.batch_size == 0 {
        return Err(TrainError::BatchSize);
    }
    let round_size = match config.schedule {
        Schedule::Epochs(_) => None,
        Schedule::Rounds {
            samples_per_round, ..
        } => Some(samples_per_round),
    };
    if config.schedule.is_empty() || round_size == Some(0) {
        return Err(TrainError::Schedule);
    }

    let mut model = Model::initialized(config.model, vocab.len(), config.seed)?;
    let (train_examples, skipped) = prepare_examples(train_split.records(), vocab, &model)?;
    let (mut val_examples, _) = prepare_examples(validation_split.records(), vocab, &model)?;
    if train_examples.is_empty() {
        return Err(TrainError::NothingEncodable("training"));
    }
    if val_examples.is_empty() {
        return Err(TrainError::NothingEncodable("validation"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    if let Schedule::Rounds {
        validation_samples, ..
    } = config.schedule
    {
        if validation_samples > 0 && validation_samples < val_examples.len() {
            val_examples.shuffle(&mut rng);
            val_examples.truncate(validation_samples);
        }
    }

    let mut adam = AdamState::new(config.optimizer, &model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(config.schedule.len());
    let mut best: Option<Checkpoint> = None;

    for position in 1..=config.schedule.len() {
        let samples = match round_size {
            None => {
                order = (0..train_examples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
                train_examples.len()
            }
            Some(n) => n,
        };
        let mut picked = Vec::with_capacity(samples);
        while picked.len() < samples {
            if cursor == order.len() {
                order = (0..train_examples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let mut loss_sum = 0.0;
        for batch_ids in picked.chunks(config.batch_size) {
            let batch: Vec<&Example> = batch_ids.iter().map(|&i| &train_examples[i]).collect();
            let (losses, mut grads) = batch_gradients(&model, &batch)?;
            loss_sum += losses.iter().sum::<f64>();
            let finite = losses.iter().all(|l| l.is_finite()) && grads.is_finite();
            if finite {
                grads.scale(1.0 / batch.len() as f32);
                grads.clip_global_norm(config.clip_norm);
                adam.step(&mut model.params, &grads)?;
            }
            if !finite || !all_finite(&model.params) {
                let last_good = match best.take() {
                    Some(cp) => cp,
                    None => Checkpoint::from_model(
                        Model::initialized(config.model, vocab.len(), config.seed)?,
                        config,
                        vocab,
                        0,
                        None,
                    ),
                };
                return Err(TrainError::Diverged {
                    position,
                    step: adam.step_count(),
                    last_good: Box::new(last_good),
                });
            }
        }

        let val_loss = validate(&model, &val_examples)?;
        let row = HistoryRow {
            epoch: position,
            train_loss: loss_sum / picked.len() as f64,
            val_loss,
        };
        on_epoch(&row);
        history.push(row);
        let improved = best
            .as_ref()
            .and_then(|b| b.manifest.validation_loss)
            .is_none_or(|b| val_loss < b);
        if improved {
            best = Some(Checkpoint::from_model(
                model.clone(),
                config,
                vocab,
                position,
                Some(val_loss),
            ));
        }
    }

    Ok(TrainOutcome {
        best: best.expect("at least one validation ran"),
        last: model,
        history,
        skipped,
    })
}

fn all_finite(params: &ParamSet) -> bool {
    params.iter().all(|(_, p)| p.tensor.is_finite())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_fingerprint: String,
    pub vocab_size: usize,
    /// Epoch or round the parameters were taken after; 0 before training.
    pub position: usize,
    pub validation_loss: Option<f64>,
    pub seed: u64,
    /// Parameter layout of the blob, in storage order.
    pub parameters: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

impl Checkpoint {
    pub fn from_model(
        model: Model,
        config: &TrainConfig,
        vocab: &Vocabulary,
        position: usize,
        validation_loss: Option<f64>,
    ) -> Self {
        let parameters = model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: model.config,
            train: *config,
            vocab_fingerprint: vocab.fingerprint().to_owned(),
            vocab_size: vocab.len(),
            position,
            validation_loss,
            seed: config.seed,
            parameters,
        };
        Self { manifest, model }
    }

    /// Writes `manifest.json`, `params.bin`, and `vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path, vocab: &Vocabulary) -> Result<(), CheckpointError> {
        check_vocab(&self.manifest, vocab)?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join(PARAMS_FILE), encode_params(&self.model.params))?;
        vocab.save(&dir.join(VOCAB_FILE))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    /// Loads a checkpoint that must have been trained with `vocab`.
    pub fn load(dir: &Path, vocab: &Vocabulary) -> Result<Self, CheckpointError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        check_vocab(&manifest, vocab)?;
        let mut model = Model::zeros(manifest.model, manifest.vocab_size)?;
        let layout: Vec<ParamEntry> = model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect();
        if layout != manifest.parameters {
            return Err(CheckpointError::Format(
                "parameter list does not match the model configuration".into(),
            ));
        }
        decode_params(&fs::read(dir.join(PARAMS_FILE))?, &mut model.params)?;
        Ok(Self { manifest, model })
    }

    /// Loads the vocabulary stored next to the checkpoint, then the
    /// checkpoint itself.
    pub fn load_dir(dir: &Path) -> Result<(Self, Vocabulary), CheckpointError> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let checkpoint = Self::load(dir, &vocab)?;
        Ok((checkpoint, vocab))
    }
}

fn check_vocab(manifest: &Manifest, vocab: &Vocabulary) -> Result<(), CheckpointError> {
    if manifest.vocab_fingerprint != vocab.fingerprint() || manifest.vocab_size != vocab.len() {
        return Err(CheckpointError::Compatibility {
            expected: manifest.vocab_fingerprint.clone(),
            found: vocab.fingerprint().to_owned(),
        });
    }
    Ok(())
}

/// Little-endian f32 values of every parameter in order, then the payload
/// length as u64 and its CRC-32 as u32, both little-endian.
pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.total_numel() * 4 + 12);
    for (_, p) in params.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&(out.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Fills `params` from a blob written by [`encode_params`]. Nothing is
/// modified unless the whole blob checks out.
pub fn decode_params(blob: &[u8], params: &mut ParamSet) -> Result<(), CheckpointError> {
    let bad = |m: String| CheckpointError::Format(m);
    if blob.len() < 12 {
        return Err(bad(format!("parameter file has only {} bytes", blob.len())));
    }
    let (payload, trailer) = blob.split_at(blob.len() - 12);
    let stated_len = u64::from_le_bytes(trailer[..8].try_into().expect("8 bytes"));
    let stated_crc = u32::from_le_bytes(trailer[8..].try_into().expect("4 bytes"));
    if stated_len != payload.len() as u64 {
        return Err(bad(format!(
            "payload is {} bytes, trailer says {stated_len}",
            payload.len()
        )));
    }
    if crc32fast::hash(payload) != stated_crc {
        return Err(bad("checksum mismatch".into()));
    }
    let expected = params.total_numel() * 4;
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, model needs {expected}",
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let tensors = params
        .iter()
        .map(|(_, p)| {
            let data: Vec<f32> = values.by_ref().take(p.tensor.numel()).collect();
            crate::numerics::Tensor::new(p.tensor.shape().to_vec(), data)
                .map_err(|e| bad(format!("parameter {}: {e}", p.name)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    params
        .assign(tensors)
        .map_err(|e| bad(e.to_string()))
}
