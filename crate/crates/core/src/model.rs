//! The full encoder-decoder: parameter layout, initialization, per-example
//! loss, and prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_prediction, TargetEncoding};
use crate::decoder::{BeamConfig, BeamOutcome, DecoderConfig, DecoderError, DecoderParams};
use crate::encoder::{code_to_ids, EncoderConfig, EncoderError, EncoderParams};
use crate::numerics::{GradientMap, NumericsError, ParamSet, Tape};
use crate::vocab::Vocabulary;

pub const INIT_SCALE: f32 = 0.08;
pub const FORGET_BIAS: f32 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub char_embed_dim: usize,
    pub conv1_width: usize,
    pub conv1_filters: usize,
    pub conv2_width: usize,
    pub conv2_filters: usize,
    /// Thought-vector and LSTM size.
    pub hidden: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        Self {
            char_embed_dim: enc.embed_dim,
            conv1_width: enc.conv1_width,
            conv1_filters: enc.conv1_filters,
            conv2_width: enc.conv2_width,
            conv2_filters: enc.conv2_filters,
            hidden: dec.hidden,
            layers: dec.layers,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.char_embed_dim,
            conv1_width: self.conv1_width,
            conv1_filters: self.conv1_filters,
            conv2_width: self.conv2_width,
            conv2_filters: self.conv2_filters,
            output_dim: self.hidden,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            hidden: self.hidden,
            layers: self.layers,
        }
    }
}

/// One training pair in model form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub code_ids: Vec<usize>,
    pub target: TargetEncoding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Model {
    /// All parameters zero.
    pub fn zeros(config: ModelConfig, vocab_size: usize) -> Result<Self, ModelError> {
        let mut params = ParamSet::new();
        let encoder = EncoderParams::register(config.encoder(), &mut params);
        let decoder = DecoderParams::register(config.decoder(), vocab_size, &mut params)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    /// Weights uniform in `±INIT_SCALE`, biases zero except the LSTM forget
    /// gates, which start at `FORGET_BIAS`.
    pub fn initialized(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(config, vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in model.params.iter_mut() {
            if p.name.ends_with("bias") {
                continue;
            }
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-INIT_SCALE..INIT_SCALE);
            }
        }
        let h = config.hidden;
        for layer in &model.decoder.layers {
            model.params.get_mut(layer.bias).data_mut()[h..2 * h].fill(FORGET_BIAS);
        }
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size
    }

    pub fn code_ids(&self, code: &str) -> Result<Vec<usize>, ModelError> {
        Ok(code_to_ids(code, self.encoder.config.receptive_field())?)
    }

    /// Teacher-forced loss of one example, in nats per target token.
    pub fn loss(&self, example: &Example) -> Result<f64, ModelError> {
        let mut tape = Tape::new(&self.params);
        let thought = self.encoder.encode_on_tape(&mut tape, &example.code_ids)?;
        let loss = self.decoder.teacher_forced_loss(&mut tape, thought, &example.target)?;
        Ok(tape.scalar(loss))
    }

    /// Loss and parameter gradients of one example.
    pub fn loss_and_gradients(&self, example: &Example) -> Result<(f64, GradientMap), ModelError> {
        let mut tape = Tape::new(&self.params);
        let thought = self.encoder.encode_on_tape(&mut tape, &example.code_ids)?;
        let loss = self.decoder.teacher_forced_loss(&mut tape, thought, &example.target)?;
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), grads.into_params()))
    }

    pub fn beam_search(&self, code_ids: &[usize], beam: &BeamConfig) -> Result<BeamOutcome, ModelError> {
        let thought = self.encoder.encode(&self.params, code_ids)?;
        Ok(self.decoder.beam_search(&self.params, &thought, beam)?)
    }

    /// Decoded comment for `code`.
    pub fn predict(&self, code: &str, vocab: &Vocabulary, beam: &BeamConfig) -> Result<String, ModelError> {
        let outcome = self.beam_search(&self.code_ids(code)?, beam)?;
        Ok(decode_prediction(&outcome.tokens, vocab))
    }
}
