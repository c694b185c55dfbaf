//! Character-level convolutional encoder: byte embeddings, two valid 1-D
//! convolutions with ReLU, sum-over-time pooling, and a dense projection to
//! the thought vector.

use serde::{Deserialize, Serialize};

use crate::numerics::{self, NumericsError, ParamId, ParamSet, Tape, Tensor, Var};

/// Id used to pad inputs shorter than the receptive field.
pub const PAD_BYTE: usize = 256;
/// Rows in the byte embedding table: every byte value plus padding.
pub const BYTE_TABLE_ROWS: usize = 257;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("code is empty")]
    EmptyCode,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub conv1_width: usize,
    pub conv1_filters: usize,
    pub conv2_width: usize,
    pub conv2_filters: usize,
    /// Thought-vector size; must equal the decoder's hidden size.
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            conv1_width: 3,
            conv1_filters: 64,
            conv2_width: 3,
            conv2_filters: 128,
            output_dim: 1024,
        }
    }
}

impl EncoderConfig {
    /// Shortest input that yields at least one pooled position.
    pub fn receptive_field(&self) -> usize {
        self.conv1_width + self.conv2_width - 1
    }
}

/// Raw UTF-8 bytes of `code`, right-padded with [`PAD_BYTE`] up to `min_len`.
pub fn code_to_ids(code: &str, min_len: usize) -> Result<Vec<usize>, EncoderError> {
    if code.is_empty() {
        return Err(EncoderError::EmptyCode);
    }
    let mut ids: Vec<usize> = code.bytes().map(usize::from).collect();
    if ids.len() < min_len {
        ids.resize(min_len, PAD_BYTE);
    }
    Ok(ids)
}

/// Fixed-size encoding of one code fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct ThoughtVector(Tensor);

impl ThoughtVector {
    pub fn new(values: Tensor) -> Result<Self, NumericsError> {
        if values.rank() != 1 {
            return Err(NumericsError::Shape(format!(
                "thought vector must be rank 1, got {:?}",
                values.shape()
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.numel()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn values(&self) -> &[f32] {
        self.0.data()
    }
}

/// Handles of the encoder's tensors inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub byte_embedding: ParamId,
    pub conv1_filters: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_filters: ParamId,
    pub conv2_bias: ParamId,
    pub projection: ParamId,
    pub projection_bias: ParamId,
}

impl EncoderParams {
    /// Registers zero-initialized tensors under `encoder.*` names.
    pub fn register(config: EncoderConfig, params: &mut ParamSet) -> Self {
        let c = config;
        Self {
            config,
            byte_embedding: params.register(
                "encoder.byte_embedding",
                Tensor::zeros(&[BYTE_TABLE_ROWS, c.embed_dim]),
            ),
            conv1_filters: params.register(
                "encoder.conv1.filters",
                Tensor::zeros(&[c.conv1_width, c.embed_dim, c.conv1_filters]),
            ),
            conv1_bias: params.register("encoder.conv1.bias", Tensor::zeros(&[c.conv1_filters])),
            conv2_filters: params.register(
                "encoder.conv2.filters",
                Tensor::zeros(&[c.conv2_width, c.conv1_filters, c.conv2_filters]),
            ),
            conv2_bias: params.register("encoder.conv2.bias", Tensor::zeros(&[c.conv2_filters])),
            projection: params.register(
                "encoder.projection.weight",
                Tensor::zeros(&[c.conv2_filters, c.output_dim]),
            ),
            projection_bias: params.register(
                "encoder.projection.bias",
                Tensor::zeros(&[c.output_dim]),
            ),
        }
    }

    /// Pads `ids` to the receptive field if needed.
    fn padded<'a>(&self, ids: &'a [usize]) -> std::borrow::Cow<'a, [usize]> {
        let min = self.config.receptive_field();
        if ids.len() >= min {
            ids.into()
        } else {
            let mut v = ids.to_vec();
            v.resize(min, PAD_BYTE);
            v.into()
        }
    }

    /// Records the forward pass on `tape` and returns the thought vector.
    pub fn encode_on_tape(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var, EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptyCode);
        }
        let ids = self.padded(ids);
        let table = tape.param(self.byte_embedding);
        let x = tape.embed(table, &ids)?;
        let (f1, b1) = (tape.param(self.conv1_filters), tape.param(self.conv1_bias));
        let x = tape.conv1d(x, f1, b1)?;
        let x = tape.relu(x)?;
        let (f2, b2) = (tape.param(self.conv2_filters), tape.param(self.conv2_bias));
        let x = tape.conv1d(x, f2, b2)?;
        let x = tape.relu(x)?;
        let pooled = tape.sum_pool(x)?;
        let (w, b) = (tape.param(self.projection), tape.param(self.projection_bias));
        Ok(tape.dense(pooled, w, b)?)
    }

    /// Forward pass without recording gradients.
    pub fn encode(&self, params: &ParamSet, ids: &[usize]) -> Result<ThoughtVector, EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptyCode);
        }
        let ids = self.padded(ids);
        let x = numerics::embed_lookup(params.get(self.byte_embedding), &ids)?;
        let x = numerics::conv1d(&x, params.get(self.conv1_filters), params.get(self.conv1_bias))?;
        let x = numerics::relu(&x);
        let x = numerics::conv1d(&x, params.get(self.conv2_filters), params.get(self.conv2_bias))?;
        let x = numerics::relu(&x);
        let pooled = numerics::sum_over_time_pool(&x)?;
        let out = numerics::dense(
            &pooled,
            params.get(self.projection),
            params.get(self.projection_bias),
        )?;
        Ok(ThoughtVector::new(out)?)
    }

    pub fn encode_code(&self, params: &ParamSet, code: &str) -> Result<ThoughtVector, EncoderError> {
        self.encode(params, &code_to_ids(code, self.config.receptive_field())?)
    }
}
