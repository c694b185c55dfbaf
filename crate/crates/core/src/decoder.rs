//! LSTM language model over the output vocabulary. Its first layer starts
//! from the thought vector; training uses teacher forcing and inference uses
//! beam search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::codec::TargetEncoding;
use crate::encoder::ThoughtVector;
use crate::numerics::{self, LstmWeights, NumericsError, ParamId, ParamSet, Tape, Tensor, Var};
use crate::vocab::Special;

pub const MAX_LAYERS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("target needs at least START and END, got {0} ids")]
    ShortTarget(usize),
    #[error("token id {id} is outside a vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("decoder needs 1 to {MAX_LAYERS} layers, got {0}")]
    LayerCount(usize),
    #[error("thought vector has {got} values, decoder hidden size is {hidden}")]
    ThoughtSize { got: usize, hidden: usize },
    #[error("invalid beam configuration: {0}")]
    Beam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            layers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmLayerParams {
    pub input_weight: ParamId,
    pub recurrent_weight: ParamId,
    pub bias: ParamId,
}

/// Handles of the decoder's tensors inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    pub token_embedding: ParamId,
    pub layers: Vec<LstmLayerParams>,
    pub projection: ParamId,
    pub projection_bias: ParamId,
}

/// Per-layer `(h, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl DecoderParams {
    /// Registers zero-initialized tensors under `decoder.*` names.
    pub fn register(
        config: DecoderConfig,
        vocab_size: usize,
        params: &mut ParamSet,
    ) -> Result<Self, DecoderError> {
        if !(1..=MAX_LAYERS).contains(&config.layers) {
            return Err(DecoderError::LayerCount(config.layers));
        }
        let h = config.hidden;
        let token_embedding =
            params.register("decoder.token_embedding", Tensor::zeros(&[vocab_size, h]));
        let layers = (0..config.layers)
            .map(|l| LstmLayerParams {
                input_weight: params
                    .register(format!("decoder.lstm{l}.input_weight"), Tensor::zeros(&[h, 4 * h])),
                recurrent_weight: params.register(
                    format!("decoder.lstm{l}.recurrent_weight"),
                    Tensor::zeros(&[h, 4 * h]),
                ),
                bias: params.register(format!("decoder.lstm{l}.bias"), Tensor::zeros(&[4 * h])),
            })
            .collect();
        let projection =
            params.register("decoder.projection.weight", Tensor::zeros(&[h, vocab_size]));
        let projection_bias =
            params.register("decoder.projection.bias", Tensor::zeros(&[vocab_size]));
        Ok(Self {
            config,
            vocab_size,
            token_embedding,
            layers,
            projection,
            projection_bias,
        })
    }

    fn check_token(&self, id: usize) -> Result<(), DecoderError> {
        if id >= self.vocab_size {
            return Err(DecoderError::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Layer 0 gets the thought vector as its hidden state; everything else
    /// starts at zero.
    pub fn initial_state(&self, thought: &ThoughtVector) -> Result<DecoderState, DecoderError> {
        let h = self.config.hidden;
        if thought.dim() != h {
            return Err(DecoderError::ThoughtSize {
                got: thought.dim(),
                hidden: h,
            });
        }
        let layers = (0..self.layers.len())
            .map(|l| {
                let hidden = if l == 0 {
                    thought.as_tensor().clone()
                } else {
                    Tensor::zeros(&[h])
                };
                (hidden, Tensor::zeros(&[h]))
            })
            .collect();
        Ok(DecoderState { layers })
    }

    /// Log-probabilities of the next token after `prev_token`, and the
    /// advanced state.
    pub fn step_log_probs(
        &self,
        params: &ParamSet,
        prev_token: usize,
        state: &DecoderState,
    ) -> Result<(Vec<f64>, DecoderState), DecoderError> {
        self.check_token(prev_token)?;
        let table = params.get(self.token_embedding);
        let mut x = Tensor::vector(table.row(prev_token).to_vec())?;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, (h, c)) in self.layers.iter().zip(&state.layers) {
            let weights = LstmWeights {
                input: params.get(layer.input_weight),
                recurrent: params.get(layer.recurrent_weight),
                bias: params.get(layer.bias),
            };
            let (h_new, c_new) = numerics::lstm_cell_step(&x, h, c, &weights)?;
            x = h_new.clone();
            next.push((h_new, c_new));
        }
        let logits = numerics::dense(
            &x,
            params.get(self.projection),
            params.get(self.projection_bias),
        )?;
        Ok((numerics::log_softmax(logits.data()), DecoderState { layers: next }))
    }

    /// Probability distribution over the next token.
    pub fn decoder_step(
        &self,
        params: &ParamSet,
        prev_token: usize,
        state: &DecoderState,
    ) -> Result<(Vec<f64>, DecoderState), DecoderError> {
        let (log_probs, state) = self.step_log_probs(params, prev_token, state)?;
        Ok((log_probs.into_iter().map(f64::exp).collect(), state))
    }

    /// Mean cross-entropy of predicting `target[t + 1]` from `target[t]`,
    /// feeding the true previous token at every step.
    pub fn teacher_forced_loss(
        &self,
        tape: &mut Tape<'_>,
        thought: Var,
        target: &TargetEncoding,
    ) -> Result<Var, DecoderError> {
        let ids = target.ids();
        if ids.len() < 2 {
            return Err(DecoderError::ShortTarget(ids.len()));
        }
        for &id in ids {
            self.check_token(id)?;
        }
        let h = self.config.hidden;
        let got = tape.value(thought).numel();
        if got != h {
            return Err(DecoderError::ThoughtSize { got, hidden: h });
        }
        let steps = ids.len() - 1;
        let table = tape.param(self.token_embedding);
        let inputs = tape.embed(table, &ids[..steps])?;
        let layer_vars: Vec<(Var, Var, Var)> = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.param(l.input_weight),
                    tape.param(l.recurrent_weight),
                    tape.param(l.bias),
                )
            })
            .collect();
        let (proj, proj_bias) = (tape.param(self.projection), tape.param(self.projection_bias));

        let mut state: Vec<(Var, Var)> = (0..self.layers.len())
            .map(|l| {
                let hidden = if l == 0 {
                    thought
                } else {
                    tape.input(Tensor::zeros(&[h]))
                };
                (hidden, tape.input(Tensor::zeros(&[h])))
            })
            .collect();

        let mut losses = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = tape.slice(inputs, t * h, h)?;
            for (s, &(w_x, w_h, b)) in state.iter_mut().zip(&layer_vars) {
                let (h_new, c_new) = tape.lstm_cell(x, s.0, s.1, w_x, w_h, b)?;
                *s = (h_new, c_new);
                x = h_new;
            }
            let logits = tape.dense(x, proj, proj_bias)?;
            losses.push(tape.softmax_cross_entropy(logits, ids[t + 1])?);
        }
        Ok(tape.mean(&losses)?)
    }

    pub fn beam_search(
        &self,
        params: &ParamSet,
        thought: &ThoughtVector,
        config: &BeamConfig,
    ) -> Result<BeamOutcome, DecoderError> {
        config.validate()?;
        let end = Special::End as usize;
        let start = Special::Start as usize;
        self.check_token(end)?;

        let mut live = vec![BeamHypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            state: self.initial_state(thought)?,
            finished: false,
        }];
        let mut finished: Vec<BeamHypothesis> = Vec::new();
        let mut trace = Vec::new();

        for step in 0..config.max_len {
            let mut candidates: Vec<Candidate> = Vec::new();
            let mut next_states = Vec::with_capacity(live.len());
            for (parent, hyp) in live.iter().enumerate() {
                let prev = hyp.tokens.last().copied().unwrap_or(start);
                let (log_probs, state) = self.step_log_probs(params, prev, &hyp.state)?;
                next_states.push(state);
                candidates.extend(log_probs.iter().enumerate().map(|(token, lp)| Candidate {
                    score: hyp.log_prob + lp,
                    token,
                    parent,
                }));
            }
            candidates.sort_by(Candidate::rank);
            candidates.truncate(config.width);

            let last_step = step + 1 == config.max_len;
            let mut survivors = Vec::with_capacity(candidates.len());
            let mut next_live = Vec::new();
            for cand in candidates {
                let mut tokens = live[cand.parent].tokens.clone();
                tokens.push(cand.token);
                survivors.push(BeamSurvivor {
                    tokens: tokens.clone(),
                    log_prob: cand.score,
                    parent: cand.parent,
                });
                let done = cand.token == end || last_step;
                let hyp = BeamHypothesis {
                    tokens,
                    log_prob: cand.score,
                    state: next_states[cand.parent].clone(),
                    finished: done,
                };
                if done {
                    finished.push(hyp);
                } else {
                    next_live.push(hyp);
                }
            }
            trace.push(survivors);
            live = next_live;

            // Scores only decrease as hypotheses grow, so no live hypothesis
            // can overtake a finished one that already scores at least as high.
            let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if live.is_empty() || best_finished >= best_live {
                break;
            }
        }

        let best = finished
            .into_iter()
            .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
            .expect("the first step always yields a hypothesis");
        let mut tokens = best.tokens;
        if tokens.last() == Some(&end) {
            tokens.pop();
        }
        Ok(BeamOutcome {
            tokens,
            log_prob: best.log_prob,
            trace,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub width: usize,
    /// Upper bound on generated tokens, counting the closing `END`.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 2,
            max_len: 50,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.width == 0 {
            return Err(DecoderError::Beam("width must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(DecoderError::Beam("max length must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids, excluding `START`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: DecoderState,
    pub finished: bool,
}

/// One hypothesis kept after a search step.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamSurvivor {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Index of the extended hypothesis among the previous step's live ones.
    pub parent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutcome {
    /// Best hypothesis without `START` or `END`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Survivors of every step, best first.
    pub trace: Vec<Vec<BeamSurvivor>>,
}

struct Candidate {
    score: f64,
    token: usize,
    parent: usize,
}

impl Candidate {
    /// Higher score first; ties go to the lower token id, then the earlier
    /// parent.
    fn rank(a: &Self, b: &Self) -> Ordering {
        b.score
            .total_cmp(&a.score)
            .then(a.token.cmp(&b.token))
            .then(a.parent.cmp(&b.parent))
    }
}
