//! Source code summarization with a character-level convolutional encoder and
//! an open-vocabulary LSTM decoder.
//!
//! The pipeline: [`corpus`] filters code/comment pairs, [`vocab`] builds the
//! output vocabulary, [`codec`] turns comments into target id sequences,
//! [`encoder`] and [`decoder`] form the model, [`trainer`] fits and
//! checkpoints it, and [`metrics`] scores predictions.

pub mod codec;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod toy;
pub mod trainer;
pub mod vocab;
