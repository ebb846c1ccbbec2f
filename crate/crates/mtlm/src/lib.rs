//! Desk-scale toolkit for multi-task language modeling and n-best rescoring.
//!
//! A shared LSTM backbone feeds three heads: next-word prediction, intent
//! classification, and per-token slot filling. Training can weight the three
//! losses by hand, ramp them linearly, or adapt them online with a
//! randomized weighted-majority rule driven by loss trends. The trained
//! language model rescores n-best hypothesis lists from a simulated
//! first-pass recognizer, and everything runs on synthetic voice-assistant
//! style data generated from a seeded grammar.
//!
//! Every capability has a runnable example under `examples/`; the `mtlm`
//! binary exposes the same flows as subcommands (`gen-data`, `train`,
//! `finetune`, `rescore`, `tune-lambda`, `eval`).

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod rescore;
pub mod train;
pub mod params;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{EncoderVariant, Model, ModelConfig};
pub use vocab::{TokenSequence, Vocabulary};
