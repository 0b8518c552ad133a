//! Desk-scale laboratory for iterative masked-prediction pretraining.
//!
//! The pipeline mirrors the HuBERT recipe: extract features, cluster them
//! into discrete pseudo-labels, pretrain a masked-prediction encoder on
//! those labels, then feed a chosen encoder layer back in as the teacher
//! for the next iteration. Everything runs on a deterministic synthetic
//! speech-like corpus so a full multi-iteration schedule finishes in
//! minutes on a laptop CPU.
//!
//! Module map:
//! - [`corpus`]: synthetic utterance generation, WAV ingest, manifests
//! - [`features`]: MFCC extraction and frame-level alignment labels
//! - [`clustering`]: streaming minibatch k-means codebooks
//! - [`encoder`]: transformer encoder with hand-written exact gradients
//! - [`training`]: Adam, LR schedule, gradient accumulation, one iteration
//! - [`scheduler`]: iteration plans (original / uniform / progressive /
//!   progressive-cluster) and the multi-iteration driver
//! - [`analysis`]: projection-weighted CCA and linear probes per layer
//! - [`probe_asr`]: CTC finetuning, greedy decoding, token error rate

pub mod analysis;
pub mod checkpoint;
pub mod clustering;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod features;
pub mod probe_asr;
pub mod rng;
pub mod runio;
pub mod scheduler;
pub mod tensorfile;
pub mod training;

pub use error::{Error, Result};
