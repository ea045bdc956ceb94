// SPDX-License-Identifier: Apache-2.0

//! Uncertainty scoring over serialized LLM generation traces.
//!
//! Traces are stored in a binary container ([`container`]) and grouped into
//! corpora ([`corpus`]). Scorers turn a trace into a scalar where higher means
//! more uncertain: attention-aware recurrent confidence ([`rauq`]) and
//! probability or sampling baselines ([`baselines`]). [`metrics`] evaluates
//! scores against quality labels.

pub mod attention;
pub mod baselines;
pub mod container;
pub mod corpus;
pub mod metrics;
pub mod rauq;
pub mod registry;
pub mod report;
pub mod synth;
pub mod testing;
pub mod trace;

pub use container::{read_trace, write_trace, ContainerError};
pub use corpus::{Corpus, HalluType, LabeledExample};
pub use rauq::{RauqConfig, ScoreRecord};
pub use trace::{AttentionTensor, GenerationTrace, SampleBundle, TokenRecord, TraceMeta};
