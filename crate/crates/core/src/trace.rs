// SPDX-License-Identifier: Apache-2.0

//! In-memory trace types: metadata, the attention tensor, per-token records
//! and the optional bundle of stochastic samples.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

/// Header of one generation.
///
/// `input_tokens` is the prompt length `m`, `generated_tokens` is `T`, and
/// `total_tokens` must equal `m + T`. The generated token `t` (1-based) lives
/// at absolute row `m + t - 1` of every attention matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub trace_id: String,
    pub model_id: String,
    pub input_tokens: usize,
    pub generated_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub total_tokens: usize,
    pub decode_mode: DecodeMode,
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Which hidden layer/token the sample embeddings were taken from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_source: Option<String>,
}

impl TraceMeta {
    /// Absolute (0-based) row index of generated token `t` (1-based).
    pub fn row_of(&self, t: usize) -> usize {
        self.input_tokens + t - 1
    }
}

/// Dense `[L][H][N][N]` attention, row-major, zero above the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    n: usize,
    values: Vec<f32>,
}

impl AttentionTensor {
    /// Wraps a flat buffer. Returns `None` when the length does not match the
    /// declared shape.
    pub fn from_vec(layers: usize, heads: usize, n: usize, values: Vec<f32>) -> Option<Self> {
        if values.len() != layers * heads * n * n {
            return None;
        }
        Some(Self {
            layers,
            heads,
            n,
            values,
        })
    }

    pub fn zeros(layers: usize, heads: usize, n: usize) -> Self {
        Self {
            layers,
            heads,
            n,
            values: vec![0.0; layers * heads * n * n],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.layers, self.heads, self.n, self.n]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }

    fn offset(&self, layer: usize, head: usize, row: usize) -> usize {
        ((layer * self.heads + head) * self.n + row) * self.n
    }

    pub fn get(&self, layer: usize, head: usize, row: usize, col: usize) -> f32 {
        self.values[self.offset(layer, head, row) + col]
    }

    pub fn set(&mut self, layer: usize, head: usize, row: usize, col: usize, value: f32) {
        let at = self.offset(layer, head, row) + col;
        self.values[at] = value;
    }

    /// Full row `row` of matrix `(layer, head)`, including the zero tail.
    pub fn row(&self, layer: usize, head: usize, row: usize) -> &[f32] {
        let at = self.offset(layer, head, row);
        &self.values[at..at + self.n]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, row: usize) -> &mut [f32] {
        let at = self.offset(layer, head, row);
        &mut self.values[at..at + self.n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenRecord {
    /// Probability of the emitted token, in `(0, 1]`.
    pub prob: f32,
    /// Full-vocabulary entropy of the step distribution in nats, when recorded.
    pub step_entropy: Option<f32>,
    pub token_id: i32,
}

/// `S` stochastic generations for the same prompt as a greedy trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    pub trace_id: String,
    pub lengths: Vec<i32>,
    pub sum_logprob: Vec<f32>,
    pub embeddings: Option<Embeddings>,
    /// `S x S` row-major, entries 0 or 1.
    pub entailment: Option<Vec<f32>>,
    pub cluster_labels: Option<Vec<i32>>,
}

impl SampleBundle {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn entails(&self, a: usize, b: usize) -> Option<bool> {
        let s = self.len();
        self.entailment.as_ref().map(|e| e[a * s + b] == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    /// `S x dim` row-major.
    pub values: Vec<f32>,
}

impl Embeddings {
    pub fn row(&self, s: usize) -> &[f32] {
        &self.values[s * self.dim..(s + 1) * self.dim]
    }

    pub fn count(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }
}

/// One prompt + greedy generation: the unit every detector scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub meta: TraceMeta,
    pub attention: AttentionTensor,
    pub tokens: Vec<TokenRecord>,
    pub bundle: Option<SampleBundle>,
}

impl GenerationTrace {
    pub fn id(&self) -> &str {
        &self.meta.trace_id
    }

    pub fn has_entropies(&self) -> bool {
        !self.tokens.is_empty() && self.tokens.iter().all(|t| t.step_entropy.is_some())
    }
}
