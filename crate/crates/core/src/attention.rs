// SPDX-License-Identifier: Apache-2.0

//! Per-token attention statistics `a_t^l` under each token aggregation and
//! head aggregation, including residual-mixed attention rollout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rauq::HeadSelection;
use crate::trace::GenerationTrace;

/// Which past columns of a generated token's row are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenAgg {
    /// The immediately preceding token only.
    PrevToken,
    /// Every column strictly before the current token, input included.
    AllPast,
    /// The `m` prompt columns.
    InputTokens,
}

impl TokenAgg {
    pub const ALL: [TokenAgg; 3] = [TokenAgg::PrevToken, TokenAgg::AllPast, TokenAgg::InputTokens];

    pub fn slug(&self) -> &'static str {
        match self {
            TokenAgg::PrevToken => "prev",
            TokenAgg::AllPast => "all",
            TokenAgg::InputTokens => "input",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.slug() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAgg {
    SelectedHead,
    MeanHeads,
    Rollout,
}

impl HeadAgg {
    pub const ALL: [HeadAgg; 3] = [HeadAgg::SelectedHead, HeadAgg::MeanHeads, HeadAgg::Rollout];

    pub fn slug(&self) -> &'static str {
        match self {
            HeadAgg::SelectedHead => "sel",
            HeadAgg::MeanHeads => "meanheads",
            HeadAgg::Rollout => "rollout",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.slug() == s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("generated token index {t} out of range 1..={max}")]
    TokenOutOfRange { t: usize, max: usize },
    #[error("layer {layer} / head {head} out of range")]
    IndexOutOfRange { layer: usize, head: usize },
    #[error("selected-head aggregation needs a head selection")]
    MissingSelection,
    #[error("head selection covers {got} layers, trace has {want}")]
    SelectionShape { got: usize, want: usize },
    #[error("rollout with input-token aggregation is experimental and disabled")]
    ExperimentalDisabled,
}

/// Statistic of one attention row (widened to f64) for the generated token
/// at absolute position `abs`.
fn row_stat(row: &[f64], m: usize, abs: usize, agg: TokenAgg) -> f64 {
    match agg {
        TokenAgg::PrevToken => row[abs - 1],
        TokenAgg::AllPast => row[..abs].iter().sum::<f64>() / abs as f64,
        TokenAgg::InputTokens => row[..m].iter().sum::<f64>() / m as f64,
    }
}

fn stat_from_row(row: &[f32], m: usize, abs: usize, agg: TokenAgg) -> f64 {
    let wide: Vec<f64> = row[..=abs].iter().map(|&v| v as f64).collect();
    row_stat(&wide, m, abs, agg)
}

/// `a_t^{l,h}` for generated token `t` (1-based).
pub fn token_stat(
    trace: &GenerationTrace,
    layer: usize,
    head: usize,
    t: usize,
    agg: TokenAgg,
) -> Result<f64, AttentionError> {
    let meta = &trace.meta;
    if t == 0 || t > meta.generated_tokens {
        return Err(AttentionError::TokenOutOfRange {
            t,
            max: meta.generated_tokens,
        });
    }
    if layer >= meta.layers || head >= meta.heads {
        return Err(AttentionError::IndexOutOfRange { layer, head });
    }
    let abs = meta.row_of(t);
    let row = trace.attention.row(layer, head, abs);
    Ok(stat_from_row(row, meta.input_tokens, abs, agg))
}

/// Per-head statistics `[H][T]` for one layer.
pub fn layer_head_stats(trace: &GenerationTrace, layer: usize, agg: TokenAgg) -> Vec<Vec<f64>> {
    let meta = &trace.meta;
    (0..meta.heads)
        .map(|h| {
            (1..=meta.generated_tokens)
                .map(|t| {
                    let abs = meta.row_of(t);
                    stat_from_row(trace.attention.row(layer, h, abs), meta.input_tokens, abs, agg)
                })
                .collect()
        })
        .collect()
}

/// Head-aggregated statistic `a_t^l`, `[L][T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnStat {
    pub values: Vec<Vec<f64>>,
    /// Chosen head per layer, for selected-head aggregation.
    pub heads: Option<Vec<usize>>,
}

/// Rollout matrices `R^(l)`, each `N x N` row-major in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutCache {
    pub n: usize,
    pub matrices: Vec<Vec<f64>>,
}

impl RolloutCache {
    pub fn get(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.matrices[layer][row * self.n + col]
    }

    pub fn row(&self, layer: usize, row: usize) -> &[f64] {
        &self.matrices[layer][row * self.n..(row + 1) * self.n]
    }
}

/// Residual-mixed head mean `½(ω + I)` for one layer.
fn mixed_head_mean(trace: &GenerationTrace, layer: usize) -> Vec<f64> {
    let n = trace.meta.total_tokens;
    let heads = trace.meta.heads;
    let mut out = vec![0.0f64; n * n];
    for h in 0..heads {
        for i in 0..n {
            let row = trace.attention.row(layer, h, i);
            for j in 0..=i {
                out[i * n + j] += row[j] as f64;
            }
        }
    }
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = 0.5 * (out[i * n + j] / heads as f64);
        }
        out[i * n + i] += 0.5;
    }
    out
}

/// `a * b` for lower-triangular `n x n` matrices.
fn lower_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for k in 0..=i {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..k * n + k + 1];
            for (j, &bkj) in brow.iter().enumerate() {
                row[j] += aik * bkj;
            }
        }
    });
    out
}

pub fn build_rollout(trace: &GenerationTrace) -> RolloutCache {
    let n = trace.meta.total_tokens;
    let mut matrices: Vec<Vec<f64>> = Vec::with_capacity(trace.meta.layers);
    for layer in 0..trace.meta.layers {
        let mixed = mixed_head_mean(trace, layer);
        let next = match matrices.last() {
            None => mixed,
            Some(prev) => lower_matmul(&mixed, prev, n),
        };
        matrices.push(next);
    }
    RolloutCache { n, matrices }
}

/// Computes `a_t^l` for every layer and generated token.
///
/// `selection` is required for [`HeadAgg::SelectedHead`]; rollout with
/// input-token aggregation additionally needs `experimental`.
pub fn head_aggregate(
    trace: &GenerationTrace,
    token_agg: TokenAgg,
    head_agg: HeadAgg,
    selection: Option<&HeadSelection>,
    experimental: bool,
) -> Result<AttnStat, AttentionError> {
    let meta = &trace.meta;
    match head_agg {
        HeadAgg::SelectedHead => {
            let sel = selection.ok_or(AttentionError::MissingSelection)?;
            if sel.heads.len() != meta.layers {
                return Err(AttentionError::SelectionShape {
                    got: sel.heads.len(),
                    want: meta.layers,
                });
            }
            let values = sel
                .heads
                .iter()
                .enumerate()
                .map(|(l, &h)| {
                    if h >= meta.heads {
                        return Err(AttentionError::IndexOutOfRange { layer: l, head: h });
                    }
                    (1..=meta.generated_tokens)
                        .map(|t| token_stat(trace, l, h, t, token_agg))
                        .collect()
                })
                .collect::<Result<_, _>>()?;
            Ok(AttnStat {
                values,
                heads: Some(sel.heads.clone()),
            })
        }
        HeadAgg::MeanHeads => {
            // Rows are averaged before the statistic; since every statistic
            // is linear in the row this equals the mean of per-head values.
            let heads = meta.heads as f64;
            let m = meta.input_tokens;
            let values = (0..meta.layers)
                .map(|l| {
                    (1..=meta.generated_tokens)
                        .map(|t| {
                            let abs = meta.row_of(t);
                            let mut mean = vec![0.0f64; abs + 1];
                            for h in 0..meta.heads {
                                let row = trace.attention.row(l, h, abs);
                                for (acc, &v) in mean.iter_mut().zip(row) {
                                    *acc += v as f64;
                                }
                            }
                            mean.iter_mut().for_each(|v| *v /= heads);
                            row_stat(&mean, m, abs, token_agg)
                        })
                        .collect()
                })
                .collect();
            Ok(AttnStat { values, heads: None })
        }
        HeadAgg::Rollout => {
            if token_agg == TokenAgg::InputTokens && !experimental {
                return Err(AttentionError::ExperimentalDisabled);
            }
            let cache = build_rollout(trace);
            let m = meta.input_tokens;
            let values = (0..meta.layers)
                .map(|l| {
                    (1..=meta.generated_tokens)
                        .map(|t| {
                            let abs = meta.row_of(t);
                            row_stat(cache.row(l, abs), m, abs, token_agg)
                        })
                        .collect()
                })
                .collect();
            Ok(AttnStat { values, heads: None })
        }
    }
}
