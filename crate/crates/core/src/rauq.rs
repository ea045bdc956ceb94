// SPDX-License-Identifier: Apache-2.0

//! Recurrent attention-based uncertainty: head selection, the propagated
//! confidence recurrence, per-layer uncertainty and the max-over-layers score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionError, AttnStat, HeadAgg, TokenAgg};
use crate::metrics::{self, MetricError};
use crate::trace::GenerationTrace;

/// The α grid searched by [`tune_alpha`]: 0.1, 0.2, ..., 0.9.
pub fn alpha_grid() -> [f64; 9] {
    std::array::from_fn(|k| (k + 1) as f64 / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScope {
    /// Heads are chosen from the trace being scored.
    PerTrace,
    /// Heads are chosen once from a calibration set of traces.
    Calibrated,
}

/// Which per-token statistic drives head selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStat {
    /// Use the configured token aggregation.
    FollowAggregation,
    /// Always use predecessor attention.
    PrevToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// `c(y_1) = p_1`.
    FirstTokenProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RauqConfig {
    pub alpha: f64,
    pub token_agg: TokenAgg,
    pub head_agg: HeadAgg,
    /// Inclusive `[first, last]` layer indices; `None` means all layers.
    pub layer_range: Option<(usize, usize)>,
    pub selection_scope: SelectionScope,
    pub selection_stat: SelectionStat,
    pub epsilon: f64,
    pub init_rule: InitRule,
    /// Enables rollout with input-token aggregation.
    pub experimental: bool,
}

impl Default for RauqConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            token_agg: TokenAgg::PrevToken,
            head_agg: HeadAgg::SelectedHead,
            layer_range: None,
            selection_scope: SelectionScope::PerTrace,
            selection_stat: SelectionStat::FollowAggregation,
            epsilon: 1e-10,
            init_rule: InitRule::FirstTokenProb,
            experimental: false,
        }
    }
}

impl RauqConfig {
    pub fn with_variant(mut self, token_agg: TokenAgg, head_agg: HeadAgg) -> Self {
        self.token_agg = token_agg;
        self.head_agg = head_agg;
        self
    }

    pub fn method_id(&self) -> String {
        method_id(self.token_agg, self.head_agg)
    }

    fn check(&self) -> Result<(), RauqError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RauqError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(RauqError::Config("epsilon must be positive".into()));
        }
        if let Some((lo, hi)) = self.layer_range {
            if lo > hi {
                return Err(RauqError::Config(format!("empty layer range {lo}..={hi}")));
            }
        }
        Ok(())
    }

    fn selection_agg(&self) -> TokenAgg {
        match self.selection_stat {
            SelectionStat::FollowAggregation => self.token_agg,
            SelectionStat::PrevToken => TokenAgg::PrevToken,
        }
    }
}

/// Canonical id, `rauq.{sel|meanheads|rollout}.{prev|all|input}`.
pub fn method_id(token_agg: TokenAgg, head_agg: HeadAgg) -> String {
    format!("rauq.{}.{}", head_agg.slug(), token_agg.slug())
}

pub fn parse_method_id(id: &str) -> Option<(TokenAgg, HeadAgg)> {
    let mut parts = id.split('.');
    if parts.next()? != "rauq" {
        return None;
    }
    let head = HeadAgg::from_slug(parts.next()?)?;
    let token = TokenAgg::from_slug(parts.next()?)?;
    parts.next().is_none().then_some((token, head))
}

#[derive(Debug, Error, PartialEq)]
pub enum RauqError {
    #[error("head selection undefined: every trace has fewer than 2 generated tokens")]
    SelectionUndefined,
    #[error("head selection needs at least one trace")]
    NoTraces,
    #[error("traces disagree on layer/head counts")]
    ShapeMismatch,
    #[error("layer range {lo}..={hi} exceeds {layers} layers")]
    LayerRange { lo: usize, hi: usize, layers: usize },
    #[error("statistic has {got} tokens, trace has {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("calibrated selection scope needs a precomputed head selection")]
    MissingCalibration,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("alpha tuning undefined: {0}")]
    Tuning(#[from] MetricError),
}

/// Chosen head per layer, plus the per-head statistic it was chosen from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub heads: Vec<usize>,
    /// `[L][H]` mean statistic over `t = 2..T`.
    pub statistic: Vec<Vec<f64>>,
}

/// `[L][H]` mean of `a_t^{l,h}` over `t = 2..T`, or `None` if `T < 2`.
fn per_head_means(trace: &GenerationTrace, agg: TokenAgg) -> Option<Vec<Vec<f64>>> {
    let t = trace.meta.generated_tokens;
    if t < 2 {
        return None;
    }
    Some(
        (0..trace.meta.layers)
            .map(|l| {
                attention::layer_head_stats(trace, l, agg)
                    .into_iter()
                    .map(|stats| stats[1..].iter().sum::<f64>() / (t - 1) as f64)
                    .collect()
            })
            .collect(),
    )
}

/// Lowest index wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks the head per layer with the largest mean statistic over `t >= 2`.
///
/// With several traces the per-trace means are averaged first (calibrated
/// scope); traces with a single generated token are skipped.
pub fn select_heads(traces: &[&GenerationTrace], cfg: &RauqConfig) -> Result<HeadSelection, RauqError> {
    let first = traces.first().ok_or(RauqError::NoTraces)?;
    let (layers, heads) = (first.meta.layers, first.meta.heads);
    if traces.iter().any(|t| t.meta.layers != layers || t.meta.heads != heads) {
        return Err(RauqError::ShapeMismatch);
    }
    let agg = cfg.selection_agg();
    let per_trace: Vec<Vec<Vec<f64>>> = traces
        .par_iter()
        .filter_map(|t| per_head_means(t, agg))
        .collect();
    if per_trace.is_empty() {
        return Err(RauqError::SelectionUndefined);
    }
    let count = per_trace.len() as f64;
    let statistic: Vec<Vec<f64>> = (0..layers)
        .map(|l| {
            (0..heads)
                .map(|h| per_trace.iter().map(|s| s[l][h]).sum::<f64>() / count)
                .collect()
        })
        .collect();
    let heads = statistic.iter().map(|s| argmax(s)).collect();
    Ok(HeadSelection { heads, statistic })
}

/// `c_l(y_t)` per layer, `[L][T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSeries {
    pub values: Vec<Vec<f64>>,
}

/// Runs `c_l(y_1) = p_1`, `c_l(y_t) = α p_t + (1 - α) a_t^l c_l(y_{t-1})`.
pub fn confidence_series(
    trace: &GenerationTrace,
    cfg: &RauqConfig,
    stat: &AttnStat,
) -> Result<ConfidenceSeries, RauqError> {
    let probs: Vec<f64> = trace.tokens.iter().map(|t| t.prob as f64).collect();
    let alpha = cfg.alpha;
    let values = stat
        .values
        .iter()
        .map(|a| {
            if a.len() != probs.len() {
                return Err(RauqError::LengthMismatch {
                    got: a.len(),
                    want: probs.len(),
                });
            }
            let mut c = Vec::with_capacity(probs.len());
            let InitRule::FirstTokenProb = cfg.init_rule;
            let mut prev = probs[0];
            c.push(prev);
            for t in 1..probs.len() {
                prev = alpha * probs[t] + (1.0 - alpha) * a[t] * prev;
                c.push(prev);
            }
            Ok(c)
        })
        .collect::<Result<_, _>>()?;
    Ok(ConfidenceSeries { values })
}

/// `u = -(1/T) Σ_t ln max(c_t, ε)`.
pub fn layer_uncertainty(confidence: &[f64], epsilon: f64) -> f64 {
    let sum: f64 = confidence.iter().map(|&c| c.max(epsilon).ln()).sum();
    -sum / confidence.len() as f64
}

/// Output of any detector. Higher score means more uncertain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub trace_id: String,
    pub method_id: String,
    pub score: f64,
    /// Per-layer `u_l` for the layers in range (RAUQ only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_scores: Option<Vec<f64>>,
}

fn resolve_layers(cfg: &RauqConfig, layers: usize) -> Result<(usize, usize), RauqError> {
    match cfg.layer_range {
        None => Ok((0, layers - 1)),
        Some((lo, hi)) if hi < layers && lo <= hi => Ok((lo, hi)),
        Some((lo, hi)) => Err(RauqError::LayerRange { lo, hi, layers }),
    }
}

/// Scores one trace. `selection` is used for selected-head aggregation with
/// calibrated scope; with per-trace scope heads are chosen from `trace`.
pub fn rauq_score(
    trace: &GenerationTrace,
    cfg: &RauqConfig,
    selection: Option<&HeadSelection>,
) -> Result<ScoreRecord, RauqError> {
    cfg.check()?;
    let (lo, hi) = resolve_layers(cfg, trace.meta.layers)?;
    let own;
    let selection = match (cfg.head_agg, cfg.selection_scope, selection) {
        (HeadAgg::SelectedHead, SelectionScope::PerTrace, _) => {
            own = select_heads(&[trace], cfg)?;
            Some(&own)
        }
        (HeadAgg::SelectedHead, SelectionScope::Calibrated, None) => {
            return Err(RauqError::MissingCalibration)
        }
        (_, _, s) => s,
    };
    let stat = attention::head_aggregate(trace, cfg.token_agg, cfg.head_agg, selection, cfg.experimental)?;
    let series = confidence_series(trace, cfg, &stat)?;
    let layer_scores: Vec<f64> = series.values[lo..=hi]
        .iter()
        .map(|c| layer_uncertainty(c, cfg.epsilon))
        .collect();
    let score = layer_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoreRecord {
        trace_id: trace.meta.trace_id.clone(),
        method_id: cfg.method_id(),
        score,
        layer_scores: Some(layer_scores),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTuning {
    pub method_id: String,
    pub alpha: f64,
    /// `(alpha, auroc)` for each grid point, ascending in alpha.
    pub table: Vec<(f64, f64)>,
}

/// Grid-searches α over 0.1..=0.9 for the best AUROC on a labeled calibration
/// set (`true` = hallucination). Ties go to the smaller α.
pub fn tune_alpha(
    calibration: &[(&GenerationTrace, bool)],
    template: &RauqConfig,
) -> Result<AlphaTuning, RauqError> {
    let labels: Vec<bool> = calibration.iter().map(|(_, y)| *y).collect();
    metrics::check_two_classes(&labels)?;
    let selection = match (template.head_agg, template.selection_scope) {
        (HeadAgg::SelectedHead, SelectionScope::Calibrated) => {
            let traces: Vec<&GenerationTrace> = calibration.iter().map(|(t, _)| *t).collect();
            Some(select_heads(&traces, template)?)
        }
        _ => None,
    };
    let mut table = Vec::with_capacity(9);
    for alpha in alpha_grid() {
        let cfg = RauqConfig {
            alpha,
            ..template.clone()
        };
        let scores: Vec<f64> = calibration
            .par_iter()
            .map(|(t, _)| rauq_score(t, &cfg, selection.as_ref()).map(|r| r.score))
            .collect::<Result<_, _>>()?;
        table.push((alpha, metrics::auroc(&scores, &labels)?));
    }
    let mut best = 0;
    for (i, &(_, auc)) in table.iter().enumerate() {
        if auc > table[best].1 {
            best = i;
        }
    }
    Ok(AlphaTuning {
        method_id: template.method_id(),
        alpha: table[best].0,
        table,
    })
}
