// SPDX-License-Identifier: Apache-2.0

//! Hallucination-detection metrics and corpus-level evaluation.
//!
//! Conventions: a higher score means more uncertain, and the positive class
//! is "hallucination" (quality below the binarization threshold).

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledExample;
use crate::rauq::ScoreRecord;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: labels contain a single class")]
    SingleClass,
    #[error("metric needs at least {need} examples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("metric undefined: all qualities are equal")]
    DegenerateQuality,
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("histogram of an empty score list")]
    Empty,
    #[error("{count} score records have no labeled example: {}", .ids.join(", "))]
    Unjoined { count: usize, ids: Vec<String> },
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

pub fn check_two_classes(labels: &[bool]) -> Result<(), MetricError> {
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        Err(MetricError::SingleClass)
    } else {
        Ok(())
    }
}

fn check_inputs(scores: &[f64], n_labels: usize) -> Result<(), MetricError> {
    if scores.len() != n_labels {
        return Err(MetricError::Length(scores.len(), n_labels));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    Ok(())
}

/// `quality < threshold` means hallucination.
pub fn binarize(qualities: &[f64], threshold: f64) -> Vec<bool> {
    qualities.iter().map(|&q| q < threshold).collect()
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-based AUROC (Mann-Whitney U over positives), ties get half credit.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_inputs(scores, labels.len())?;
    check_two_classes(labels)?;
    let ranks = midranks(scores);
    let n_pos = labels.iter().filter(|&&y| y).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// Indices in rejection order: highest score first, ties by ascending index.
pub fn rejection_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Accuracy of retained examples after rejecting the `k` most uncertain, for
/// `k = 0..N-1`.
pub fn rejection_accuracy_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<f64>, MetricError> {
    check_inputs(scores, labels.len())?;
    let n = scores.len();
    if n < 2 {
        return Err(MetricError::TooFew { need: 2, got: n });
    }
    let order = rejection_order(scores);
    let mut correct: usize = labels.iter().filter(|&&y| !y).count();
    let mut curve = Vec::with_capacity(n);
    for k in 0..n {
        curve.push(correct as f64 / (n - k) as f64);
        if !labels[order[k]] {
            correct -= 1;
        }
    }
    Ok(curve)
}

/// Area under the rejection-accuracy curve on the per-count grid.
pub fn aurac(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let curve = rejection_accuracy_curve(scores, labels)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Mean quality after replacing the first `k` of `order` by oracle answers
/// (quality 1), for `k = 0..N-1`.
fn replacement_curve(qualities: &[f64], order: &[usize]) -> Vec<f64> {
    let n = qualities.len();
    let mut retained: f64 = qualities.iter().sum();
    let mut curve = Vec::with_capacity(n);
    for k in 0..n {
        curve.push((retained + k as f64) / n as f64);
        retained -= qualities[order[k]];
    }
    curve
}

/// Prediction rejection ratio against continuous quality in `[0, 1]`.
pub fn prr(scores: &[f64], qualities: &[f64]) -> Result<f64, MetricError> {
    check_inputs(scores, qualities.len())?;
    let n = scores.len();
    if n < 2 {
        return Err(MetricError::TooFew { need: 2, got: n });
    }
    if qualities.iter().all(|&q| q == qualities[0]) {
        return Err(MetricError::DegenerateQuality);
    }
    let method = replacement_curve(qualities, &rejection_order(scores));
    let mut oracle_order: Vec<usize> = (0..n).collect();
    oracle_order.sort_by(|&a, &b| qualities[a].total_cmp(&qualities[b]).then(a.cmp(&b)));
    let oracle = replacement_curve(qualities, &oracle_order);
    let mean_q = qualities.iter().sum::<f64>() / n as f64;
    let random = |k: usize| {
        let frac = k as f64 / n as f64;
        (1.0 - frac) * mean_q + frac
    };
    let mut gain = 0.0;
    let mut best = 0.0;
    for k in 0..n {
        gain += method[k] - random(k);
        best += oracle[k] - random(k);
    }
    if best <= 0.0 {
        return Err(MetricError::DegenerateQuality);
    }
    Ok(gain / best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GMeanThreshold {
    /// Scores strictly above this are predicted positive. May be infinite.
    pub threshold: f64,
    pub tpr: f64,
    pub tnr: f64,
}

impl GMeanThreshold {
    pub fn gmean(&self) -> f64 {
        (self.tpr * self.tnr).sqrt()
    }
}

/// Cut maximizing `sqrt(TPR * TNR)` over midpoints of consecutive distinct
/// scores plus `±∞`. Ties keep the lowest threshold.
pub fn gmean_threshold(scores: &[f64], labels: &[bool]) -> Result<GMeanThreshold, MetricError> {
    check_inputs(scores, labels.len())?;
    check_two_classes(labels)?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(f64::INFINITY);

    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut best: Option<GMeanThreshold> = None;
    for thr in candidates {
        let mut tp = 0usize;
        let mut tn = 0usize;
        for (&s, &y) in scores.iter().zip(labels) {
            match (s > thr, y) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                _ => {}
            }
        }
        let cand = GMeanThreshold {
            threshold: thr,
            tpr: tp as f64 / pos,
            tnr: tn as f64 / neg,
        };
        if best.is_none_or(|b| cand.gmean() > b.gmean()) {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least the sentinels are evaluated"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    /// Counts, or densities when normalized.
    pub heights: Vec<f64>,
    pub normalized: bool,
}

impl Histogram {
    pub fn area(&self) -> f64 {
        self.heights
            .iter()
            .zip(self.edges.windows(2))
            .map(|(h, w)| h * (w[1] - w[0]))
            .sum()
    }
}

/// Equal-width bins over `[min, max]` of the scores.
pub fn histogram(scores: &[f64], bins: usize, normalize: bool) -> Result<Histogram, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    histogram_in_range(scores, bins, lo, hi, normalize)
}

/// Equal-width bins over `[lo, hi]`; a zero-width range is widened to
/// `[lo - 0.5, lo + 0.5]`. Values outside the range are ignored.
pub fn histogram_in_range(
    scores: &[f64],
    bins: usize,
    lo: f64,
    hi: f64,
    normalize: bool,
) -> Result<Histogram, MetricError> {
    if bins == 0 {
        return Err(MetricError::NoBins);
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0.0f64; bins];
    let mut total = 0usize;
    for &s in scores {
        if !(lo..=hi).contains(&s) {
            continue;
        }
        let mut b = ((s - lo) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1.0;
        total += 1;
    }
    if normalize && total > 0 {
        for (c, w) in counts.iter_mut().zip(edges.windows(2)) {
            *c /= total as f64 * (w[1] - w[0]);
        }
    }
    Ok(Histogram {
        edges,
        heights: counts,
        normalized: normalize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Every example concatenated.
    Overall,
    /// Extrinsic and intrinsic datasets concatenated separately.
    ByHalluType,
    ByDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub binarize_threshold: f64,
    pub bootstrap_resamples: usize,
    pub rng_seed: u64,
    pub groupings: Vec<Grouping>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            binarize_threshold: 0.5,
            bootstrap_resamples: 1000,
            rng_seed: 0,
            groupings: vec![Grouping::Overall, Grouping::ByHalluType, Grouping::ByDataset],
        }
    }
}

impl EvalConfig {
    fn check(&self) -> Result<(), MetricError> {
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(MetricError::Config(format!(
                "binarize threshold {} outside (0, 1)",
                self.binarize_threshold
            )));
        }
        if self.bootstrap_resamples == 0 {
            return Err(MetricError::Config("bootstrap needs at least one resample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Auroc,
    Aurac,
    Prr,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Auroc, MetricKind::Aurac, MetricKind::Prr];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Auroc => "auroc",
            MetricKind::Aurac => "aurac",
            MetricKind::Prr => "prr",
        }
    }
}

/// A point estimate with a bootstrap percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub method_id: String,
    pub grouping: Grouping,
    pub group: String,
    pub n: usize,
    pub positives: usize,
    pub positive_rate: f64,
    pub mean_quality: f64,
    /// Absent when the metric is undefined for this group.
    pub auroc: Option<Estimate>,
    pub aurac: Option<Estimate>,
    pub prr: Option<Estimate>,
}

impl EvalCell {
    pub fn metric(&self, kind: MetricKind) -> Option<&Estimate> {
        match kind {
            MetricKind::Auroc => self.auroc.as_ref(),
            MetricKind::Aurac => self.aurac.as_ref(),
            MetricKind::Prr => self.prr.as_ref(),
        }
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    /// Sorted by method, grouping, group.
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn cell(&self, method_id: &str, grouping: Grouping, group: &str) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.method_id == method_id && c.grouping == grouping && c.group == group)
    }

    pub fn methods(&self) -> Vec<&str> {
        let mut m: Vec<&str> = self.cells.iter().map(|c| c.method_id.as_str()).collect();
        m.dedup();
        m
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per method x group x defined metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "schema_version,method_id,grouping,group,metric,value,ci_low,ci_high,n,positive_rate,mean_quality\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for cell in &self.cells {
            for kind in MetricKind::ALL {
                if let Some(e) = cell.metric(kind) {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{},{}\n",
                        self.schema_version,
                        cell.method_id,
                        grouping_str(cell.grouping),
                        cell.group,
                        kind.as_str(),
                        e.value,
                        opt(e.ci_low),
                        opt(e.ci_high),
                        cell.n,
                        cell.positive_rate,
                        cell.mean_quality
                    ));
                }
            }
        }
        out
    }
}

pub fn grouping_str(g: Grouping) -> &'static str {
    match g {
        Grouping::Overall => "overall",
        Grouping::ByHalluType => "by_hallu_type",
        Grouping::ByDataset => "by_dataset",
    }
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn compute(kind: MetricKind, scores: &[f64], labels: &[bool], qualities: &[f64]) -> Option<f64> {
    match kind {
        MetricKind::Auroc => auroc(scores, labels).ok(),
        MetricKind::Aurac => aurac(scores, labels).ok(),
        MetricKind::Prr => prr(scores, qualities).ok(),
    }
}

/// Resample indices for bootstrap replicate `r`; independent of thread count.
pub fn bootstrap_indices(seed: u64, r: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Point estimates and 2.5/97.5 percentile intervals for all three metrics.
/// Replicates where a metric is undefined are dropped for that metric.
pub fn bootstrap_metrics(
    scores: &[f64],
    labels: &[bool],
    qualities: &[f64],
    resamples: usize,
    seed: u64,
) -> [Option<Estimate>; 3] {
    let replicates: Vec<[Option<f64>; 3]> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let idx = bootstrap_indices(seed, r, scores.len());
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let q: Vec<f64> = idx.iter().map(|&i| qualities[i]).collect();
            MetricKind::ALL.map(|k| compute(k, &s, &y, &q))
        })
        .collect();
    let mut out = [None; 3];
    for (slot, kind) in MetricKind::ALL.into_iter().enumerate() {
        let Some(value) = compute(kind, scores, labels, qualities) else {
            continue;
        };
        let mut dist: Vec<f64> = replicates.iter().filter_map(|r| r[slot]).collect();
        dist.sort_by(f64::total_cmp);
        let (ci_low, ci_high) = if dist.is_empty() {
            (None, None)
        } else {
            (Some(percentile(&dist, 0.025)), Some(percentile(&dist, 0.975)))
        };
        out[slot] = Some(Estimate {
            value,
            ci_low,
            ci_high,
        });
    }
    out
}

/// Joins score records to labels and computes every metric per method and
/// group. Groups are concatenations of examples, never averages of
/// per-dataset metrics.
pub fn evaluate_corpus(
    records: &[ScoreRecord],
    examples: &[LabeledExample],
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricError> {
    cfg.check()?;
    let by_id: HashMap<&str, &LabeledExample> =
        examples.iter().map(|e| (e.trace_id.as_str(), e)).collect();
    let mut unjoined: Vec<String> = records
        .iter()
        .filter(|r| !by_id.contains_key(r.trace_id.as_str()))
        .map(|r| r.trace_id.clone())
        .collect();
    if !unjoined.is_empty() {
        unjoined.sort();
        unjoined.dedup();
        return Err(MetricError::Unjoined {
            count: unjoined.len(),
            ids: unjoined,
        });
    }

    // method -> (grouping, group) -> joined rows, kept in trace_id order
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.method_id, &a.trace_id).cmp(&(&b.method_id, &b.trace_id)));
    type Rows<'a> = Vec<(f64, &'a LabeledExample)>;
    let mut groups: BTreeMap<(String, Grouping, String), Rows> = BTreeMap::new();
    for rec in sorted {
        let ex = by_id[rec.trace_id.as_str()];
        for &g in &cfg.groupings {
            let name = match g {
                Grouping::Overall => Some("all".to_string()),
                Grouping::ByHalluType => match ex.hallu_type {
                    crate::corpus::HalluType::Other => None,
                    t => Some(t.as_str().to_string()),
                },
                Grouping::ByDataset => Some(ex.dataset_id.clone()),
            };
            if let Some(name) = name {
                groups
                    .entry((rec.method_id.clone(), g, name))
                    .or_default()
                    .push((rec.score, ex));
            }
        }
    }

    let cells = groups
        .into_iter()
        .map(|((method_id, grouping, group), rows)| {
            let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let qualities: Vec<f64> = rows.iter().map(|r| r.1.quality).collect();
            let labels = binarize(&qualities, cfg.binarize_threshold);
            let n = rows.len();
            let positives = labels.iter().filter(|&&y| y).count();
            let [auroc, aurac, prr] = bootstrap_metrics(
                &scores,
                &labels,
                &qualities,
                cfg.bootstrap_resamples,
                cfg.rng_seed,
            );
            EvalCell {
                method_id,
                grouping,
                group,
                n,
                positives,
                positive_rate: positives as f64 / n as f64,
                mean_quality: qualities.iter().sum::<f64>() / n as f64,
                auroc,
                aurac,
                prr,
            }
        })
        .collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        cells,
    })
}

/// Mean and population standard deviation of each metric across reports
/// from different models, per method and group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadCell {
    pub method_id: String,
    pub grouping: Grouping,
    pub group: String,
    pub metric: MetricKind,
    pub models: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn across_model_spread(reports: &[EvalReport]) -> Vec<SpreadCell> {
    let mut acc: BTreeMap<(String, Grouping, String, MetricKind), Vec<f64>> = BTreeMap::new();
    for report in reports {
        for cell in &report.cells {
            for kind in MetricKind::ALL {
                if let Some(e) = cell.metric(kind) {
                    acc.entry((cell.method_id.clone(), cell.grouping, cell.group.clone(), kind))
                        .or_default()
                        .push(e.value);
                }
            }
        }
    }
    acc.into_iter()
        .map(|((method_id, grouping, group, metric), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            SpreadCell {
                method_id,
                grouping,
                group,
                metric,
                models: v.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}
