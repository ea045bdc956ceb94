// SPDX-License-Identifier: Apache-2.0

//! Probability- and sampling-based baseline scores.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::check_cluster_ids;
use crate::rauq::ScoreRecord;
use crate::trace::{GenerationTrace, SampleBundle};

pub const PPL: &str = "ppl";
pub const PRED_ENT: &str = "pred_ent";
pub const NORM_ENT: &str = "norm_ent";
pub const SEM_ENT_DISCRETE: &str = "sem_ent.discrete";
pub const SEM_ENT_WEIGHTED: &str = "sem_ent.weighted";
pub const EIGENSCORE: &str = "eigenscore";

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("feature unavailable: {0}")]
    Unavailable(&'static str),
    #[error("trace has no generated tokens")]
    NoTokens,
    #[error("sample {0} has length {1}")]
    BadLength(usize, i32),
    #[error("entailment matrix invalid: {0}")]
    Entailment(String),
    #[error("cluster assignment invalid: {0}")]
    Assignment(String),
    #[error("eigenscore needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("embedding dimensions disagree: {0} values for {1} samples")]
    EmbeddingShape(usize, usize),
    #[error("eigen regularizer must be positive, got {0}")]
    Regularizer(f64),
}

fn record(trace_id: &str, method: &str, score: f64) -> ScoreRecord {
    ScoreRecord {
        trace_id: trace_id.to_string(),
        method_id: method.to_string(),
        score,
        layer_scores: None,
    }
}

/// `-(1/T) Σ ln p_t`; the log form of perplexity.
pub fn mean_nll(trace: &GenerationTrace) -> Result<f64, BaselineError> {
    if trace.tokens.is_empty() {
        return Err(BaselineError::NoTokens);
    }
    let sum: f64 = trace.tokens.iter().map(|t| (t.prob as f64).ln()).sum();
    Ok(-sum / trace.tokens.len() as f64)
}

pub fn perplexity(trace: &GenerationTrace) -> Result<ScoreRecord, BaselineError> {
    Ok(record(trace.id(), PPL, mean_nll(trace)?.exp()))
}

/// Mean of the per-step full-vocabulary entropies.
pub fn predictive_entropy(trace: &GenerationTrace) -> Result<ScoreRecord, BaselineError> {
    if trace.tokens.is_empty() {
        return Err(BaselineError::NoTokens);
    }
    let mut sum = 0.0f64;
    for tok in &trace.tokens {
        sum += tok
            .step_entropy
            .ok_or(BaselineError::Unavailable("step entropies"))? as f64;
    }
    Ok(record(trace.id(), PRED_ENT, sum / trace.tokens.len() as f64))
}

fn bundle_of(trace: &GenerationTrace) -> Result<&SampleBundle, BaselineError> {
    match &trace.bundle {
        Some(b) if !b.is_empty() => Ok(b),
        _ => Err(BaselineError::Unavailable("sample bundle")),
    }
}

/// Per-sample length-normalized NLL, averaged over samples.
pub fn normalized_entropy(trace_id: &str, bundle: &SampleBundle) -> Result<ScoreRecord, BaselineError> {
    if bundle.is_empty() {
        return Err(BaselineError::Unavailable("sample bundle"));
    }
    if bundle.sum_logprob.len() != bundle.len() {
        return Err(BaselineError::Unavailable("per-sample log-probabilities"));
    }
    let mut total = 0.0f64;
    for (s, (&len, &lp)) in bundle.lengths.iter().zip(&bundle.sum_logprob).enumerate() {
        if len < 1 {
            return Err(BaselineError::BadLength(s, len));
        }
        total += lp as f64 / len as f64;
    }
    Ok(record(trace_id, NORM_ENT, -total / bundle.len() as f64))
}

/// How a candidate sample is compared against an existing cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    /// Against the cluster's first member.
    #[default]
    FirstMember,
    /// Against every member.
    Complete,
}

/// Cluster ids `0..K` in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
}

impl ClusterAssignment {
    pub fn from_labels(labels: &[i32]) -> Result<Self, BaselineError> {
        if let Some(reason) = check_cluster_ids(labels) {
            return Err(BaselineError::Assignment(reason));
        }
        Ok(Self {
            labels: labels.iter().map(|&l| l as usize).collect(),
        })
    }

    pub fn cluster_count(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |k| k + 1)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.cluster_count()];
        for &l in &self.labels {
            n[l] += 1;
        }
        n
    }
}

fn check_entailment(ent: &[f32], s: usize) -> Result<(), BaselineError> {
    if ent.len() != s * s {
        return Err(BaselineError::Entailment(format!("{} entries for {s} samples", ent.len())));
    }
    for a in 0..s {
        if ent[a * s + a] != 1.0 {
            return Err(BaselineError::Entailment(format!("diagonal entry {a} is not 1")));
        }
        for b in a + 1..s {
            if ent[a * s + b] != ent[b * s + a] {
                return Err(BaselineError::Entailment(format!("asymmetric at ({a}, {b})")));
            }
        }
    }
    Ok(())
}

/// Greedy sequential clustering over a bidirectional-entailment matrix.
///
/// Samples are visited in index order; each joins the first existing cluster
/// it entails (per `linkage`) or founds a new one.
pub fn cluster_entailment(bundle: &SampleBundle, linkage: Linkage) -> Result<ClusterAssignment, BaselineError> {
    let ent = bundle
        .entailment
        .as_ref()
        .ok_or(BaselineError::Unavailable("entailment matrix"))?;
    let s = bundle.len();
    check_entailment(ent, s)?;
    let linked = |a: usize, b: usize| ent[a * s + b] == 1.0;
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut labels = vec![0usize; s];
    for (i, label) in labels.iter_mut().enumerate() {
        let joined = members.iter().position(|cluster| match linkage {
            Linkage::FirstMember => linked(i, cluster[0]),
            Linkage::Complete => cluster.iter().all(|&r| linked(i, r)),
        });
        match joined {
            Some(k) => {
                members[k].push(i);
                *label = k;
            }
            None => {
                *label = members.len();
                members.push(vec![i]);
            }
        }
    }
    Ok(ClusterAssignment { labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticMode {
    /// Cluster mass from sample counts.
    #[default]
    Discrete,
    /// Cluster mass from length-normalized sequence likelihoods.
    LikelihoodWeighted,
}

impl SemanticMode {
    pub fn method_id(&self) -> &'static str {
        match self {
            SemanticMode::Discrete => SEM_ENT_DISCRETE,
            SemanticMode::LikelihoodWeighted => SEM_ENT_WEIGHTED,
        }
    }
}

/// `-Σ p ln p` over a probability vector, skipping empty mass.
fn entropy(probs: impl IntoIterator<Item = f64>) -> f64 {
    -probs
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

pub fn semantic_entropy(
    trace_id: &str,
    bundle: &SampleBundle,
    assignment: &ClusterAssignment,
    mode: SemanticMode,
) -> Result<ScoreRecord, BaselineError> {
    let s = bundle.len();
    if s == 0 {
        return Err(BaselineError::Unavailable("sample bundle"));
    }
    if assignment.labels.len() != s {
        return Err(BaselineError::Assignment(format!(
            "{} labels for {s} samples",
            assignment.labels.len()
        )));
    }
    let k = assignment.cluster_count();
    let score = match mode {
        SemanticMode::Discrete => entropy(assignment.sizes().into_iter().map(|n| n as f64 / s as f64)),
        SemanticMode::LikelihoodWeighted => {
            if bundle.sum_logprob.len() != s {
                return Err(BaselineError::Unavailable("per-sample log-probabilities"));
            }
            let mut logw = Vec::with_capacity(s);
            for (i, (&lp, &len)) in bundle.sum_logprob.iter().zip(&bundle.lengths).enumerate() {
                if len < 1 {
                    return Err(BaselineError::BadLength(i, len));
                }
                logw.push(lp as f64 / len as f64);
            }
            // shift by the max log-weight before exponentiating
            let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|&x| (x - top).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut mass = vec![0.0f64; k];
            for (i, &l) in assignment.labels.iter().enumerate() {
                mass[l] += w[i];
            }
            entropy(mass.into_iter().map(|m| m / total))
        }
    };
    Ok(record(trace_id, mode.method_id(), score))
}

/// Clusters to use for a bundle: from entailment when present, else the
/// stored labels.
pub fn bundle_clusters(bundle: &SampleBundle, linkage: Linkage) -> Result<ClusterAssignment, BaselineError> {
    if bundle.entailment.is_some() {
        cluster_entailment(bundle, linkage)
    } else if let Some(labels) = &bundle.cluster_labels {
        ClusterAssignment::from_labels(labels)
    } else {
        Err(BaselineError::Unavailable("entailment matrix or cluster labels"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EigenConfig {
    pub rho: f64,
    pub center: bool,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self { rho: 1e-3, center: true }
    }
}

/// Gram matrix of the sample embeddings, centered when requested.
pub fn embedding_gram(bundle: &SampleBundle, center: bool) -> Result<DMatrix<f64>, BaselineError> {
    let emb = bundle
        .embeddings
        .as_ref()
        .ok_or(BaselineError::Unavailable("sample embeddings"))?;
    let s = bundle.len();
    if s < 2 {
        return Err(BaselineError::TooFewSamples(s));
    }
    if emb.dim == 0 || emb.values.len() != s * emb.dim {
        return Err(BaselineError::EmbeddingShape(emb.values.len(), s));
    }
    let z = DMatrix::from_fn(s, emb.dim, |i, j| emb.values[i * emb.dim + j] as f64);
    let gram = &z * z.transpose();
    if !center {
        return Ok(gram);
    }
    let j = DMatrix::<f64>::identity(s, s) - DMatrix::from_element(s, s, 1.0 / s as f64);
    Ok(&j * gram * &j)
}

/// `(1/S) Σ_k ln(max(λ_k, 0) + ρ)` over the eigenvalues of the Gram matrix.
pub fn eigenscore(trace_id: &str, bundle: &SampleBundle, cfg: EigenConfig) -> Result<ScoreRecord, BaselineError> {
    if cfg.rho.is_nan() || cfg.rho <= 0.0 {
        return Err(BaselineError::Regularizer(cfg.rho));
    }
    let gram = embedding_gram(bundle, cfg.center)?;
    let s = gram.nrows();
    // symmetrize away rounding before the symmetric solver
    let sym = (&gram + gram.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let score = eig.iter().map(|&l| (l.max(0.0) + cfg.rho).ln()).sum::<f64>() / s as f64;
    Ok(record(trace_id, EIGENSCORE, score))
}

/// Trace-level wrappers used by the scorer registry.
pub fn normalized_entropy_of(trace: &GenerationTrace) -> Result<ScoreRecord, BaselineError> {
    normalized_entropy(trace.id(), bundle_of(trace)?)
}

pub fn semantic_entropy_of(
    trace: &GenerationTrace,
    mode: SemanticMode,
    linkage: Linkage,
) -> Result<ScoreRecord, BaselineError> {
    let bundle = bundle_of(trace)?;
    let clusters = bundle_clusters(bundle, linkage)?;
    semantic_entropy(trace.id(), bundle, &clusters, mode)
}

pub fn eigenscore_of(trace: &GenerationTrace, cfg: EigenConfig) -> Result<ScoreRecord, BaselineError> {
    eigenscore(trace.id(), bundle_of(trace)?, cfg)
}
