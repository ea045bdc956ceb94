// SPDX-License-Identifier: Apache-2.0

//! Scorers behind a common trait, looked up by method id at runtime.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{HeadAgg, TokenAgg};
use crate::baselines::{self, BaselineError, EigenConfig, Linkage, SemanticMode};
use crate::rauq::{self, HeadSelection, RauqConfig, RauqError, ScoreRecord, SelectionScope};
use crate::trace::GenerationTrace;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error(transparent)]
    Rauq(#[from] RauqError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("scorer {0} must be fitted on a calibration set first")]
    NotFitted(String),
}

impl ScoreError {
    /// Short machine-readable reason class.
    pub fn kind(&self) -> &'static str {
        match self {
            ScoreError::Baseline(BaselineError::Unavailable(_)) => "unavailable_feature",
            ScoreError::Baseline(_) => "baseline",
            ScoreError::Rauq(RauqError::SelectionUndefined) => "selection_undefined",
            ScoreError::Rauq(_) => "rauq",
            ScoreError::NotFitted(_) => "not_fitted",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("unknown method id {0:?}")]
    UnknownMethod(String),
    #[error("method {0} is experimental; enable the experimental flag to use it")]
    Experimental(String),
    #[error("method {0} is already registered")]
    Duplicate(String),
}

pub trait Scorer: Send + Sync {
    fn method_id(&self) -> &str;

    /// Whether [`Scorer::fit`] must run before scoring.
    fn needs_fit(&self) -> bool {
        false
    }

    /// Learns corpus-level state (for example, a calibrated head selection).
    fn fit(&mut self, _traces: &[&GenerationTrace]) -> Result<(), ScoreError> {
        Ok(())
    }

    fn score(&self, trace: &GenerationTrace) -> Result<ScoreRecord, ScoreError>;
}

/// Options shared by every factory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerOptions {
    /// Template for RAUQ variants; token and head aggregation come from the
    /// method id.
    pub rauq: RauqConfig,
    /// Per-method alpha overriding `rauq.alpha`.
    pub alpha_table: BTreeMap<String, f64>,
    pub linkage: Linkage,
    pub eigen: EigenConfig,
}

pub struct RauqScorer {
    id: String,
    cfg: RauqConfig,
    selection: Option<HeadSelection>,
}

impl RauqScorer {
    pub fn new(cfg: RauqConfig) -> Self {
        Self {
            id: cfg.method_id(),
            cfg,
            selection: None,
        }
    }

    pub fn config(&self) -> &RauqConfig {
        &self.cfg
    }

    pub fn selection(&self) -> Option<&HeadSelection> {
        self.selection.as_ref()
    }
}

impl Scorer for RauqScorer {
    fn method_id(&self) -> &str {
        &self.id
    }

    fn needs_fit(&self) -> bool {
        self.cfg.head_agg == HeadAgg::SelectedHead && self.cfg.selection_scope == SelectionScope::Calibrated
    }

    fn fit(&mut self, traces: &[&GenerationTrace]) -> Result<(), ScoreError> {
        if self.needs_fit() {
            self.selection = Some(rauq::select_heads(traces, &self.cfg)?);
        }
        Ok(())
    }

    fn score(&self, trace: &GenerationTrace) -> Result<ScoreRecord, ScoreError> {
        if self.needs_fit() && self.selection.is_none() {
            return Err(ScoreError::NotFitted(self.id.clone()));
        }
        Ok(rauq::rauq_score(trace, &self.cfg, self.selection.as_ref())?)
    }
}

type MakeBaseline = fn(&ScorerOptions) -> BaselineFn;
type BaselineFn = Box<dyn Fn(&GenerationTrace) -> Result<ScoreRecord, BaselineError> + Send + Sync>;

pub struct BaselineScorer {
    id: &'static str,
    run: BaselineFn,
}

impl Scorer for BaselineScorer {
    fn method_id(&self) -> &str {
        self.id
    }

    fn score(&self, trace: &GenerationTrace) -> Result<ScoreRecord, ScoreError> {
        Ok((self.run)(trace)?)
    }
}

pub type Factory = Box<dyn Fn(&ScorerOptions) -> Result<Box<dyn Scorer>, RegistryError> + Send + Sync>;

struct Entry {
    experimental: bool,
    factory: Factory,
}

/// Method id to scorer factory.
pub struct Registry {
    entries: BTreeMap<String, Entry>,
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Every RAUQ variant and every baseline.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        for head in [HeadAgg::SelectedHead, HeadAgg::MeanHeads, HeadAgg::Rollout] {
            for token in TokenAgg::ALL {
                let id = rauq::method_id(token, head);
                let experimental = head == HeadAgg::Rollout && token == TokenAgg::InputTokens;
                let key = id.clone();
                let factory: Factory = Box::new(move |opts: &ScorerOptions| {
                    let mut cfg = opts.rauq.clone().with_variant(token, head);
                    if let Some(&a) = opts.alpha_table.get(&key) {
                        cfg.alpha = a;
                    }
                    if experimental && !cfg.experimental {
                        return Err(RegistryError::Experimental(key.clone()));
                    }
                    Ok(Box::new(RauqScorer::new(cfg)))
                });
                r.insert(id, experimental, factory).expect("builtin ids are unique");
            }
        }
        let baseline = |id: &'static str, make: fn(&ScorerOptions) -> BaselineFn| -> Factory {
            Box::new(move |opts: &ScorerOptions| Ok(Box::new(BaselineScorer { id, run: make(opts) })))
        };
        let builtins: [(&'static str, MakeBaseline); 6] = [
            (baselines::PPL, |_| Box::new(baselines::perplexity)),
            (baselines::PRED_ENT, |_| Box::new(baselines::predictive_entropy)),
            (baselines::NORM_ENT, |_| Box::new(baselines::normalized_entropy_of)),
            (baselines::SEM_ENT_DISCRETE, |o| {
                let linkage = o.linkage;
                Box::new(move |t| baselines::semantic_entropy_of(t, SemanticMode::Discrete, linkage))
            }),
            (baselines::SEM_ENT_WEIGHTED, |o| {
                let linkage = o.linkage;
                Box::new(move |t| baselines::semantic_entropy_of(t, SemanticMode::LikelihoodWeighted, linkage))
            }),
            (baselines::EIGENSCORE, |o| {
                let cfg = o.eigen;
                Box::new(move |t| baselines::eigenscore_of(t, cfg))
            }),
        ];
        for (id, make) in builtins {
            r.insert(id.to_string(), false, baseline(id, make))
                .expect("builtin ids are unique");
        }
        r
    }

    fn insert(&mut self, id: String, experimental: bool, factory: Factory) -> Result<(), RegistryError> {
        if self.entries.contains_key(&id) {
            return Err(RegistryError::Duplicate(id));
        }
        self.entries.insert(id, Entry { experimental, factory });
        Ok(())
    }

    pub fn register(&mut self, id: impl Into<String>, factory: Factory) -> Result<(), RegistryError> {
        self.insert(id.into(), false, factory)
    }

    /// All ids in sorted order.
    pub fn ids(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    /// Ids usable without the experimental flag (or all of them with it).
    pub fn default_ids(&self, experimental: bool) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| experimental || !e.experimental)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn create(&self, id: &str, opts: &ScorerOptions) -> Result<Box<dyn Scorer>, RegistryError> {
        let entry = self
            .entries
            .get(id)
            .ok_or_else(|| RegistryError::UnknownMethod(id.to_string()))?;
        (entry.factory)(opts)
    }

    /// Creates several scorers, failing on the first unknown id.
    pub fn create_all(&self, ids: &[String], opts: &ScorerOptions) -> Result<Vec<Box<dyn Scorer>>, RegistryError> {
        ids.iter().map(|id| self.create(id, opts)).collect()
    }
}

/// A trace/method pair that could not be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub trace_id: String,
    pub method_id: String,
    pub kind: String,
    pub reason: String,
}

/// Scores every trace with every scorer in parallel. Records and failures are
/// sorted by `(trace_id, method_id)`.
pub fn score_all(
    scorers: &[Box<dyn Scorer>],
    traces: &[GenerationTrace],
) -> (Vec<ScoreRecord>, Vec<ScoreFailure>) {
    let results: Vec<Result<ScoreRecord, ScoreFailure>> = traces
        .par_iter()
        .flat_map_iter(|trace| {
            scorers.iter().map(move |s| {
                s.score(trace).map_err(|e| ScoreFailure {
                    trace_id: trace.meta.trace_id.clone(),
                    method_id: s.method_id().to_string(),
                    kind: e.kind().to_string(),
                    reason: e.to_string(),
                })
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    records.sort_by(|a, b| (&a.trace_id, &a.method_id).cmp(&(&b.trace_id, &b.method_id)));
    failures.sort_by(|a, b| (&a.trace_id, &a.method_id).cmp(&(&b.trace_id, &b.method_id)));
    (records, failures)
}
