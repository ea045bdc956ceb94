// SPDX-License-Identifier: Apache-2.0

//! Synthetic corpora with planted ground truth.
//!
//! Every generated row `i >= m` (a generated position) is built from three
//! parts: a planted head's mass on the previous token, a share on the prompt,
//! and the remainder spread over the other generated positions including the
//! diagonal. Hallucinated traces move `delta` of the planted head's
//! previous-token mass to the diagonal on a contiguous span and, in the
//! intrinsic regime, scale every head's prompt mass by `1 - delta`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::corpus::{self, CorpusError, HalluType, IndexRow, LabeledExample};
use crate::trace::{
    AttentionTensor, DecodeMode, Embeddings, GenerationTrace, SampleBundle, TokenRecord, TraceMeta,
};

/// Minimum AUROC of the input-token RAUQ variants on the default intrinsic
/// corpus at `delta = 0.3`, `n = 400`.
pub const PINNED_ATTENTION_AUROC: f64 = 0.95;
/// Maximum AUROC of the probability-only baselines on the same corpus.
pub const PINNED_PROBABILITY_AUROC: f64 = 0.75;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_DIR: &str = "traces";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Probabilities and sample diversity carry the label; prompt attention
    /// does not.
    ExtrinsicLike,
    /// Prompt attention carries the label; probabilities are weakly
    /// informative and sample diversity is label-independent.
    IntrinsicLike,
}

impl Regime {
    pub fn hallu_type(&self) -> HalluType {
        match self {
            Regime::ExtrinsicLike => HalluType::Extrinsic,
            Regime::IntrinsicLike => HalluType::Intrinsic,
        }
    }

    fn slug(&self) -> &'static str {
        match self {
            Regime::ExtrinsicLike => "extrinsic",
            Regime::IntrinsicLike => "intrinsic",
        }
    }

    fn default_prob_signal(&self) -> f64 {
        match self {
            Regime::ExtrinsicLike => 0.05,
            Regime::IntrinsicLike => 0.015,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_traces: usize,
    /// Inclusive range of prompt lengths `m`.
    pub input_tokens: (usize, usize),
    /// Inclusive range of generated lengths `T`.
    pub generated_tokens: (usize, usize),
    pub layers: usize,
    pub heads: usize,
    /// Planted head per layer; `None` means `(l + 1) % heads`.
    pub planted_heads: Option<Vec<usize>>,
    pub delta: f64,
    pub hallu_fraction: f64,
    pub regime: Regime,
    /// Samples per bundle; 0 disables bundles.
    pub samples: usize,
    pub embedding_dim: usize,
    /// Mean of the planted head's previous-token weight.
    pub planted_mean: f64,
    /// Beta concentration for the planted weight and the prompt share.
    pub concentration: f64,
    /// Expected prompt share per prompt token on generated rows.
    pub input_share: f64,
    pub base_prob: f64,
    pub prob_concentration: f64,
    /// Shift of the mean token probability per unit `delta` on hallucinated
    /// traces. `None` uses the regime default.
    pub prob_signal: Option<f64>,
    pub entropy_noise: f64,
    pub dataset_id: Option<String>,
    pub model_id: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_traces: 400,
            input_tokens: (3, 6),
            generated_tokens: (10, 10),
            layers: 4,
            heads: 4,
            planted_heads: None,
            delta: 0.3,
            hallu_fraction: 0.5,
            regime: Regime::IntrinsicLike,
            samples: 10,
            embedding_dim: 8,
            planted_mean: 0.6,
            concentration: 100.0,
            input_share: 0.14,
            base_prob: 0.85,
            prob_concentration: 200.0,
            prob_signal: None,
            entropy_noise: 0.5,
            dataset_id: None,
            model_id: "synthetic".into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error("infeasible spec for trace {trace_id}: {detail}")]
    Infeasible { trace_id: String, detail: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SynthSpec {
    pub fn planted_head(&self, layer: usize) -> usize {
        match &self.planted_heads {
            Some(h) => h[layer],
            None => (layer + 1) % self.heads,
        }
    }

    pub fn prob_signal(&self) -> f64 {
        self.prob_signal.unwrap_or_else(|| self.regime.default_prob_signal())
    }

    pub fn dataset_id(&self) -> String {
        self.dataset_id
            .clone()
            .unwrap_or_else(|| format!("synth-{}", self.regime.slug()))
    }

    pub fn hallucinated_count(&self) -> usize {
        (self.n_traces as f64 * self.hallu_fraction).round() as usize
    }

    pub fn check(&self) -> Result<(), SynthError> {
        let bad = |s: String| Err(SynthError::Invalid(s));
        let (m_lo, m_hi) = self.input_tokens;
        let (t_lo, t_hi) = self.generated_tokens;
        if self.n_traces == 0 {
            return bad("n_traces must be positive".into());
        }
        if m_lo == 0 || m_lo > m_hi {
            return bad(format!("input_tokens range {m_lo}..={m_hi}"));
        }
        if t_lo < 2 || t_lo > t_hi {
            return bad(format!("generated_tokens range {t_lo}..={t_hi} (need at least 2)"));
        }
        if self.layers == 0 || self.heads == 0 {
            return bad("layers and heads must be positive".into());
        }
        if let Some(h) = &self.planted_heads {
            if h.len() != self.layers || h.iter().any(|&x| x >= self.heads) {
                return bad(format!("planted_heads {h:?} for {} layers x {} heads", self.layers, self.heads));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} outside (0, 1)", self.delta));
        }
        if !(self.hallu_fraction > 0.0 && self.hallu_fraction < 1.0) {
            return bad(format!("hallu_fraction {} outside (0, 1)", self.hallu_fraction));
        }
        if !(self.planted_mean > 0.0 && self.planted_mean < 1.0) || self.concentration <= 0.0 {
            return bad("planted weight Beta parameters".into());
        }
        if !(self.input_share > 0.0 && self.input_share * (m_hi as f64) < 1.0) {
            return bad(format!(
                "input_share {} times max prompt length {m_hi} must lie in (0, 1)",
                self.input_share
            ));
        }
        let q = self.base_prob - self.prob_signal() * self.delta;
        if !(self.base_prob < 1.0 && q > 0.0) || self.prob_concentration <= 0.0 {
            return bad(format!("token probability mean {q} outside (0, 1)"));
        }
        if self.entropy_noise < 0.0 {
            return bad("entropy_noise must be non-negative".into());
        }
        if self.samples > 0 && self.embedding_dim == 0 {
            return bad("embedding_dim must be positive when samples are emitted".into());
        }
        if self.delta >= self.planted_mean {
            return Err(SynthError::Infeasible {
                trace_id: "*".into(),
                detail: format!(
                    "delta {} would remove more than the planted mean weight {}",
                    self.delta, self.planted_mean
                ),
            });
        }
        Ok(())
    }
}

/// What the generator planted in one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTruth {
    pub trace_id: String,
    pub hallucinated: bool,
    pub quality: f64,
    /// Inclusive 1-based generated positions where the planted heads dropped.
    pub span: Option<(usize, usize)>,
    pub clusters: Option<usize>,
    /// Mean of the stored step entropies.
    pub mean_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub traces: Vec<GenerationTrace>,
    pub truth: Vec<TraceTruth>,
}

impl SynthCorpus {
    pub fn index_rows(&self) -> Vec<IndexRow> {
        let dataset_id = self.spec.dataset_id();
        self.truth
            .iter()
            .map(|t| IndexRow {
                trace_id: t.trace_id.clone(),
                quality: Some(t.quality),
                dataset_id: dataset_id.clone(),
                hallu_type: self.spec.regime.hallu_type(),
                path: format!("{TRACE_DIR}/{}.uqtr", t.trace_id),
            })
            .collect()
    }

    pub fn labeled(&self) -> Vec<LabeledExample> {
        self.index_rows().iter().filter_map(IndexRow::labeled).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.truth.iter().map(|t| t.hallucinated).collect()
    }
}

fn trace_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Exactly `round(n * fraction)` hallucinated labels in shuffled order.
fn draw_labels(spec: &SynthSpec) -> Vec<bool> {
    let mut rng = trace_rng(spec.seed, 0);
    let k = spec.hallucinated_count();
    let mut labels: Vec<bool> = (0..spec.n_traces).map(|i| i < k).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

fn dirichlet_ones<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn beta_mean<R: Rng>(rng: &mut R, mean: f64, conc: f64) -> f64 {
    Beta::new(mean * conc, (1.0 - mean) * conc)
        .expect("beta parameters checked by the spec")
        .sample(rng)
}

pub fn trace_id(spec: &SynthSpec, index: usize) -> String {
    format!("{}-s{}-{index:05}", spec.dataset_id(), spec.seed)
}

fn generate_one(spec: &SynthSpec, index: usize, hallucinated: bool) -> Result<(GenerationTrace, TraceTruth), SynthError> {
    let id = trace_id(spec, index);
    let mut rng = trace_rng(spec.seed, index as u64 + 1);
    let m = rng.random_range(spec.input_tokens.0..=spec.input_tokens.1);
    let t_len = rng.random_range(spec.generated_tokens.0..=spec.generated_tokens.1);
    let n = m + t_len;
    let delta = spec.delta;

    let span = hallucinated.then(|| {
        let min_len = t_len / 2;
        let len = rng.random_range(min_len.max(1)..=t_len - 1);
        let start = rng.random_range(2..=t_len - len + 1);
        (start, start + len - 1)
    });

    let mut attention = AttentionTensor::zeros(spec.layers, spec.heads, n);
    let mut row = vec![0.0f64; n];
    for l in 0..spec.layers {
        let planted_head = spec.planted_head(l);
        for h in 0..spec.heads {
            let planted = h == planted_head;
            for i in 0..n {
                row.iter_mut().for_each(|x| *x = 0.0);
                if i < m {
                    for (j, w) in dirichlet_ones(&mut rng, i + 1).into_iter().enumerate() {
                        row[j] = w;
                    }
                } else {
                    let t = i - m + 1;
                    let mut rest = 1.0;
                    if planted {
                        let a = beta_mean(&mut rng, spec.planted_mean, spec.concentration);
                        row[i - 1] += a;
                        rest = 1.0 - a;
                    }
                    let g = beta_mean(&mut rng, spec.input_share * m as f64, spec.concentration);
                    for (j, w) in dirichlet_ones(&mut rng, m).into_iter().enumerate() {
                        row[j] += w * g * rest;
                    }
                    let others: Vec<usize> = (m..=i).filter(|&j| !(planted && j == i - 1)).collect();
                    for (&j, w) in others.iter().zip(dirichlet_ones(&mut rng, others.len())) {
                        row[j] += w * (1.0 - g) * rest;
                    }
                    if let (true, Some((lo, hi))) = (planted, span) {
                        if (lo..=hi).contains(&t) {
                            if row[i - 1] < delta {
                                return Err(SynthError::Infeasible {
                                    trace_id: id,
                                    detail: format!(
                                        "layer {l} head {h} position {t}: previous-token weight {} below delta {delta}",
                                        row[i - 1]
                                    ),
                                });
                            }
                            row[i - 1] -= delta;
                            row[i] += delta;
                        }
                    }
                    if hallucinated && spec.regime == Regime::IntrinsicLike {
                        let mut removed = 0.0;
                        for x in &mut row[..m] {
                            removed += *x * delta;
                            *x *= 1.0 - delta;
                        }
                        row[i] += removed;
                    }
                }
                for (dst, &src) in attention.row_mut(l, h, i).iter_mut().zip(&row) {
                    *dst = src as f32;
                }
            }
        }
    }

    let q = if hallucinated {
        spec.base_prob - spec.prob_signal() * delta
    } else {
        spec.base_prob
    };
    let tokens: Vec<TokenRecord> = (0..t_len)
        .map(|_| {
            let p = beta_mean(&mut rng, q, spec.prob_concentration);
            let e = -p.ln() + spec.entropy_noise * rng.random::<f64>();
            TokenRecord {
                prob: p as f32,
                step_entropy: Some(e as f32),
                token_id: rng.random_range(0..32000),
            }
        })
        .collect();
    let mean_entropy =
        tokens.iter().map(|t| t.step_entropy.unwrap() as f64).sum::<f64>() / t_len as f64;

    let mut clusters = None;
    let bundle = (spec.samples > 0).then(|| {
        let s = spec.samples;
        let k = match spec.regime {
            Regime::ExtrinsicLike if hallucinated => s.div_ceil(2),
            Regime::ExtrinsicLike => 1,
            Regime::IntrinsicLike => rng.random_range(1..=2),
        };
        clusters = Some(k);
        let labels: Vec<i32> = (0..s).map(|i| (i % k) as i32).collect();
        let entailment: Vec<f32> = (0..s * s)
            .map(|ab| f32::from(u8::from(labels[ab / s] == labels[ab % s])))
            .collect();
        let centers: Vec<f64> = (0..k * spec.embedding_dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let noise = Normal::new(0.0, 0.05).expect("fixed noise scale");
        let mut values = Vec::with_capacity(s * spec.embedding_dim);
        for &c in &labels {
            for d in 0..spec.embedding_dim {
                values.push((centers[c as usize * spec.embedding_dim + d] + noise.sample(&mut rng)) as f32);
            }
        }
        let lengths: Vec<i32> = (0..s)
            .map(|_| rng.random_range(spec.generated_tokens.0..=spec.generated_tokens.1) as i32)
            .collect();
        // intrinsic-regime samples carry no label information
        let sample_q = match spec.regime {
            Regime::ExtrinsicLike => q,
            Regime::IntrinsicLike => spec.base_prob,
        };
        let sum_logprob: Vec<f32> = lengths
            .iter()
            .map(|&len| {
                (0..len)
                    .map(|_| beta_mean(&mut rng, sample_q, spec.prob_concentration).ln())
                    .sum::<f64>() as f32
            })
            .collect();
        SampleBundle {
            trace_id: id.clone(),
            lengths,
            sum_logprob,
            embeddings: Some(Embeddings {
                dim: spec.embedding_dim,
                values,
            }),
            entailment: Some(entailment),
            cluster_labels: Some(labels),
        }
    });

    let quality = if hallucinated {
        rng.random_range(0.0..0.45)
    } else {
        rng.random_range(0.55..=1.0)
    };

    let trace = GenerationTrace {
        meta: TraceMeta {
            trace_id: id.clone(),
            model_id: spec.model_id.clone(),
            input_tokens: m,
            generated_tokens: t_len,
            layers: spec.layers,
            heads: spec.heads,
            total_tokens: n,
            decode_mode: DecodeMode::Greedy,
            dataset_id: spec.dataset_id(),
            text: None,
            embedding_source: bundle.as_ref().map(|_| "synthetic cluster centers".to_string()),
        },
        attention,
        tokens,
        bundle,
    };
    let truth = TraceTruth {
        trace_id: id,
        hallucinated,
        quality,
        span,
        clusters,
        mean_entropy,
    };
    Ok((trace, truth))
}

/// Generates a corpus. Output depends only on the spec, never on the number
/// of worker threads.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.check()?;
    let labels = draw_labels(spec);
    let pairs: Vec<(GenerationTrace, TraceTruth)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &y)| generate_one(spec, i, y))
        .collect::<Result<_, _>>()?;
    let (traces, truth) = pairs.into_iter().unzip();
    Ok(SynthCorpus {
        spec: spec.clone(),
        traces,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub generator: String,
    pub generator_version: String,
    pub spec: SynthSpec,
    pub traces: usize,
    pub hallucinated: usize,
    pub pinned_attention_auroc: f64,
    pub pinned_probability_auroc: f64,
    pub truth: Vec<TraceTruth>,
}

fn readme(spec: &SynthSpec, hallucinated: usize) -> String {
    format!(
        "# Synthetic corpus `{dataset}`\n\
         \n\
         Generated by `attnuq synth` (seed {seed}). {n} traces, {k} labeled as hallucinated.\n\
         Regime: {regime}; planted drop delta = {delta}.\n\
         \n\
         Layout: `index.jsonl` lists every trace with its quality label; traces live in\n\
         `{dir}/` as UQTR files; `{manifest}` records the full spec and per-trace ground truth.\n\
         \n\
         Pinned acceptance thresholds for the default intrinsic corpus (delta 0.3, n 400):\n\
         input-token RAUQ variants reach AUROC >= {att}, probability-only baselines stay\n\
         at or below {prob}. Both thresholds were fixed after a first oracle run and are\n\
         properties of this generator, not of any real model.\n",
        dataset = spec.dataset_id(),
        seed = spec.seed,
        n = spec.n_traces,
        k = hallucinated,
        regime = spec.regime.slug(),
        delta = spec.delta,
        dir = TRACE_DIR,
        manifest = MANIFEST_FILE,
        att = PINNED_ATTENTION_AUROC,
        prob = PINNED_PROBABILITY_AUROC,
    )
}

/// Writes traces, index, generation manifest and a README into `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &SynthCorpus) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    let trace_dir = dir.join(TRACE_DIR);
    fs::create_dir_all(&trace_dir).map_err(io(&trace_dir))?;
    let rows = corpus.index_rows();
    corpus
        .traces
        .par_iter()
        .zip(&rows)
        .try_for_each(|(trace, row)| container::write_trace(trace, dir.join(&row.path)))?;
    corpus::write_index(dir.join(corpus::INDEX_FILE), &rows)?;

    let hallucinated = corpus.truth.iter().filter(|t| t.hallucinated).count();
    let manifest = GenerationManifest {
        generator: "attnuq-synth".into(),
        generator_version: env!("CARGO_PKG_VERSION").into(),
        spec: corpus.spec.clone(),
        traces: corpus.traces.len(),
        hallucinated,
        pinned_attention_auroc: PINNED_ATTENTION_AUROC,
        pinned_probability_auroc: PINNED_PROBABILITY_AUROC,
        truth: corpus.truth.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io(&path))?;
    let path = dir.join("README.md");
    fs::write(&path, readme(&corpus.spec, hallucinated)).map_err(io(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{layer_head_stats, TokenAgg};
    use crate::baselines;
    use crate::container::validate;
    use crate::metrics::auroc;
    use crate::rauq::{rauq_score, select_heads, tune_alpha, RauqConfig, SelectionScope, SelectionStat};
    use crate::attention::HeadAgg;

    fn small(seed: u64, n: usize) -> SynthSpec {
        SynthSpec {
            seed,
            n_traces: n,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small(7, 12)).unwrap();
        let b = generate(&small(7, 12)).unwrap();
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(container::encode(x).unwrap(), container::encode(y).unwrap());
        }
        assert_eq!(a.truth, b.truth);
        let c = generate(&small(8, 12)).unwrap();
        assert_ne!(container::encode(&a.traces[0]).unwrap(), container::encode(&c.traces[0]).unwrap());
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let spec = small(3, 16);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| generate(&spec)).unwrap();
        let b = four.install(|| generate(&spec)).unwrap();
        assert_eq!(a.traces, b.traces);
    }

    #[test]
    fn label_balance_is_exact() {
        for (n, frac) in [(200, 0.5), (201, 0.3), (400, 0.25)] {
            let spec = SynthSpec {
                hallu_fraction: frac,
                samples: 0,
                ..small(1, n)
            };
            let c = generate(&spec).unwrap();
            let k = c.labels().iter().filter(|&&y| y).count() as f64;
            assert!((k / n as f64 - frac).abs() <= 0.02, "{n} {frac} {k}");
        }
    }

    #[test]
    fn every_trace_validates() {
        for regime in [Regime::IntrinsicLike, Regime::ExtrinsicLike] {
            let c = generate(&SynthSpec {
                regime,
                generated_tokens: (2, 9),
                ..small(11, 40)
            })
            .unwrap();
            for tr in &c.traces {
                assert!(validate(tr).is_empty(), "{}: {:?}", tr.id(), validate(tr));
            }
        }
    }

    #[test]
    fn labels_match_qualities() {
        let c = generate(&small(2, 50)).unwrap();
        for t in &c.truth {
            assert_eq!(t.hallucinated, t.quality < 0.5);
            assert_eq!(t.hallucinated, t.span.is_some());
        }
    }

    #[test]
    fn spans_cover_half_of_the_generated_positions() {
        let c = generate(&SynthSpec {
            generated_tokens: (2, 12),
            ..small(5, 60)
        })
        .unwrap();
        for (tr, t) in c.traces.iter().zip(&c.truth) {
            if let Some((lo, hi)) = t.span {
                let big_t = tr.meta.generated_tokens;
                assert!(lo >= 2 && hi <= big_t);
                assert!(hi + 1 - lo >= (big_t - 1).div_ceil(2), "{lo}..{hi} of {big_t}");
            }
        }
    }

    #[test]
    fn invalid_and_infeasible_specs() {
        let cases = [
            SynthSpec { delta: 0.0, ..SynthSpec::default() },
            SynthSpec { hallu_fraction: 1.0, ..SynthSpec::default() },
            SynthSpec { generated_tokens: (1, 4), ..SynthSpec::default() },
            SynthSpec { input_tokens: (3, 8), ..SynthSpec::default() },
            SynthSpec { planted_heads: Some(vec![4, 0, 0, 0]), ..SynthSpec::default() },
        ];
        for spec in cases {
            assert!(matches!(generate(&spec), Err(SynthError::Invalid(_))), "{spec:?}");
        }
        let too_strong = SynthSpec { delta: 0.7, ..SynthSpec::default() };
        assert!(matches!(generate(&too_strong), Err(SynthError::Infeasible { .. })));
    }

    #[test]
    fn stored_entropies_give_the_recorded_mean() {
        let c = generate(&small(4, 20)).unwrap();
        for (tr, t) in c.traces.iter().zip(&c.truth) {
            assert_eq!(baselines::predictive_entropy(tr).unwrap().score, t.mean_entropy);
        }
    }

    #[test]
    fn extrinsic_bundles_follow_the_label() {
        let c = generate(&SynthSpec {
            regime: Regime::ExtrinsicLike,
            ..small(6, 30)
        })
        .unwrap();
        for (tr, t) in c.traces.iter().zip(&c.truth) {
            let want = if t.hallucinated { 5 } else { 1 };
            assert_eq!(t.clusters, Some(want));
            let b = tr.bundle.as_ref().unwrap();
            let found = baselines::bundle_clusters(b, baselines::Linkage::FirstMember).unwrap();
            assert_eq!(found.cluster_count(), want);
        }
    }

    #[test]
    fn selected_head_on_a_faithful_trace_is_the_planted_one() {
        let c = generate(&small(9, 10)).unwrap();
        let cfg = RauqConfig::default();
        for (tr, t) in c.traces.iter().zip(&c.truth).filter(|(_, t)| !t.hallucinated) {
            let sel = select_heads(&[tr], &cfg).unwrap();
            for l in 0..tr.meta.layers {
                let planted = c.spec.planted_head(l);
                assert_eq!(sel.heads[l], planted, "{}", t.trace_id);
                let stat = crate::attention::head_aggregate(tr, TokenAgg::PrevToken, HeadAgg::SelectedHead, Some(&sel), false)
                    .unwrap();
                assert_eq!(stat.values[l], layer_head_stats(tr, l, TokenAgg::PrevToken)[planted]);
            }
        }
    }

    #[test]
    fn calibrated_selection_recovers_planted_heads_across_seeds() {
        let cfg = RauqConfig {
            selection_scope: SelectionScope::Calibrated,
            selection_stat: SelectionStat::PrevToken,
            ..RauqConfig::default()
        };
        let mut hits = 0;
        for seed in 0..100 {
            let spec = SynthSpec { samples: 0, ..small(seed, 20) };
            let c = generate(&spec).unwrap();
            let refs: Vec<&GenerationTrace> = c.traces.iter().collect();
            let sel = select_heads(&refs, &cfg).unwrap();
            if (0..spec.layers).all(|l| sel.heads[l] == spec.planted_head(l)) {
                hits += 1;
            }
        }
        assert!(hits >= 99, "{hits}/100");
    }

    fn input_auroc(c: &SynthCorpus) -> f64 {
        let cfg = RauqConfig::default().with_variant(TokenAgg::InputTokens, HeadAgg::MeanHeads);
        let s: Vec<f64> = c.traces.iter().map(|t| rauq_score(t, &cfg, None).unwrap().score).collect();
        auroc(&s, &c.labels()).unwrap()
    }

    #[test]
    fn vanishing_delta_is_a_null_signal() {
        let c = generate(&SynthSpec { delta: 1e-6, samples: 0, ..small(21, 400) }).unwrap();
        let a = input_auroc(&c);
        assert!((a - 0.5).abs() < 0.08, "{a}");
    }

    #[test]
    fn input_attention_separates_intrinsic_traces() {
        let c = generate(&SynthSpec { samples: 0, ..small(22, 200) }).unwrap();
        assert!(input_auroc(&c) >= 0.9);
    }

    #[test]
    fn tuning_on_attention_signal_prefers_small_alpha() {
        let c = generate(&SynthSpec { samples: 0, ..small(23, 120) }).unwrap();
        let cal: Vec<(&GenerationTrace, bool)> = c.traces.iter().zip(c.labels()).collect();
        let template = RauqConfig::default().with_variant(TokenAgg::InputTokens, HeadAgg::MeanHeads);
        let tuned = tune_alpha(&cal, &template).unwrap();
        assert!(tuned.alpha < 0.9);
        let at = |a: f64| tuned.table.iter().find(|(x, _)| *x == a).unwrap().1;
        assert!(at(tuned.alpha) >= at(0.9));
    }

    #[test]
    fn written_corpus_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(30, 6)).unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let opened = corpus::Corpus::open(dir.path()).unwrap();
        assert_eq!(opened.rows.len(), 6);
        let loaded: Vec<_> = opened
            .load_all(container::ReadOptions::default())
            .into_iter()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(loaded, c.traces);
        assert_eq!(opened.labeled(), c.labeled());
        assert!(dir.path().join(MANIFEST_FILE).exists());
        assert!(dir.path().join("README.md").exists());
    }
}
