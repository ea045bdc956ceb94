// SPDX-License-Identifier: Apache-2.0

//! The `UQTR` on-disk container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UQTR" | version: u32 (=1) | manifest_len: u64 | manifest (UTF-8 JSON) | blobs
//! ```
//!
//! The manifest carries the trace metadata and one entry per blob with its
//! name, dtype (`f32` or `i32`), shape, byte offset and byte length. Offsets
//! are relative to the first byte after the manifest. Blobs are written
//! back to back, row-major, in manifest order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{
    AttentionTensor, Embeddings, GenerationTrace, SampleBundle, TokenRecord, TraceMeta,
};

pub const MAGIC: &[u8; 4] = b"UQTR";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 4 + 4 + 8;

/// Row sums must be within this distance of one.
pub const ROW_SUM_TOL: f32 = 1e-4;
/// Attention entries may overshoot one by at most this much.
pub const RANGE_TOL: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}, expected \"UQTR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (this reader understands version 1)")]
    UnsupportedVersion(u32),
    #[error("file too short for the container preamble ({0} bytes)")]
    TruncatedPreamble(usize),
    #[error("manifest declares {declared} bytes but only {available} remain")]
    TruncatedManifest { declared: u64, available: usize },
    #[error("manifest is not valid JSON: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob `{name}` needs bytes {start}..{end} of the data section but it has {available}")]
    LengthMismatch {
        name: String,
        start: u64,
        end: u64,
        available: usize,
    },
    #[error("blob `{name}`: {reason}")]
    BadBlob { name: String, reason: String },
    #[error("missing required blob `{0}`")]
    MissingBlob(&'static str),
    #[error("{0} trailing bytes after the last blob")]
    TrailingBytes(usize),
    #[error("trace `{trace_id}` fails validation: {}", summarize(.violations))]
    Invalid {
        trace_id: String,
        violations: Vec<Violation>,
    },
}

fn summarize(violations: &[Violation]) -> String {
    let head: Vec<String> = violations.iter().take(3).map(|v| v.to_string()).collect();
    if violations.len() > 3 {
        format!("{} (+{} more)", head.join("; "), violations.len() - 3)
    } else {
        head.join("; ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    ZeroCount,
    TotalMismatch,
    ShapeMismatch,
    NonFinite,
    OutOfRange,
    Causality,
    RowSum,
    TokenCount,
    ProbRange,
    EntropyRange,
    MixedEntropy,
    BundleTraceId,
    EmptyBundle,
    SampleLength,
    LogProbRange,
    EmbeddingShape,
    EntailmentValue,
    EntailmentAsymmetric,
    EntailmentDiagonal,
    ClusterLabels,
}

/// One failed invariant, with whatever indices locate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col: Option<usize>,
    pub detail: String,
}

impl Violation {
    fn new(code: ViolationCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            layer: None,
            head: None,
            row: None,
            col: None,
            detail: detail.into(),
        }
    }

    fn at(mut self, layer: usize, head: usize, row: usize, col: Option<usize>) -> Self {
        self.layer = Some(layer);
        self.head = Some(head);
        self.row = Some(row);
        self.col = col;
        self
    }

    fn index(mut self, row: usize, col: Option<usize>) -> Self {
        self.row = Some(row);
        self.col = col;
        self
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.code)?;
        if let (Some(l), Some(h)) = (self.layer, self.head) {
            write!(f, " at layer {l} head {h}")?;
        }
        if let Some(r) = self.row {
            write!(f, " row {r}")?;
        }
        if let Some(c) = self.col {
            write!(f, " col {c}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Checks every structural invariant of a trace. An empty result means valid.
pub fn validate(trace: &GenerationTrace) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();
    let meta = &trace.meta;

    for (name, v) in [
        ("input_tokens", meta.input_tokens),
        ("generated_tokens", meta.generated_tokens),
        ("layers", meta.layers),
        ("heads", meta.heads),
    ] {
        if v == 0 {
            out.push(Violation::new(ZeroCount, format!("{name} must be positive")));
        }
    }
    if meta.total_tokens != meta.input_tokens + meta.generated_tokens {
        out.push(Violation::new(
            TotalMismatch,
            format!(
                "total_tokens {} != input_tokens {} + generated_tokens {}",
                meta.total_tokens, meta.input_tokens, meta.generated_tokens
            ),
        ));
    }

    let attn = &trace.attention;
    let expected = [meta.layers, meta.heads, meta.total_tokens, meta.total_tokens];
    if attn.shape() != expected {
        out.push(Violation::new(
            ShapeMismatch,
            format!("attention shape {:?}, meta implies {:?}", attn.shape(), expected),
        ));
    } else {
        validate_attention(attn, &mut out);
    }

    if trace.tokens.len() != meta.generated_tokens {
        out.push(Violation::new(
            TokenCount,
            format!(
                "{} token records for {} generated tokens",
                trace.tokens.len(),
                meta.generated_tokens
            ),
        ));
    }
    let with_entropy = trace.tokens.iter().filter(|t| t.step_entropy.is_some()).count();
    if with_entropy != 0 && with_entropy != trace.tokens.len() {
        out.push(Violation::new(
            MixedEntropy,
            "step entropies must be present for all tokens or none",
        ));
    }
    for (t, tok) in trace.tokens.iter().enumerate() {
        if !(tok.prob > 0.0 && tok.prob <= 1.0) {
            out.push(Violation::new(ProbRange, format!("prob {} not in (0, 1]", tok.prob)).index(t, None));
        }
        if let Some(e) = tok.step_entropy {
            if !(e.is_finite() && e >= 0.0) {
                out.push(Violation::new(EntropyRange, format!("entropy {e} is not a finite non-negative value")).index(t, None));
            }
        }
    }

    if let Some(bundle) = &trace.bundle {
        if bundle.trace_id != meta.trace_id {
            out.push(Violation::new(
                BundleTraceId,
                format!("bundle links to `{}`, trace is `{}`", bundle.trace_id, meta.trace_id),
            ));
        }
        validate_bundle(bundle, &mut out);
    }
    out
}

fn validate_attention(attn: &AttentionTensor, out: &mut Vec<Violation>) {
    use ViolationCode::*;
    let n = attn.n();
    for l in 0..attn.layers() {
        for h in 0..attn.heads() {
            for i in 0..n {
                let row = attn.row(l, h, i);
                let mut sum = 0.0f64;
                let mut finite = true;
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        out.push(Violation::new(NonFinite, format!("value {v}")).at(l, h, i, Some(j)));
                        finite = false;
                        continue;
                    }
                    if j > i {
                        if v != 0.0 {
                            out.push(
                                Violation::new(Causality, format!("{v} above the diagonal"))
                                    .at(l, h, i, Some(j)),
                            );
                        }
                        continue;
                    }
                    if !(0.0..=1.0 + RANGE_TOL).contains(&v) {
                        out.push(Violation::new(OutOfRange, format!("{v} outside [0, 1]")).at(l, h, i, Some(j)));
                    }
                    sum += v as f64;
                }
                if finite && (sum - 1.0).abs() > ROW_SUM_TOL as f64 {
                    out.push(Violation::new(RowSum, format!("causal row sums to {sum}")).at(l, h, i, None));
                }
            }
        }
    }
}

fn validate_bundle(bundle: &SampleBundle, out: &mut Vec<Violation>) {
    use ViolationCode::*;
    let s = bundle.len();
    if s == 0 {
        out.push(Violation::new(EmptyBundle, "bundle has no samples"));
        return;
    }
    if bundle.sum_logprob.len() != s {
        out.push(Violation::new(
            SampleLength,
            format!("{} log-prob sums for {s} samples", bundle.sum_logprob.len()),
        ));
    }
    for (i, &len) in bundle.lengths.iter().enumerate() {
        if len < 1 {
            out.push(Violation::new(SampleLength, format!("sample length {len}")).index(i, None));
        }
    }
    for (i, &lp) in bundle.sum_logprob.iter().enumerate() {
        if !(lp.is_finite() && lp <= 0.0) {
            out.push(Violation::new(LogProbRange, format!("sum log-prob {lp}")).index(i, None));
        }
    }
    if let Some(emb) = &bundle.embeddings {
        if emb.dim == 0 || emb.values.len() != s * emb.dim {
            out.push(Violation::new(
                EmbeddingShape,
                format!("{} values for {s} samples of dim {}", emb.values.len(), emb.dim),
            ));
        } else if let Some(pos) = emb.values.iter().position(|v| !v.is_finite()) {
            out.push(Violation::new(NonFinite, "non-finite embedding value").index(pos / emb.dim, Some(pos % emb.dim)));
        }
    }
    if let Some(ent) = &bundle.entailment {
        if ent.len() != s * s {
            out.push(Violation::new(
                EntailmentValue,
                format!("entailment has {} entries, expected {}", ent.len(), s * s),
            ));
        } else {
            for a in 0..s {
                for b in 0..s {
                    let v = ent[a * s + b];
                    if v != 0.0 && v != 1.0 {
                        out.push(Violation::new(EntailmentValue, format!("{v} is not 0 or 1")).index(a, Some(b)));
                    }
                    if a == b && v != 1.0 {
                        out.push(Violation::new(EntailmentDiagonal, "diagonal must be 1").index(a, Some(b)));
                    }
                    if b > a && v != ent[b * s + a] {
                        out.push(Violation::new(EntailmentAsymmetric, "matrix is not symmetric").index(a, Some(b)));
                    }
                }
            }
        }
    }
    if let Some(labels) = &bundle.cluster_labels {
        if labels.len() != s {
            out.push(Violation::new(ClusterLabels, format!("{} labels for {s} samples", labels.len())));
        } else if let Some(reason) = check_cluster_ids(labels) {
            out.push(Violation::new(ClusterLabels, reason));
        }
    }
}

/// Cluster ids must be exactly `0..K` with every id used.
pub(crate) fn check_cluster_ids(labels: &[i32]) -> Option<String> {
    let k = labels.iter().copied().max().unwrap_or(-1) + 1;
    if labels.iter().any(|&l| l < 0) {
        return Some("negative cluster id".into());
    }
    let mut seen = vec![false; k as usize];
    for &l in labels {
        seen[l as usize] = true;
    }
    seen.iter()
        .position(|s| !s)
        .map(|gap| format!("cluster id {gap} is unused but {} exists", k - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub trace_id: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: TraceMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BundleHeader>,
    pub blobs: Vec<BlobEntry>,
}

pub mod blob {
    pub const ATTENTION: &str = "attention";
    pub const TOKEN_PROB: &str = "token_prob";
    pub const TOKEN_ENTROPY: &str = "token_entropy";
    pub const TOKEN_ID: &str = "token_id";
    pub const SAMPLE_LENGTH: &str = "sample_length";
    pub const SAMPLE_SUM_LOGPROB: &str = "sample_sum_logprob";
    pub const SAMPLE_EMBEDDING: &str = "sample_embedding";
    pub const ENTAILMENT: &str = "entailment";
    pub const CLUSTER_LABELS: &str = "cluster_labels";
}

enum BlobData<'a> {
    F32(&'a [f32]),
    F32Owned(Vec<f32>),
    I32(&'a [i32]),
}

impl BlobData<'_> {
    fn dtype(&self) -> DType {
        match self {
            BlobData::F32(_) | BlobData::F32Owned(_) => DType::F32,
            BlobData::I32(_) => DType::I32,
        }
    }

    fn byte_len(&self) -> usize {
        4 * match self {
            BlobData::F32(v) => v.len(),
            BlobData::F32Owned(v) => v.len(),
            BlobData::I32(v) => v.len(),
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        match self {
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F32Owned(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// Serializes a trace. Refuses traces that fail [`validate`].
pub fn encode(trace: &GenerationTrace) -> Result<Vec<u8>, ContainerError> {
    let violations = validate(trace);
    if !violations.is_empty() {
        return Err(ContainerError::Invalid {
            trace_id: trace.meta.trace_id.clone(),
            violations,
        });
    }
    Ok(encode_unchecked(trace))
}

/// Serializes without validation; used by tests that need corrupt files.
pub fn encode_unchecked(trace: &GenerationTrace) -> Vec<u8> {
    let t = trace.tokens.len();
    let mut blobs: Vec<(&str, Vec<usize>, BlobData)> = vec![
        (
            blob::ATTENTION,
            trace.attention.shape().to_vec(),
            BlobData::F32(trace.attention.as_slice()),
        ),
        (
            blob::TOKEN_PROB,
            vec![t],
            BlobData::F32Owned(trace.tokens.iter().map(|x| x.prob).collect()),
        ),
    ];
    if trace.has_entropies() {
        blobs.push((
            blob::TOKEN_ENTROPY,
            vec![t],
            BlobData::F32Owned(trace.tokens.iter().map(|x| x.step_entropy.unwrap_or(0.0)).collect()),
        ));
    }
    let ids: Vec<i32> = trace.tokens.iter().map(|x| x.token_id).collect();

    let mut bundle_header = None;
    if let Some(b) = &trace.bundle {
        let s = b.len();
        bundle_header = Some(BundleHeader {
            trace_id: b.trace_id.clone(),
            samples: s,
        });
        blobs.push((blob::SAMPLE_LENGTH, vec![s], BlobData::I32(&b.lengths)));
        blobs.push((
            blob::SAMPLE_SUM_LOGPROB,
            vec![b.sum_logprob.len()],
            BlobData::F32(&b.sum_logprob),
        ));
        if let Some(e) = &b.embeddings {
            blobs.push((
                blob::SAMPLE_EMBEDDING,
                vec![e.count(), e.dim],
                BlobData::F32(&e.values),
            ));
        }
        if let Some(e) = &b.entailment {
            blobs.push((blob::ENTAILMENT, vec![s, s], BlobData::F32(e)));
        }
        if let Some(c) = &b.cluster_labels {
            blobs.push((blob::CLUSTER_LABELS, vec![c.len()], BlobData::I32(c)));
        }
    }
    // token ids go right after the token arrays so the bundle stays contiguous
    blobs.insert(
        if trace.has_entropies() { 3 } else { 2 },
        (blob::TOKEN_ID, vec![t], BlobData::I32(&ids)),
    );

    let mut entries = Vec::with_capacity(blobs.len());
    let mut offset = 0u64;
    for (name, shape, data) in &blobs {
        let length = data.byte_len() as u64;
        entries.push(BlobEntry {
            name: name.to_string(),
            dtype: data.dtype(),
            shape: shape.clone(),
            offset,
            length,
        });
        offset += length;
    }
    let manifest = Manifest {
        meta: trace.meta.clone(),
        bundle: bundle_header,
        blobs: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut out = Vec::with_capacity(PREAMBLE_LEN + manifest_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for (_, _, data) in &blobs {
        data.write_to(&mut out);
    }
    out
}

/// Parses the preamble and manifest only.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize), ContainerError> {
    if bytes.len() < PREAMBLE_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(ContainerError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(ContainerError::TruncatedPreamble(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = bytes.len() - PREAMBLE_LEN;
    if declared > available as u64 {
        return Err(ContainerError::TruncatedManifest {
            declared,
            available,
        });
    }
    let end = PREAMBLE_LEN + declared as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[PREAMBLE_LEN..end])?;
    Ok((manifest, end))
}

/// A blob's shape and its decoded values.
type Shaped<T> = (Vec<usize>, Vec<T>);

struct BlobReader<'a> {
    data: &'a [u8],
    entries: &'a [BlobEntry],
}

impl<'a> BlobReader<'a> {
    fn entry(&self, name: &str) -> Option<&'a BlobEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn bytes(&self, entry: &BlobEntry, dtype: DType) -> Result<&'a [u8], ContainerError> {
        if entry.dtype != dtype {
            return Err(ContainerError::BadBlob {
                name: entry.name.clone(),
                reason: format!("dtype {:?}, expected {dtype:?}", entry.dtype),
            });
        }
        let numel: usize = entry.shape.iter().product();
        if entry.length != 4 * numel as u64 {
            return Err(ContainerError::BadBlob {
                name: entry.name.clone(),
                reason: format!("shape {:?} needs {} bytes, manifest says {}", entry.shape, 4 * numel, entry.length),
            });
        }
        let end = entry.offset.saturating_add(entry.length);
        if end > self.data.len() as u64 {
            return Err(ContainerError::LengthMismatch {
                name: entry.name.clone(),
                start: entry.offset,
                end,
                available: self.data.len(),
            });
        }
        Ok(&self.data[entry.offset as usize..end as usize])
    }

    fn f32s(&self, name: &str) -> Result<Option<Shaped<f32>>, ContainerError> {
        let Some(entry) = self.entry(name) else {
            return Ok(None);
        };
        let raw = self.bytes(entry, DType::F32)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Some((entry.shape.clone(), values)))
    }

    fn i32s(&self, name: &str) -> Result<Option<Shaped<i32>>, ContainerError> {
        let Some(entry) = self.entry(name) else {
            return Ok(None);
        };
        let raw = self.bytes(entry, DType::I32)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Some((entry.shape.clone(), values)))
    }
}

fn bad_shape(name: &str, got: &[usize], want: &[usize]) -> ContainerError {
    ContainerError::BadBlob {
        name: name.to_string(),
        reason: format!("shape {got:?}, expected {want:?}"),
    }
}

fn expect_shape(name: &str, got: &[usize], want: &[usize]) -> Result<(), ContainerError> {
    if got == want {
        Ok(())
    } else {
        Err(bad_shape(name, got, want))
    }
}

/// Decodes a container. With `check` set, the trace is validated and any
/// violation is returned as [`ContainerError::Invalid`].
pub fn decode(bytes: &[u8], check: bool) -> Result<GenerationTrace, ContainerError> {
    let (manifest, data_start) = read_manifest(bytes)?;
    let data = &bytes[data_start..];
    let reader = BlobReader {
        data,
        entries: &manifest.blobs,
    };
    let meta = manifest.meta.clone();

    // Every declared blob must fit, even ones we would otherwise skip.
    let mut max_end = 0u64;
    for entry in &manifest.blobs {
        reader.bytes(entry, entry.dtype)?;
        max_end = max_end.max(entry.offset + entry.length);
    }
    if (data.len() as u64) > max_end {
        return Err(ContainerError::TrailingBytes(data.len() - max_end as usize));
    }

    let (shape, values) = reader
        .f32s(blob::ATTENTION)?
        .ok_or(ContainerError::MissingBlob(blob::ATTENTION))?;
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(bad_shape(blob::ATTENTION, &shape, &[meta.layers, meta.heads, meta.total_tokens, meta.total_tokens]));
    }
    let attention = AttentionTensor::from_vec(shape[0], shape[1], shape[2], values)
        .expect("blob length already checked against shape");

    let (pshape, probs) = reader
        .f32s(blob::TOKEN_PROB)?
        .ok_or(ContainerError::MissingBlob(blob::TOKEN_PROB))?;
    let t = pshape.first().copied().unwrap_or(0);
    expect_shape(blob::TOKEN_PROB, &pshape, &[t])?;
    let (ishape, ids) = reader
        .i32s(blob::TOKEN_ID)?
        .ok_or(ContainerError::MissingBlob(blob::TOKEN_ID))?;
    expect_shape(blob::TOKEN_ID, &ishape, &[t])?;
    let entropies = match reader.f32s(blob::TOKEN_ENTROPY)? {
        Some((eshape, e)) => {
            expect_shape(blob::TOKEN_ENTROPY, &eshape, &[t])?;
            Some(e)
        }
        None => None,
    };
    let tokens = (0..t)
        .map(|i| TokenRecord {
            prob: probs[i],
            step_entropy: entropies.as_ref().map(|e| e[i]),
            token_id: ids[i],
        })
        .collect();

    let bundle = match &manifest.bundle {
        None => None,
        Some(header) => {
            let s = header.samples;
            let (lshape, lengths) = reader
                .i32s(blob::SAMPLE_LENGTH)?
                .ok_or(ContainerError::MissingBlob(blob::SAMPLE_LENGTH))?;
            expect_shape(blob::SAMPLE_LENGTH, &lshape, &[s])?;
            let (sshape, sum_logprob) = reader
                .f32s(blob::SAMPLE_SUM_LOGPROB)?
                .ok_or(ContainerError::MissingBlob(blob::SAMPLE_SUM_LOGPROB))?;
            expect_shape(blob::SAMPLE_SUM_LOGPROB, &sshape, &[s])?;
            let embeddings = match reader.f32s(blob::SAMPLE_EMBEDDING)? {
                Some((eshape, values)) => {
                    if eshape.len() != 2 || eshape[0] != s {
                        return Err(bad_shape(blob::SAMPLE_EMBEDDING, &eshape, &[s, 0]));
                    }
                    Some(Embeddings {
                        dim: eshape[1],
                        values,
                    })
                }
                None => None,
            };
            let entailment = match reader.f32s(blob::ENTAILMENT)? {
                Some((eshape, values)) => {
                    expect_shape(blob::ENTAILMENT, &eshape, &[s, s])?;
                    Some(values)
                }
                None => None,
            };
            let cluster_labels = match reader.i32s(blob::CLUSTER_LABELS)? {
                Some((cshape, values)) => {
                    expect_shape(blob::CLUSTER_LABELS, &cshape, &[s])?;
                    Some(values)
                }
                None => None,
            };
            Some(SampleBundle {
                trace_id: header.trace_id.clone(),
                lengths,
                sum_logprob,
                embeddings,
                entailment,
                cluster_labels,
            })
        }
    };

    let trace = GenerationTrace {
        meta,
        attention,
        tokens,
        bundle,
    };
    if check {
        let violations = validate(&trace);
        if !violations.is_empty() {
            return Err(ContainerError::Invalid {
                trace_id: trace.meta.trace_id.clone(),
                violations,
            });
        }
    }
    Ok(trace)
}

pub fn write_trace(trace: &GenerationTrace, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let path = path.as_ref();
    let bytes = encode(trace)?;
    let io_err = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    pub validate: bool,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self { validate: true }
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<GenerationTrace, ContainerError> {
    read_trace_with(path, ReadOptions::default())
}

pub fn read_trace_with(
    path: impl AsRef<Path>,
    opts: ReadOptions,
) -> Result<GenerationTrace, ContainerError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, opts.validate)
}
