// SPDX-License-Identifier: Apache-2.0

//! Small trace fixtures shared by unit tests, integration tests and the
//! acceptance suite.

use rand::Rng;

use crate::trace::{AttentionTensor, DecodeMode, GenerationTrace, TokenRecord, TraceMeta};

pub fn meta(id: &str, m: usize, t: usize, layers: usize, heads: usize) -> TraceMeta {
    TraceMeta {
        trace_id: id.to_string(),
        model_id: "fixture".into(),
        input_tokens: m,
        generated_tokens: t,
        layers,
        heads,
        total_tokens: m + t,
        decode_mode: DecodeMode::Greedy,
        dataset_id: "fixture".into(),
        text: None,
        embedding_source: None,
    }
}

/// Builds a trace from a flat `[L][H][N][N]` buffer and token probabilities.
pub fn trace_from_rows(
    m: usize,
    t: usize,
    layers: usize,
    heads: usize,
    rows: Vec<f32>,
    probs: &[f32],
) -> GenerationTrace {
    let n = m + t;
    assert_eq!(probs.len(), t);
    GenerationTrace {
        meta: meta("fixture", m, t, layers, heads),
        attention: AttentionTensor::from_vec(layers, heads, n, rows).expect("fixture shape"),
        tokens: probs
            .iter()
            .enumerate()
            .map(|(i, &p)| TokenRecord {
                prob: p,
                step_entropy: None,
                token_id: i as i32,
            })
            .collect(),
        bundle: None,
    }
}

/// A random valid trace with `1..=max_layers` layers, `1..=max_heads` heads,
/// `1..=max_input` prompt tokens and `1..=max_gen` generated tokens.
///
/// Rows are normalized random weights; a fraction of entries are zeroed to
/// exercise sparse rows.
pub fn random_trace<R: Rng>(
    rng: &mut R,
    max_layers: usize,
    max_heads: usize,
    max_input: usize,
    max_gen: usize,
) -> GenerationTrace {
    let layers = rng.random_range(1..=max_layers);
    let heads = rng.random_range(1..=max_heads);
    let m = rng.random_range(1..=max_input);
    let t = rng.random_range(1..=max_gen);
    let n = m + t;
    let mut attention = AttentionTensor::zeros(layers, heads, n);
    for l in 0..layers {
        for h in 0..heads {
            for i in 0..n {
                let mut w: Vec<f64> = (0..=i)
                    .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
                    .collect();
                let total: f64 = w.iter().sum();
                if total == 0.0 {
                    w[i] = 1.0;
                } else {
                    w.iter_mut().for_each(|v| *v /= total);
                }
                let row = attention.row_mut(l, h, i);
                for (j, v) in w.into_iter().enumerate() {
                    row[j] = v as f32;
                }
            }
        }
    }
    let tokens = (0..t)
        .map(|i| TokenRecord {
            prob: rng.random_range(0.01f32..=1.0),
            step_entropy: Some(rng.random_range(0.0f32..4.0)),
            token_id: i as i32,
        })
        .collect();
    GenerationTrace {
        meta: meta(&format!("rand-{}", rng.random::<u32>()), m, t, layers, heads),
        attention,
        tokens,
        bundle: None,
    }
}
