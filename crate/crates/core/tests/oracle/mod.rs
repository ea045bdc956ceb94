// SPDX-License-Identifier: Apache-2.0

//! Straight-line reference implementations. Nothing here calls into the
//! library's numeric code; only the trace data types are shared.

#![allow(dead_code, clippy::needless_range_loop)]

use attnuq::trace::GenerationTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tok {
    Prev,
    All,
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Selected,
    Mean,
    Rollout,
}

pub const TOKS: [Tok; 3] = [Tok::Prev, Tok::All, Tok::Input];
pub const HEADS: [Head; 3] = [Head::Selected, Head::Mean, Head::Rollout];

pub fn method_id(tok: Tok, head: Head) -> String {
    let h = match head {
        Head::Selected => "sel",
        Head::Mean => "meanheads",
        Head::Rollout => "rollout",
    };
    let t = match tok {
        Tok::Prev => "prev",
        Tok::All => "all",
        Tok::Input => "input",
    };
    format!("rauq.{h}.{t}")
}

fn dense(trace: &GenerationTrace, l: usize, h: usize) -> Vec<Vec<f64>> {
    let n = trace.meta.total_tokens;
    (0..n)
        .map(|i| (0..n).map(|j| trace.attention.get(l, h, i, j) as f64).collect())
        .collect()
}

/// Statistic of a full row for generated token `t` (1-based).
fn row_stat(row: &[f64], m: usize, t: usize, tok: Tok) -> f64 {
    let i = m + t - 1;
    match tok {
        Tok::Prev => row[i - 1],
        Tok::All => {
            let mut s = 0.0;
            for j in 0..i {
                s += row[j];
            }
            s / i as f64
        }
        Tok::Input => {
            let mut s = 0.0;
            for j in 0..m {
                s += row[j];
            }
            s / m as f64
        }
    }
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

/// Rollout chain with dense products: `R_1 = (W_1 + I)/2`,
/// `R_l = ((W_l + I)/2) R_{l-1}`, `W_l` the head mean.
pub fn rollout(trace: &GenerationTrace) -> Vec<Vec<Vec<f64>>> {
    let n = trace.meta.total_tokens;
    let heads = trace.meta.heads;
    let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
    for l in 0..trace.meta.layers {
        let mut w = vec![vec![0.0; n]; n];
        for h in 0..heads {
            let a = dense(trace, l, h);
            for i in 0..n {
                for j in 0..n {
                    w[i][j] += a[i][j] / heads as f64;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                w[i][j] = 0.5 * w[i][j] + if i == j { 0.5 } else { 0.0 };
            }
        }
        let r = match out.last() {
            None => w,
            Some(prev) => matmul(&w, prev),
        };
        out.push(r);
    }
    out
}

/// `[L][T]` per-layer attention statistic, or `None` when selection is
/// undefined (`T < 2`).
pub fn layer_stats(trace: &GenerationTrace, tok: Tok, head: Head) -> Option<Vec<Vec<f64>>> {
    let m = trace.meta.input_tokens;
    let t_len = trace.meta.generated_tokens;
    let heads = trace.meta.heads;
    let rolled = if head == Head::Rollout { Some(rollout(trace)) } else { None };
    let mut out = Vec::new();
    for l in 0..trace.meta.layers {
        let per_head: Vec<Vec<f64>> = (0..heads)
            .map(|h| {
                let a = dense(trace, l, h);
                (1..=t_len).map(|t| row_stat(&a[m + t - 1], m, t, tok)).collect()
            })
            .collect();
        let series: Vec<f64> = match head {
            Head::Selected => {
                if t_len < 2 {
                    return None;
                }
                let mut best = 0;
                let mut best_mean = f64::NEG_INFINITY;
                for (h, s) in per_head.iter().enumerate() {
                    let mut total = 0.0;
                    for v in &s[1..] {
                        total += v;
                    }
                    let mean = total / (t_len - 1) as f64;
                    if mean > best_mean {
                        best_mean = mean;
                        best = h;
                    }
                }
                per_head[best].clone()
            }
            Head::Mean => (0..t_len)
                .map(|t| {
                    let mut s = 0.0;
                    for ph in &per_head {
                        s += ph[t];
                    }
                    s / heads as f64
                })
                .collect(),
            Head::Rollout => {
                let r = &rolled.as_ref().unwrap()[l];
                (1..=t_len).map(|t| row_stat(&r[m + t - 1], m, t, tok)).collect()
            }
        };
        out.push(series);
    }
    Some(out)
}

/// Max over all layers of `-(1/T) Σ ln max(c_t, 1e-10)` with
/// `c_1 = p_1`, `c_t = α p_t + (1-α) a_t c_{t-1}`.
pub fn rauq(trace: &GenerationTrace, alpha: f64, tok: Tok, head: Head) -> Option<f64> {
    let stats = layer_stats(trace, tok, head)?;
    let p: Vec<f64> = trace.tokens.iter().map(|t| t.prob as f64).collect();
    let mut best = f64::NEG_INFINITY;
    for a in &stats {
        let mut c = p[0];
        let mut sum = c.max(1e-10).ln();
        for t in 1..p.len() {
            c = alpha * p[t] + (1.0 - alpha) * a[t] * c;
            sum += c.max(1e-10).ln();
        }
        let u = -sum / p.len() as f64;
        if u > best {
            best = u;
        }
    }
    Some(best)
}

pub fn mean_nll(trace: &GenerationTrace) -> f64 {
    let mut s = 0.0;
    for t in &trace.tokens {
        s -= (t.prob as f64).ln();
    }
    s / trace.tokens.len() as f64
}

/// Fraction of (positive, negative) pairs ordered correctly, ties count half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Mean of `ln(max(λ, 0) + ρ)` over the eigenvalues of `J Z Zᵀ J`.
pub fn eigenscore(rows: &[Vec<f64>], rho: f64) -> f64 {
    let s = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            mean[k] += r[k] / s as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| (0..d).map(|k| r[k] - mean[k]).collect())
        .collect();
    let gram: Vec<Vec<f64>> = (0..s)
        .map(|i| {
            (0..s)
                .map(|j| (0..d).map(|k| centered[i][k] * centered[j][k]).sum())
                .collect()
        })
        .collect();
    let eig = jacobi_eigenvalues(gram);
    eig.iter().map(|&l| (l.max(0.0) + rho).ln()).sum::<f64>() / s as f64
}

/// `-Σ (n_k/S) ln(n_k/S)` from cluster labels.
pub fn discrete_entropy(labels: &[usize]) -> f64 {
    let s = labels.len() as f64;
    let k = labels.iter().max().unwrap() + 1;
    let mut h = 0.0;
    for c in 0..k {
        let n = labels.iter().filter(|&&l| l == c).count() as f64;
        if n > 0.0 {
            h -= n / s * (n / s).ln();
        }
    }
    h
}

/// PRR from scratch: area between the method's and random replacement
/// curves over the oracle's, on the `k = 0..N-1` grid with replaced
/// answers scoring 1.
pub fn prr(scores: &[f64], quality: &[f64]) -> f64 {
    let n = scores.len();
    let curve = |order: &[usize]| -> Vec<f64> {
        (0..n)
            .map(|k| {
                let mut total = k as f64;
                for &i in &order[k..] {
                    total += quality[i];
                }
                total / n as f64
            })
            .collect()
    };
    let mut by_score: Vec<usize> = (0..n).collect();
    by_score.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut by_quality: Vec<usize> = (0..n).collect();
    by_quality.sort_by(|&a, &b| quality[a].partial_cmp(&quality[b]).unwrap().then(a.cmp(&b)));
    let mean_q: f64 = quality.iter().sum::<f64>() / n as f64;
    let random: Vec<f64> = (0..n).map(|k| mean_q + (1.0 - mean_q) * k as f64 / n as f64).collect();
    let m = curve(&by_score);
    let o = curve(&by_quality);
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..n {
        num += m[k] - random[k];
        den += o[k] - random[k];
    }
    num / den
}
