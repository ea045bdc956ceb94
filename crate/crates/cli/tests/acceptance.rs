// SPDX-License-Identifier: Apache-2.0

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use attnuq::attention::{build_rollout, HeadAgg, TokenAgg};
use attnuq::baselines::{self, cluster_entailment, eigenscore, semantic_entropy, EigenConfig, Linkage, SemanticMode};
use attnuq::container::{self, ContainerError};
use attnuq::metrics::{aurac, auroc, binarize, prr};
use attnuq::rauq::{self, RauqConfig, RauqError};
use attnuq::registry::{score_all, Registry, ScorerOptions};
use attnuq::synth::{self, Regime, SynthSpec};
use attnuq::testing::random_trace;
use attnuq::trace::{Embeddings, GenerationTrace, SampleBundle};
use oracle::{Head, Tok};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn variant(tok: Tok, head: Head) -> (TokenAgg, HeadAgg) {
    let t = match tok {
        Tok::Prev => TokenAgg::PrevToken,
        Tok::All => TokenAgg::AllPast,
        Tok::Input => TokenAgg::InputTokens,
    };
    let h = match head {
        Head::Selected => HeadAgg::SelectedHead,
        Head::Mean => HeadAgg::MeanHeads,
        Head::Rollout => HeadAgg::Rollout,
    };
    (t, h)
}

fn rauq_cfg(alpha: f64, tok: Tok, head: Head) -> RauqConfig {
    let (t, h) = variant(tok, head);
    RauqConfig { alpha, experimental: true, ..RauqConfig::default() }.with_variant(t, h)
}

fn rauq_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for i in 0..1000 {
        let tr = random_trace(&mut rng, 4, 4, 6, 6);
        let alpha = [0.1, 0.3, 0.5, 0.7, 0.9][i % 5];
        for tok in oracle::TOKS {
            for head in oracle::HEADS {
                match (oracle::rauq(&tr, alpha, tok, head), rauq::rauq_score(&tr, &rauq_cfg(alpha, tok, head), None)) {
                    (Some(w), Ok(g)) => {
                        worst = worst.max((w - g.score).abs());
                        compared += 1;
                    }
                    (None, Err(RauqError::SelectionUndefined)) => {}
                    (w, g) => return Err(format!("trace {i} {tok:?}/{head:?}: oracle {w:?}, engine {g:?}")),
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-9, || format!("max abs diff {worst:e}"))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!("1000 traces, {compared} scores, max abs diff {worst:.1e}, {elapsed:.2?}"))
}

#[allow(clippy::needless_range_loop)]
fn rollout() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for k in 0..300 {
        let tr = random_trace(&mut rng, 6, 4, 8, 8);
        let n = tr.meta.total_tokens;
        let want = oracle::rollout(&tr);
        let got = build_rollout(&tr);
        for (l, r) in want.iter().enumerate() {
            for i in 0..n {
                let row = got.row(l, i);
                for j in 0..n {
                    worst = worst.max((row[j] - r[i][j]).abs());
                    ensure(j <= i || row[j] == 0.0, || format!("trace {k} layer {l}: R[{i}][{j}] = {}", row[j]))?;
                }
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max abs diff {worst:e}"))?;
    ensure(worst_sum <= 1e-4, || format!("row sum off by {worst_sum:e}"))?;
    Ok(format!("300 traces, max abs diff {worst:.1e}, max row-sum error {worst_sum:.1e}, causal"))
}

fn alpha_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for _ in 0..100 {
        let tr = random_trace(&mut rng, 4, 4, 6, 8);
        let nll = oracle::mean_nll(&tr);
        for tok in oracle::TOKS {
            for head in oracle::HEADS {
                match rauq::rauq_score(&tr, &rauq_cfg(1.0, tok, head), None) {
                    Ok(r) => {
                        worst = worst.max((r.score - nll).abs());
                        compared += 1;
                    }
                    Err(RauqError::SelectionUndefined) => {}
                    Err(e) => return Err(e.to_string()),
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs diff {worst:e}"))?;
    Ok(format!("100 traces, {compared} scores, max abs diff {worst:.1e}"))
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let ties = rng.random_bool(0.5);
    let scores: Vec<f64> = (0..n)
        .map(|_| if ties { rng.random_range(0..5) as f64 * 0.25 } else { rng.random_range(-3.0..3.0) })
        .collect();
    let mut quality: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    quality[0] = 0.2;
    quality[1] = 0.8;
    let labels = binarize(&quality, 0.5);
    (scores, quality, labels)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = rng.random_range(2..=200);
        let (s, q, y) = random_instance(&mut rng, n);
        let got = auroc(&s, &y).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle::auroc_pairs(&s, &y)).abs());
        let inverse: Vec<f64> = q.iter().map(|v| 1.0 - v).collect();
        let p = prr(&inverse, &q).map_err(|e| e.to_string())?;
        ensure(p == 1.0, || format!("oracle-ordered PRR {p}"))?;
    }
    ensure(worst <= 1e-12, || format!("AUROC vs pair counting {worst:e}"))?;

    let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(|e| e.to_string())?;
    let r = aurac(&[0.9, 0.7, 0.2, 0.1], &[true, true, false, false]).map_err(|e| e.to_string())?;
    let p = prr(&[0.9, 0.7, 0.2, 0.1], &[0.0, 0.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
    ensure(a == 0.75, || format!("hand AUROC {a}"))?;
    ensure((r - 0.7917).abs() < 5e-5, || format!("hand AURAC {r}"))?;
    ensure(p == 1.0, || format!("hand PRR {p}"))?;
    Ok(format!("300 instances, AUROC diff {worst:.1e}; hand corpus AUROC {a}, AURAC {r:.4}, PRR {p}"))
}

fn monotone_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..=150);
        let (s, q, y) = random_instance(&mut rng, n);
        let scale = rng.random_range(0.01..50.0);
        let shift = rng.random_range(-10.0..10.0);
        let a = auroc(&s, &y).map_err(|e| e.to_string())?;
        let p = prr(&s, &q).map_err(|e| e.to_string())?;
        for t in [
            s.iter().map(|v| v.exp()).collect::<Vec<f64>>(),
            s.iter().map(|v| scale * v + shift).collect(),
        ] {
            worst = worst.max((auroc(&t, &y).map_err(|e| e.to_string())? - a).abs());
            worst = worst.max((prr(&t, &q).map_err(|e| e.to_string())? - p).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max change {worst:e}"))?;
    Ok(format!("100 instances, exp and affine, max change {worst:.1e}"))
}

fn synthetic_experiment() -> Outcome {
    let start = Instant::now();
    let opts = ScorerOptions {
        rauq: RauqConfig { experimental: true, ..RauqConfig::default() },
        ..ScorerOptions::default()
    };
    let registry = Registry::builtin();
    let ids: Vec<String> = registry.default_ids(true).into_iter().map(String::from).collect();
    let run = |regime: Regime| -> Result<BTreeMap<String, f64>, String> {
        let spec = SynthSpec { regime, delta: 0.3, n_traces: 400, ..SynthSpec::default() };
        let corpus = synth::generate(&spec).map_err(|e| e.to_string())?;
        let scorers = registry.create_all(&ids, &opts).map_err(|e| e.to_string())?;
        let (records, failures) = score_all(&scorers, &corpus.traces);
        ensure(failures.is_empty(), || format!("{} scoring failures", failures.len()))?;
        let label: BTreeMap<&str, bool> = corpus
            .traces
            .iter()
            .zip(corpus.labels())
            .map(|(t, y)| (t.id(), y))
            .collect();
        let mut per_method: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for r in &records {
            let e = per_method.entry(r.method_id.clone()).or_default();
            e.0.push(r.score);
            e.1.push(label[r.trace_id.as_str()]);
        }
        per_method
            .into_iter()
            .map(|(m, (s, y))| auroc(&s, &y).map(|a| (m, a)).map_err(|e| e.to_string()))
            .collect()
    };
    let intr = run(Regime::IntrinsicLike)?;
    let extr = run(Regime::ExtrinsicLike)?;
    let elapsed = start.elapsed();

    let mut notes = Vec::new();
    for id in ["rauq.sel.input", "rauq.meanheads.input"] {
        let a = intr[id];
        ensure(a >= synth::PINNED_ATTENTION_AUROC, || format!("intrinsic {id} AUROC {a:.4}"))?;
        notes.push(format!("{id} {a:.3}"));
    }
    for id in [baselines::PPL, baselines::PRED_ENT, baselines::NORM_ENT] {
        let a = intr[id];
        ensure(a <= synth::PINNED_PROBABILITY_AUROC, || format!("intrinsic {id} AUROC {a:.4}"))?;
        notes.push(format!("{id} {a:.3}"));
    }
    let se = extr[baselines::SEM_ENT_DISCRETE];
    ensure(se >= 0.95, || format!("extrinsic sem_ent.discrete AUROC {se:.4}"))?;
    within(elapsed, Duration::from_secs(120))?;
    println!(
        "INFO  synthetic: experimental rauq.rollout.input intrinsic AUROC {:.3} (not gated)",
        intr["rauq.rollout.input"]
    );
    Ok(format!("intrinsic: {}; extrinsic sem_ent.discrete {se:.3}; {elapsed:.2?}", notes.join(", ")))
}

fn entail_bundle(labels: &[usize]) -> SampleBundle {
    let s = labels.len();
    SampleBundle {
        trace_id: "u".into(),
        lengths: vec![4; s],
        sum_logprob: vec![-2.0; s],
        embeddings: None,
        entailment: Some((0..s * s).map(|ab| if labels[ab / s] == labels[ab % s] { 1.0 } else { 0.0 }).collect()),
        cluster_labels: None,
    }
}

fn se_eigen_units() -> Outcome {
    let mut worst = 0.0f64;
    for s in 1..=10usize {
        for (labels, want) in [(vec![0; s], 0.0), ((0..s).collect::<Vec<_>>(), (s as f64).ln())] {
            let b = entail_bundle(&labels);
            let a = cluster_entailment(&b, Linkage::FirstMember).map_err(|e| e.to_string())?;
            for mode in [SemanticMode::Discrete, SemanticMode::LikelihoodWeighted] {
                let got = semantic_entropy("u", &b, &a, mode).map_err(|e| e.to_string())?.score;
                worst = worst.max((got - want).abs());
            }
        }
    }
    for rho in [1e-3, 0.1, 1.0, 3.0] {
        let b = SampleBundle {
            embeddings: Some(Embeddings { dim: 3, values: [0.5f32, -1.0, 2.0].repeat(7) }),
            ..entail_bundle(&[0; 7])
        };
        let got = eigenscore("u", &b, EigenConfig { rho, center: true }).map_err(|e| e.to_string())?.score;
        worst = worst.max((got - rho.ln()).abs());
    }
    ensure(worst <= 1e-9, || format!("max abs diff {worst:e}"))?;
    Ok(format!("one cluster, S singletons (S = 1..10), identical embeddings; max abs diff {worst:.1e}"))
}

fn random_bundle(rng: &mut ChaCha8Rng, trace_id: &str) -> SampleBundle {
    let s = rng.random_range(1..=6);
    let labels: Vec<usize> = (0..s).map(|i| if i == 0 { 0 } else { rng.random_range(0..i) }).collect();
    let dim = rng.random_range(1..=5);
    SampleBundle {
        trace_id: trace_id.into(),
        lengths: (0..s).map(|_| rng.random_range(1..30)).collect(),
        sum_logprob: (0..s).map(|_| -rng.random_range(0.0f32..40.0)).collect(),
        embeddings: rng
            .random_bool(0.7)
            .then(|| Embeddings { dim, values: (0..s * dim).map(|_| rng.random_range(-3.0f32..3.0)).collect() }),
        entailment: rng
            .random_bool(0.7)
            .then(|| (0..s * s).map(|ab| if labels[ab / s] == labels[ab % s] { 1.0 } else { 0.0 }).collect()),
        cluster_labels: None,
    }
}

fn container_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut traces: Vec<GenerationTrace> = (0..200)
        .map(|_| {
            let mut t = random_trace(&mut rng, 4, 4, 8, 8);
            if rng.random_bool(0.5) {
                t.bundle = Some(random_bundle(&mut rng, &t.meta.trace_id.clone()));
            }
            if rng.random_bool(0.3) {
                t.tokens.iter_mut().for_each(|k| k.step_entropy = None);
            }
            t
        })
        .collect();
    for (i, t) in traces.iter_mut().enumerate() {
        t.meta.trace_id = format!("rt-{i:03}");
        if let Some(b) = t.bundle.as_mut() {
            b.trace_id = t.meta.trace_id.clone();
        }
    }
    for t in &traces {
        let path = dir.path().join(format!("{}.uqtr", t.meta.trace_id));
        container::write_trace(t, &path).map_err(|e| format!("{}: {e}", t.meta.trace_id))?;
        let back = container::read_trace(&path).map_err(|e| format!("{}: {e}", t.meta.trace_id))?;
        let same_bits = back.attention.as_slice().iter().map(|x| x.to_bits()).eq(t.attention.as_slice().iter().map(|x| x.to_bits()));
        ensure(same_bits && &back == t, || format!("{} changed on round trip", t.meta.trace_id))?;
    }

    let good = container::encode(&traces[0]).map_err(|e| e.to_string())?;
    let mut cases: Vec<(&str, Vec<u8>, bool)> = Vec::new();
    let mut b = good.clone();
    b[0] = b'Z';
    cases.push(("bad magic", b, true));
    let mut b = good.clone();
    b[4] = 7;
    cases.push(("unknown version", b, true));
    let mut b = good.clone();
    b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    cases.push(("oversized manifest length", b, true));
    let mut b = good.clone();
    b[16] = b'!';
    cases.push(("malformed manifest", b, true));
    let mut b = good.clone();
    b.extend_from_slice(&[0, 0]);
    cases.push(("trailing bytes", b, true));
    let mut acausal = traces[0].clone();
    acausal.attention.set(0, 0, 0, 1, 0.25);
    cases.push(("attention above the diagonal", container::encode_unchecked(&acausal), true));
    let mut unnormalized = traces[0].clone();
    let last = unnormalized.meta.total_tokens - 1;
    unnormalized.attention.set(0, 0, last, 0, 5.0);
    cases.push(("row sum off", container::encode_unchecked(&unnormalized), true));
    let mut prob = traces[0].clone();
    prob.tokens[0].prob = 1.5;
    cases.push(("probability above one", container::encode_unchecked(&prob), true));
    let mut rejected = 0usize;
    for (name, bytes, validate) in &cases {
        ensure(container::decode(bytes, *validate).is_err(), || format!("{name} accepted"))?;
        rejected += 1;
    }
    for t in traces.iter().take(5) {
        let bytes = container::encode(t).map_err(|e| e.to_string())?;
        for cut in 0..bytes.len() {
            ensure(container::decode(&bytes[..cut], true).is_err(), || format!("{}-byte prefix accepted", cut))?;
            rejected += 1;
        }
    }
    ensure(
        matches!(container::read_trace(dir.path().join("missing.uqtr")), Err(ContainerError::Io { .. })),
        || "missing file not reported as io".into(),
    )?;
    Ok(format!("200 traces bit-exact; {} corruption cases and {rejected} total inputs rejected", cases.len()))
}

fn attnuq(args: &[&str], workers: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attnuq"))
        .args(args)
        .env("UQ_WORKERS", workers)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("attnuq {}: {}", args.first().unwrap_or(&""), String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let intr = dir.path().join("intr");
    let extr = dir.path().join("extr");
    attnuq(&["synth", "--out", &s(&intr), "--regime", "intrinsic", "--n", "400"], "1")?;
    attnuq(&["synth", "--out", &s(&extr), "--regime", "extrinsic", "--n", "400"], "1")?;
    let mut trees = Vec::new();
    for (label, workers) in [("w1a", "1"), ("w1b", "1"), ("w4", "4")] {
        let run = dir.path().join(label);
        let scores = run.join("scores.jsonl");
        let corpora = ["--corpus", &s(&intr), "--corpus", &s(&extr)];
        let mut score = vec!["score", "--experimental", "--out"];
        let scores_s = s(&scores);
        score.push(&scores_s);
        score.extend(corpora);
        attnuq(&score, workers)?;
        let rep = s(&run.join("eval"));
        let mut eval = vec!["evaluate", "--scores", &scores_s, "--out", &rep];
        eval.extend(corpora);
        attnuq(&eval, workers)?;
        let report_json = s(&run.join("eval").join("report.json"));
        let fig = s(&run.join("fig"));
        let mut report = vec!["report", "--report", &report_json, "--scores", &scores_s, "--out", &fig];
        report.extend(corpora);
        attnuq(&report, workers)?;
        trees.push((label, tree(&run)));
    }
    let (_, first) = &trees[0];
    ensure(first.len() > 10, || format!("only {} files produced", first.len()))?;
    for (label, t) in &trees[1..] {
        ensure(t.keys().eq(first.keys()), || format!("{label}: different file set"))?;
        for (path, bytes) in t {
            ensure(first[path] == *bytes, || format!("{label}: {} differs", path.display()))?;
        }
    }
    Ok(format!("{} files byte-identical across two runs at 1 worker and one at 4", first.len()))
}

fn main() {
    let checks: [Check; 9] = [
        ("rauq-oracle-equivalence", rauq_oracle),
        ("rollout-correctness", rollout),
        ("alpha-one-reduction", alpha_one),
        ("metric-oracles", metric_oracles),
        ("monotone-invariance", monotone_invariance),
        ("synthetic-planted-signal", synthetic_experiment),
        ("se-eigenscore-unit-values", se_eigen_units),
        ("cli-determinism", determinism),
        ("container-round-trip", container_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
