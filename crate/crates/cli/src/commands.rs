// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use attnuq::container::{self, ReadOptions};
use attnuq::corpus::{Corpus, LabeledExample};
use attnuq::metrics::{self, EvalReport};
use attnuq::rauq::{self, tune_alpha, ScoreRecord};
use attnuq::registry::{score_all, Registry, ScoreFailure};
use attnuq::report;
use attnuq::synth;
use attnuq::trace::GenerationTrace;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, TuneFile};
use crate::error::CliError;
use crate::{EvalArgs, EvaluateArgs, MethodArgs, ReportArgs, ScoreArgs, SynthArgs, TuneArgs, ValidateArgs};

/// Method used in failure records for traces that did not load.
const LOAD_METHOD: &str = "*";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    fs::write(path, contents).map_err(CliError::io(path))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::data("parse", format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn stdout_line(v: &serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
}

fn open_corpora(paths: &[PathBuf]) -> Result<Vec<Corpus>, CliError> {
    let corpora: Vec<Corpus> = paths.iter().map(Corpus::open).collect::<Result<_, _>>()?;
    let mut seen = BTreeSet::new();
    for c in &corpora {
        for row in &c.rows {
            if !seen.insert(row.trace_id.as_str()) {
                return Err(CliError::with_details(
                    "corpus",
                    format!("trace id {} appears more than once across corpora", row.trace_id),
                    json!({ "trace_id": row.trace_id }),
                ));
            }
        }
    }
    Ok(corpora)
}

fn labeled(corpora: &[Corpus]) -> Vec<LabeledExample> {
    corpora.iter().flat_map(Corpus::labeled).collect()
}

/// Loaded traces in index order, plus one failure per unreadable trace.
fn load_traces(corpora: &[Corpus]) -> (Vec<GenerationTrace>, Vec<ScoreFailure>) {
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for c in corpora {
        for (row, res) in c.rows.iter().zip(c.load_all(ReadOptions::default())) {
            match res {
                Ok(t) => traces.push(t),
                Err(e) => failures.push(ScoreFailure {
                    trace_id: row.trace_id.clone(),
                    method_id: LOAD_METHOD.into(),
                    kind: "load".into(),
                    reason: e.to_string(),
                }),
            }
        }
    }
    (traces, failures)
}

fn apply_method_args(cfg: &mut RunConfig, a: &MethodArgs) -> Result<(), CliError> {
    if let Some(m) = &a.methods {
        cfg.methods = m.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if a.experimental {
        cfg.rauq.experimental = true;
    }
    if let Some(alpha) = a.alpha {
        cfg.rauq.alpha = alpha;
    }
    if let Some(s) = a.selection_scope {
        cfg.rauq.selection_scope = s.into();
    }
    if a.layer_range.is_some() {
        cfg.rauq.layer_range = a.layer_range;
    }
    if !(0.0..=1.0).contains(&cfg.rauq.alpha) {
        return Err(CliError::Usage(format!("alpha {} outside [0, 1]", cfg.rauq.alpha)));
    }
    Ok(())
}

fn method_ids(cfg: &RunConfig, registry: &Registry) -> Vec<String> {
    if cfg.methods.is_empty() {
        registry.default_ids(cfg.rauq.experimental).into_iter().map(String::from).collect()
    } else {
        let mut ids = cfg.methods.clone();
        ids.sort();
        ids.dedup();
        ids
    }
}

pub fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<(), CliError> {
    let spec = &mut cfg.synth;
    if let Some(r) = a.regime {
        spec.regime = r.into();
    }
    if let Some(n) = a.n {
        spec.n_traces = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(d) = a.delta {
        spec.delta = d;
    }
    if let Some(f) = a.hallu_fraction {
        spec.hallu_fraction = f;
    }
    if a.dataset_id.is_some() {
        spec.dataset_id = a.dataset_id;
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    let out = cfg.output_dir()?;
    let corpus = synth::generate(&cfg.synth)?;
    synth::write_corpus(out, &corpus)?;
    stdout_line(&json!({
        "corpus": out.display().to_string(),
        "dataset_id": cfg.synth.dataset_id(),
        "traces": corpus.traces.len(),
        "hallucinated": corpus.truth.iter().filter(|t| t.hallucinated).count(),
    }));
    Ok(())
}

pub fn validate(mut cfg: RunConfig, a: ValidateArgs) -> Result<(), CliError> {
    if !a.corpora.is_empty() {
        cfg.corpora = a.corpora;
    }
    if cfg.corpora.is_empty() && a.traces.is_empty() {
        return Err(CliError::Usage("nothing to validate".into()));
    }
    let mut problems: Vec<serde_json::Value> = Vec::new();
    let mut checked = 0usize;
    if !cfg.corpora.is_empty() {
        cfg.require_corpora()?;
        let corpora = open_corpora(&cfg.corpora)?;
        let (traces, failures) = load_traces(&corpora);
        checked += traces.len() + failures.len();
        problems.extend(
            failures
                .into_iter()
                .map(|f| json!({"trace_id": f.trace_id, "error": f.reason})),
        );
    }
    let file_results: Vec<(PathBuf, Result<GenerationTrace, container::ContainerError>)> =
        a.traces.par_iter().map(|p| (p.clone(), container::read_trace(p))).collect();
    for (path, res) in file_results {
        checked += 1;
        if let Err(e) = res {
            problems.push(json!({"path": path.display().to_string(), "error": e.to_string()}));
        }
    }
    for p in &problems {
        stdout_line(p);
    }
    stdout_line(&json!({"checked": checked, "invalid": problems.len()}));
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::with_details(
            "invalid_trace",
            format!("{} of {checked} traces failed validation", problems.len()),
            json!({ "invalid": problems.len() }),
        ))
    }
}

fn default_errors_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".errors.jsonl");
    out.with_file_name(name)
}

pub fn score(mut cfg: RunConfig, a: ScoreArgs) -> Result<(), CliError> {
    if !a.corpora.is_empty() {
        cfg.corpora = a.corpora;
    }
    if a.alpha_table.is_some() {
        cfg.alpha_table = a.alpha_table;
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    apply_method_args(&mut cfg, &a.method)?;
    let registry = Registry::builtin();
    let ids = method_ids(&cfg, &registry);
    let opts = cfg.scorer_options()?;
    let mut scorers = registry.create_all(&ids, &opts)?;
    cfg.require_corpora()?;
    let out = cfg.output_dir()?.to_path_buf();
    let errors_path = a.errors.unwrap_or_else(|| default_errors_path(&out));

    let corpora = open_corpora(&cfg.corpora)?;
    let (traces, mut failures) = load_traces(&corpora);
    let refs: Vec<&GenerationTrace> = traces.iter().collect();
    for s in scorers.iter_mut().filter(|s| s.needs_fit()) {
        let id = s.method_id().to_string();
        s.fit(&refs)
            .map_err(|e| CliError::data("fit", format!("fitting {id}: {e}")))?;
    }
    let (records, score_failures) = score_all(&scorers, &traces);
    failures.extend(score_failures);
    failures.sort_by(|x, y| (&x.trace_id, &x.method_id).cmp(&(&y.trace_id, &y.method_id)));

    write_file(&out, jsonl(&records))?;
    write_file(&errors_path, jsonl(&failures))?;
    if failures.is_empty() || a.keep_going {
        return Ok(());
    }
    Err(CliError::with_details(
        "partial_failure",
        format!("{} trace/method pairs could not be scored", failures.len()),
        json!({ "failures": failures.len(), "errors_file": errors_path.display().to_string() }),
    ))
}

pub fn tune(mut cfg: RunConfig, a: TuneArgs) -> Result<(), CliError> {
    if !a.corpora.is_empty() {
        cfg.corpora = a.corpora;
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    if let Some(t) = a.threshold {
        cfg.eval.binarize_threshold = t;
    }
    apply_method_args(&mut cfg, &a.method)?;
    let registry = Registry::builtin();
    let ids: Vec<String> = method_ids(&cfg, &registry)
        .into_iter()
        .filter(|id| !cfg.methods.is_empty() || id.starts_with("rauq."))
        .collect();
    let mut variants = Vec::new();
    for id in &ids {
        if !registry.contains(id) {
            return Err(CliError::UnknownMethod(id.clone()));
        }
        let (tok, head) = rauq::parse_method_id(id)
            .ok_or_else(|| CliError::Usage(format!("{id} has no alpha to tune")))?;
        // surfaces the experimental gate before any work
        registry.create(id, &cfg.scorer_options()?)?;
        variants.push(cfg.rauq.clone().with_variant(tok, head));
    }
    cfg.require_corpora()?;
    let out = cfg.output_dir()?.to_path_buf();
    let corpora = open_corpora(&cfg.corpora)?;
    let (traces, failures) = load_traces(&corpora);
    if let Some(f) = failures.first() {
        return Err(CliError::with_details(
            "load",
            format!("{} traces failed to load; first: {}", failures.len(), f.reason),
            json!({ "trace_ids": failures.iter().map(|f| &f.trace_id).collect::<Vec<_>>() }),
        ));
    }
    let examples = labeled(&corpora);
    let quality: std::collections::HashMap<&str, f64> =
        examples.iter().map(|e| (e.trace_id.as_str(), e.quality)).collect();
    let calibration: Vec<(&GenerationTrace, bool)> = traces
        .iter()
        .filter_map(|t| quality.get(t.id()).map(|&q| (t, q < cfg.eval.binarize_threshold)))
        .collect();
    let results = variants
        .iter()
        .map(|template| {
            tune_alpha(&calibration, template)
                .map_err(|e| CliError::data("tune", format!("{}: {e}", template.method_id())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let file = TuneFile { schema_version: 1, results };
    let mut text = serde_json::to_string_pretty(&file).expect("tune file serializes");
    text.push('\n');
    write_file(&out, text)
}

fn apply_eval_args(cfg: &mut RunConfig, a: &EvalArgs) {
    if let Some(t) = a.threshold {
        cfg.eval.binarize_threshold = t;
    }
    if let Some(r) = a.resamples {
        cfg.eval.bootstrap_resamples = r;
    }
    if let Some(s) = a.seed {
        cfg.eval.rng_seed = s;
    }
    if let Some(g) = &a.groupings {
        cfg.eval.groupings = g.iter().map(|&g| g.into()).collect();
    }
}

pub fn evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<(), CliError> {
    if !a.corpora.is_empty() {
        cfg.corpora = a.corpora;
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    apply_eval_args(&mut cfg, &a.eval);
    cfg.require_corpora()?;
    let out = cfg.output_dir()?.to_path_buf();
    let mut records: Vec<ScoreRecord> = read_jsonl(&a.scores)?;
    let corpora = open_corpora(&cfg.corpora)?;
    let examples = labeled(&corpora);
    if a.allow_partial {
        let known: BTreeSet<&str> = examples.iter().map(|e| e.trace_id.as_str()).collect();
        let before = records.len();
        records.retain(|r| known.contains(r.trace_id.as_str()));
        let dropped = before - records.len();
        if dropped > 0 {
            eprintln!("{}", json!({"warning": "unjoined_records_dropped", "count": dropped}));
        }
    }
    let report = metrics::evaluate_corpus(&records, &examples, &cfg.eval)?;
    write_file(&out.join("report.json"), report.to_json())?;
    write_file(&out.join("report.csv"), report.to_csv())
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::data("parse", format!("{}: {e}", path.display())))
}

pub fn report(mut cfg: RunConfig, a: ReportArgs) -> Result<(), CliError> {
    if !a.corpora.is_empty() {
        cfg.corpora = a.corpora;
    }
    if a.out.is_some() {
        cfg.output = a.out;
    }
    if let Some(b) = a.bins {
        cfg.bins = b;
    }
    if let Some(t) = a.threshold {
        cfg.eval.binarize_threshold = t;
    }
    if cfg.bins == 0 {
        return Err(CliError::Usage("bins must be positive".into()));
    }
    cfg.require_corpora()?;
    let out = cfg.output_dir()?.to_path_buf();
    let eval = read_report(&a.report)?;
    let records: Vec<ScoreRecord> = read_jsonl(&a.scores)?;
    let corpora = open_corpora(&cfg.corpora)?;
    let examples = labeled(&corpora);

    let (points, mut notes) = report::hallucination_map(&eval);
    if points.is_empty() {
        notes.push("hallucination map omitted (no method has both extrinsic and intrinsic AUROC)".into());
    } else {
        write_file(&out.join("map.csv"), report::map_csv(&points))?;
        write_file(&out.join("map.svg"), report::map_svg(&points))?;
    }

    let (figures, fig_notes) = report::histogram_figures(&records, &examples, cfg.eval.binarize_threshold, cfg.bins)?;
    notes.extend(fig_notes);
    let hist_dir = out.join("histograms");
    for fig in &figures {
        let stem = format!("{}__{}", report::slug(&fig.method_id), report::slug(&fig.dataset_id));
        write_file(&hist_dir.join(format!("{stem}.csv")), report::histogram_csv(fig))?;
        write_file(&hist_dir.join(format!("{stem}.svg")), report::histogram_svg(fig))?;
    }

    if !a.compare.is_empty() {
        let mut reports = vec![eval];
        for p in &a.compare {
            reports.push(read_report(p)?);
        }
        let spread = metrics::across_model_spread(&reports);
        let mut text = serde_json::to_string_pretty(&spread).expect("spread serializes");
        text.push('\n');
        write_file(&out.join("spread.json"), text)?;
    }

    let notes_path = out.join("notes.txt");
    if notes.is_empty() {
        if notes_path.exists() {
            fs::remove_file(&notes_path).map_err(CliError::io(&notes_path))?;
        }
    } else {
        let mut text = notes.join("\n");
        text.push('\n');
        write_file(&notes_path, text)?;
    }
    Ok(())
}

pub fn methods(experimental: bool) -> Result<(), CliError> {
    let registry = Registry::builtin();
    let mut out = std::io::stdout().lock();
    for id in registry.default_ids(experimental) {
        let _ = writeln!(out, "{id}");
    }
    Ok(())
}
