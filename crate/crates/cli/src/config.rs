// SPDX-License-Identifier: Apache-2.0

//! Run configuration: a JSON file merged with command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use attnuq::baselines::{EigenConfig, Linkage};
use attnuq::metrics::EvalConfig;
use attnuq::rauq::{AlphaTuning, RauqConfig};
use attnuq::registry::ScorerOptions;
use attnuq::synth::SynthSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const WORKERS_ENV: &str = "UQ_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpora: Vec<PathBuf>,
    /// Method ids; empty means every non-experimental method.
    pub methods: Vec<String>,
    pub rauq: RauqConfig,
    pub eval: EvalConfig,
    pub linkage: Linkage,
    pub eigen: EigenConfig,
    pub alpha_table: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub workers: Option<usize>,
    pub bins: usize,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpora: Vec::new(),
            methods: Vec::new(),
            rauq: RauqConfig::default(),
            eval: EvalConfig::default(),
            linkage: Linkage::default(),
            eigen: EigenConfig::default(),
            alpha_table: None,
            output: None,
            workers: None,
            bins: 20,
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// `UQ_WORKERS` wins over the flag and the config file.
    pub fn resolve_workers(&self, env: Option<String>) -> Result<Option<usize>, CliError> {
        match env {
            Some(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(CliError::Usage(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
            },
            None => match self.workers {
                Some(0) => Err(CliError::Usage("workers must be positive".into())),
                w => Ok(w),
            },
        }
    }

    pub fn scorer_options(&self) -> Result<ScorerOptions, CliError> {
        let alpha_table = match &self.alpha_table {
            Some(p) => read_alpha_table(p)?,
            None => BTreeMap::new(),
        };
        Ok(ScorerOptions {
            rauq: self.rauq.clone(),
            alpha_table,
            linkage: self.linkage,
            eigen: self.eigen,
        })
    }

    pub fn require_corpora(&self) -> Result<(), CliError> {
        if self.corpora.is_empty() {
            return Err(CliError::Usage("no corpus given (--corpus or \"corpora\" in the config)".into()));
        }
        for c in &self.corpora {
            if !c.is_dir() {
                return Err(CliError::data("corpus", format!("corpus directory {} does not exist", c.display())));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output given (--out or \"output\" in the config)".into()))
    }
}

/// Output of `tune`, input of `score --alpha-table`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneFile {
    pub schema_version: u32,
    pub results: Vec<AlphaTuning>,
}

pub fn read_alpha_table(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let file: TuneFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("alpha table {}: {e}", path.display())))?;
    Ok(file.results.into_iter().map(|r| (r.method_id, r.alpha)).collect())
}
