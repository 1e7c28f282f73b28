//! TOML run configuration and input validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_slices, ingest_transcripts, lookup_task, read_labels, read_metadata, registry, Corpus,
    CorpusPaths, LabelSet, SignalTask, DEFAULT_MIN_WORDS, DEFAULT_SLICE_LEN_S,
};
use crate::difficulty::{Lexicon, DEFAULT_QUANTILE};
use crate::ensemble::{Penalty, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::inference::{load_mock_rules, BackendConfig, BackendSet, HttpBackend, MockBackend};
use crate::promptkit::{
    valid_configurations, BankThresholds, Configuration, FewShotBank, ModelDialect, PromptCompiler,
    PromptStrategy, PromptTemplates,
};
use crate::report::Analysis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub transcripts: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub few_shot_bank: Option<PathBuf>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusOptions {
    pub slice_len_s: f64,
    pub min_words: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            slice_len_s: DEFAULT_SLICE_LEN_S,
            min_words: DEFAULT_MIN_WORDS,
        }
    }
}

/// Restricts which configurations and tasks are run and analyzed. Unset
/// filters select everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Filters {
    pub configs: Option<Vec<String>>,
    pub models: Option<Vec<String>>,
    pub strategies: Option<Vec<String>>,
    pub tasks: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptingOptions {
    pub k_per_class: usize,
    pub bank_thresholds: BankThresholds,
}

impl Default for PromptingOptions {
    fn default() -> Self {
        PromptingOptions {
            k_per_class: 1,
            bank_thresholds: BankThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    pub q: f64,
    pub lambda: f64,
    pub penalty: Penalty,
    /// Analyses run by `analyze` when none are named on the command line.
    pub which: Option<Vec<String>>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            q: DEFAULT_QUANTILE,
            lambda: DEFAULT_LAMBDA,
            penalty: Penalty::L1,
            which: None,
        }
    }
}

fn default_mock_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Mock {
        #[serde(default)]
        rules: Option<PathBuf>,
        #[serde(default)]
        default_text: String,
        #[serde(default = "default_mock_in_flight")]
        max_in_flight: usize,
    },
    Http(BackendConfig),
}

impl BackendSpec {
    pub fn max_in_flight(&self) -> usize {
        match self {
            BackendSpec::Mock { max_in_flight, .. } => *max_in_flight,
            BackendSpec::Http(c) => c.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub corpus: CorpusOptions,
    #[serde(default)]
    pub filters: Filters,
    #[serde(default)]
    pub prompting: PromptingOptions,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    /// Keyed by dialect: `flan`, `gemma`, `llama`.
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn matches_any(list: &Option<Vec<String>>, candidates: &[&str]) -> bool {
    match list {
        None => true,
        Some(items) => items
            .iter()
            .any(|i| candidates.iter().any(|c| c.eq_ignore_ascii_case(i.trim()))),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<RunConfig> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.paths.run_dir)
    }

    pub fn corpus_paths(&self) -> CorpusPaths {
        CorpusPaths {
            transcripts: self.resolve(&self.paths.transcripts),
            labels: self.resolve(&self.paths.labels),
            metadata: self.paths.metadata.as_deref().map(|p| self.resolve(p)),
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.corpus_paths(), self.corpus.slice_len_s, self.corpus.min_words)
    }

    pub fn load_lexicon(&self) -> Result<Option<Lexicon>> {
        self.paths
            .lexicon
            .as_deref()
            .map(|p| Lexicon::load(self.resolve(p)))
            .transpose()
    }

    pub fn selected_configs(&self) -> Result<Vec<Configuration>> {
        if let Some(ids) = &self.filters.configs {
            for id in ids {
                let c: Configuration = id.parse()?;
                if !c.is_valid() {
                    return Err(Error::Config(format!("configuration `{id}` is not evaluated")));
                }
            }
        }
        if let Some(strats) = &self.filters.strategies {
            for s in strats {
                if !PromptStrategy::ALL.iter().any(|p| p.code().eq_ignore_ascii_case(s)) {
                    return Err(Error::Config(format!("unknown strategy `{s}`")));
                }
            }
        }
        if let Some(models) = &self.filters.models {
            for m in models {
                m.parse::<ModelDialect>()?;
            }
        }
        let out: Vec<Configuration> = valid_configurations()
            .into_iter()
            .filter(|c| {
                matches_any(&self.filters.configs, &[&c.config_id()])
                    && matches_any(&self.filters.strategies, &[c.strategy.code()])
                    && matches_any(&self.filters.models, &[c.dialect.code(), c.dialect.key()])
            })
            .collect();
        if out.is_empty() {
            return Err(Error::Config("filters select no configuration".into()));
        }
        Ok(out)
    }

    pub fn selected_tasks(&self) -> Result<Vec<&'static SignalTask>> {
        match &self.filters.tasks {
            None => Ok(registry().iter().collect()),
            Some(ids) => {
                let mut wanted = BTreeSet::new();
                for id in ids {
                    let t = lookup_task(id).ok_or_else(|| Error::Config(format!("unknown task `{id}`")))?;
                    wanted.insert(t.signal_id);
                }
                Ok(registry().iter().filter(|t| wanted.contains(t.signal_id)).collect())
            }
        }
    }

    pub fn selected_analyses(&self) -> Result<Vec<Analysis>> {
        match &self.analysis.which {
            None => Ok(Analysis::ALL.to_vec()),
            Some(names) => names.iter().map(|n| n.parse()).collect(),
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (set `seed` or pass --seed)".into()))
    }

    /// Compiler with templates and few-shot bank; the bank comes from the
    /// configured file or, failing that, from the corpus itself.
    pub fn build_compiler(&self, corpus: &Corpus, configs: &[Configuration]) -> Result<PromptCompiler> {
        let needs_examples = configs.iter().any(|c| c.strategy.uses_examples());
        let seed = if needs_examples { self.require_seed()? } else { self.seed.unwrap_or(0) };
        let bank = if needs_examples {
            Some(match &self.paths.few_shot_bank {
                Some(p) => FewShotBank::load(self.resolve(p))?,
                None => FewShotBank::from_corpus(corpus, &self.prompting.bank_thresholds),
            })
        } else {
            None
        };
        let mut compiler = PromptCompiler::new(bank, seed);
        compiler.k_per_class = self.prompting.k_per_class;
        if let Some(t) = &self.paths.templates {
            compiler.templates = PromptTemplates::load(self.resolve(t))?;
        }
        Ok(compiler)
    }

    pub fn backend_spec(&self, dialect: ModelDialect) -> Option<&BackendSpec> {
        self.backends.get(dialect.key())
    }

    pub fn build_backends(&self, configs: &[Configuration]) -> Result<BackendSet> {
        for key in self.backends.keys() {
            key.parse::<ModelDialect>()?;
        }
        let mut set = BackendSet::new();
        let dialects: BTreeSet<ModelDialect> = configs.iter().map(|c| c.dialect).collect();
        for d in dialects {
            let spec = self.backend_spec(d).ok_or_else(|| {
                Error::Config(format!("no backend configured for `{}`", d.key()))
            })?;
            let backend: Arc<dyn crate::inference::Backend> = match spec {
                BackendSpec::Mock { rules, default_text, .. } => {
                    let rules = match rules {
                        Some(p) => load_mock_rules(self.resolve(p))?,
                        None => Vec::new(),
                    };
                    Arc::new(MockBackend::new(rules, default_text.clone()))
                }
                BackendSpec::Http(c) => Arc::new(HttpBackend::new(c.clone())?),
            };
            set = set.with(d, backend);
        }
        Ok(set)
    }

    /// Smallest concurrency limit among the backends the configurations use.
    pub fn max_in_flight(&self, configs: &[Configuration]) -> usize {
        configs
            .iter()
            .filter_map(|c| self.backend_spec(c.dialect))
            .map(BackendSpec::max_in_flight)
            .min()
            .unwrap_or(1)
            .max(1)
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }

    fn push_error(&mut self, location: &str, e: Error) {
        self.push(location, e.to_string());
    }
}

impl RunConfig {
    /// Checks that every input parses and that labels, slices and metadata
    /// agree. All problems are collected rather than stopping at the first.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let configs = match self.selected_configs() {
            Ok(c) => c,
            Err(e) => {
                report.push_error("filters", e);
                Vec::new()
            }
        };
        if let Err(e) = self.selected_tasks() {
            report.push_error("filters", e);
        }
        let analyses = match self.selected_analyses() {
            Ok(a) => a,
            Err(e) => {
                report.push_error("analysis.which", e);
                Vec::new()
            }
        };
        if !(self.analysis.q > 0.0 && self.analysis.q < 0.5) {
            report.push("analysis.q", format!("must be in (0, 0.5), got {}", self.analysis.q));
        }
        if !(self.analysis.lambda >= 0.0) {
            report.push("analysis.lambda", "must be >= 0");
        }
        if !(self.corpus.slice_len_s > 0.0) {
            report.push("corpus.slice_len_s", "must be positive");
        }
        if configs.iter().any(|c| c.strategy.uses_examples()) && self.seed.is_none() {
            report.push("seed", "few-shot configurations need a seed");
        }
        for key in self.backends.keys() {
            if let Err(e) = key.parse::<ModelDialect>() {
                report.push_error(&format!("backends.{key}"), e);
            }
        }
        let dialects: BTreeSet<ModelDialect> = configs.iter().map(|c| c.dialect).collect();
        for d in dialects {
            match self.backend_spec(d) {
                None => report.push(format!("backends.{}", d.key()), "missing backend for a selected configuration"),
                Some(BackendSpec::Http(c)) => {
                    if let Err(e) = c.validate() {
                        report.push_error(&format!("backends.{}", d.key()), e);
                    }
                }
                Some(BackendSpec::Mock { rules: Some(p), .. }) => {
                    if let Err(e) = load_mock_rules(self.resolve(p)) {
                        report.push_error(&format!("backends.{}.rules", d.key()), e);
                    }
                }
                Some(BackendSpec::Mock { .. }) => {}
            }
        }

        let paths = self.corpus_paths();
        let visits = match ingest_transcripts(&paths.transcripts) {
            Ok(v) => Some(v),
            Err(e) => {
                report.push_error("paths.transcripts", e);
                None
            }
        };
        let labels = match read_labels(&paths.labels).and_then(|raw| LabelSet::from_raw(&raw)) {
            Ok(l) => Some(l),
            Err(e) => {
                report.push_error("paths.labels", e);
                None
            }
        };
        let metadata = match &paths.metadata {
            Some(p) => match read_metadata(p) {
                Ok(m) => Some(m),
                Err(e) => {
                    report.push_error("paths.metadata", e);
                    None
                }
            },
            None => None,
        };
        if let Some(p) = &self.paths.lexicon {
            if let Err(e) = Lexicon::load(self.resolve(p)) {
                report.push_error("paths.lexicon", e);
            }
        }
        if let Some(p) = &self.paths.few_shot_bank {
            if let Err(e) = FewShotBank::load(self.resolve(p)) {
                report.push_error("paths.few_shot_bank", e);
            }
        }
        if let Some(p) = &self.paths.templates {
            if let Err(e) = PromptTemplates::load(self.resolve(p)) {
                report.push_error("paths.templates", e);
            }
        }

        if let (Some(visits), Some(labels)) = (&visits, &labels) {
            let all = build_slices(visits, self.corpus.slice_len_s, 0);
            let kept = build_slices(visits, self.corpus.slice_len_s, self.corpus.min_words);
            if let (Ok(all), Ok(kept)) = (all, kept) {
                let visit_ids: BTreeSet<&str> = visits.iter().map(|v| v.visit_id.as_str()).collect();
                let all_idx = all.index();
                let kept_idx = kept.index();
                let mut dropped_labeled = BTreeSet::new();
                for key in labels.labels.keys() {
                    let sk = crate::corpus::SliceKey {
                        visit_id: key.visit_id.clone(),
                        slice_index: key.slice_index,
                    };
                    if !visit_ids.contains(key.visit_id.as_str()) {
                        report.push(
                            format!("labels {}/{}/{}", key.visit_id, key.slice_index, key.signal_id),
                            format!("unknown visit `{}`", key.visit_id),
                        );
                    } else if !all_idx.contains_key(&sk) {
                        report.push(
                            format!("labels {}/{}/{}", key.visit_id, key.slice_index, key.signal_id),
                            format!("visit `{}` has no slice {}", key.visit_id, key.slice_index),
                        );
                    } else if !kept_idx.contains_key(&sk) {
                        dropped_labeled.insert(sk);
                    }
                }
                if !dropped_labeled.is_empty() {
                    report.notes.push(format!(
                        "{} labeled slices fall below min_words = {} and are excluded",
                        dropped_labeled.len(),
                        self.corpus.min_words
                    ));
                }
                let labeled_visits: BTreeSet<&str> = labels.labels.keys().map(|k| k.visit_id.as_str()).collect();
                let needs_groups = analyses.contains(&Analysis::Ensemble);
                match &metadata {
                    Some(meta) => {
                        for v in &labeled_visits {
                            match meta.get(*v) {
                                None => report.push(format!("metadata {v}"), "labeled visit has no metadata row"),
                                Some(m) if needs_groups && m.provider_group.trim().is_empty() => report.push(
                                    format!("metadata {v}"),
                                    "provider_group is empty but the ensemble analysis is enabled",
                                ),
                                Some(_) => {}
                            }
                        }
                    }
                    None if needs_groups => {
                        report.push("paths.metadata", "the ensemble analysis needs provider groups from metadata")
                    }
                    None => {}
                }
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[paths]
transcripts = "t.jsonl"
labels = "l.csv"

[backends.flan]
kind = "mock"
default_text = "no"

[backends.llama]
kind = "http"
endpoint_url = "http://localhost:1/v1/chat/completions"
model_name = "m"
api_key_env = "KEY"
max_in_flight = 2
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::from_toml(MINIMAL, "/data").unwrap();
        assert_eq!(cfg.corpus.min_words, 20);
        assert_eq!(cfg.run_dir(), PathBuf::from("/data/run"));
        assert_eq!(cfg.analysis.lambda, 0.1);
        assert!(matches!(cfg.backends["llama"], BackendSpec::Http(_)));
        assert_eq!(cfg.selected_configs().unwrap().len(), 9);
        assert_eq!(cfg.selected_tasks().unwrap().len(), 20);
        assert_eq!(cfg.max_in_flight(&cfg.selected_configs().unwrap()[..2]), 4);
        assert_eq!(cfg.max_in_flight(&cfg.selected_configs().unwrap()), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("seed = 3", "seed = 3\nsede = 4");
        assert!(RunConfig::from_toml(&bad, ".").is_err());
        let bad = MINIMAL.replace("max_in_flight = 2", "max_in_flight = 2\nbogus = 1");
        assert!(RunConfig::from_toml(&bad, ".").is_err());
    }

    #[test]
    fn filters_narrow_configurations() {
        let mut cfg = RunConfig::from_toml(MINIMAL, ".").unwrap();
        cfg.filters.configs = Some(vec!["LLaMA-FS".into()]);
        let c = cfg.selected_configs().unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].config_id(), "LLaMA-FS");
        cfg.filters.configs = Some(vec!["FLAN-COT".into()]);
        assert!(cfg.selected_configs().is_err());
        cfg.filters.configs = None;
        cfg.filters.models = Some(vec!["gemma".into()]);
        assert_eq!(cfg.selected_configs().unwrap().len(), 3);
        cfg.filters.strategies = Some(vec!["COT".into()]);
        assert_eq!(cfg.selected_configs().unwrap().len(), 1);
        cfg.filters.tasks = Some(vec!["provider_warmth".into(), "nope".into()]);
        assert!(cfg.selected_tasks().is_err());
    }

    #[test]
    fn validation_collects_problems() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("t.jsonl"),
            r#"{"visit_id":"v1","speaker":"provider","start_s":0,"end_s":5,"text":"one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen seventeen eighteen nineteen twenty"}"#,
        )
        .unwrap();
        fs::write(
            dir.path().join("l.csv"),
            "visit_id,slice_index,signal_id,raw_score\nv1,0,provider_warmth,5\nv9,0,provider_warmth,2\nv1,4,provider_warmth,2\n",
        )
        .unwrap();
        let cfg = RunConfig::from_toml(MINIMAL, dir.path()).unwrap();
        let report = cfg.validate();
        let text: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        assert!(text.iter().any(|t| t.contains("unknown visit `v9`")), "{text:?}");
        assert!(text.iter().any(|t| t.contains("has no slice 4")));
        assert!(text.iter().any(|t| t.contains("backends.gemma")));
        assert!(text.iter().any(|t| t.contains("ensemble")));
        assert!(!report.is_clean());
    }
}
