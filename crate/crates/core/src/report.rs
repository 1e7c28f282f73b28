//! The analysis bundle: tables as CSV and markdown, plot data as CSV, and a
//! machine-readable `summary.json`.
//!
//! Every artifact carries the SHA-256 of the canonical prediction file it was
//! computed from, so a bundle can always be traced to its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::corpus::{lookup_task, Corpus, MeanSd, PatientRace, Segment, SignalTask, SignalType, SliceKey};
use crate::difficulty::{compare_groups, extract_features, split_quantiles, FeatureVector, Lexicon};
use crate::ensemble::{ensemble_evaluate, EnsembleOptions, EnsembleReport, Penalty};
use crate::error::{Error, Result};
use crate::inference::{sort_records, PredictionRecord};
use crate::metrics::{
    correctness_matrix, demographic_parity_ratio, group_by_dimensions, spread_over_configs,
    CorrectnessMatrix, Dimension, GroupContext, GroupMetric,
};
use crate::mixedglm::{fit_binomial_glmm, odds_ratio_table, Coding, GlmmData, GlmmFit, GlmmSpec, OrSort};
use crate::promptkit::{Configuration, ModelDialect, PromptStrategy};
use crate::stats::{bonferroni, chi_squared_independence, fisher_exact_2x2, ks_normality, significance_stars};

pub const REPORT_DIR: &str = "report";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    Overall,
    GlmmModel,
    GlmmPrompt,
    GlmmConfig,
    GlmmTask,
    Difficulty,
    Fairness,
    Segments,
    Ensemble,
}

impl Analysis {
    pub const ALL: [Analysis; 9] = [
        Analysis::Overall,
        Analysis::GlmmModel,
        Analysis::GlmmPrompt,
        Analysis::GlmmConfig,
        Analysis::GlmmTask,
        Analysis::Difficulty,
        Analysis::Fairness,
        Analysis::Segments,
        Analysis::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Overall => "overall",
            Analysis::GlmmModel => "glmm-model",
            Analysis::GlmmPrompt => "glmm-prompt",
            Analysis::GlmmConfig => "glmm-config",
            Analysis::GlmmTask => "glmm-task",
            Analysis::Difficulty => "difficulty",
            Analysis::Fairness => "fairness",
            Analysis::Segments => "segments",
            Analysis::Ensemble => "ensemble",
        }
    }
}

impl FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Analysis::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown analysis `{s}`")))
    }
}

// ---------------------------------------------------------------------------
// Provenance

/// Canonical bytes of a prediction set: sorted, one JSON object per line,
/// timestamps dropped. Identical to the `predictions.jsonl` written by a run.
pub fn canonical_predictions(records: &[PredictionRecord]) -> Result<Vec<u8>> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = Vec::new();
    for mut r in sorted {
        r.timestamp_ms = None;
        out.extend(serde_json::to_vec(&r)?);
        out.push(b'\n');
    }
    Ok(out)
}

pub fn source_stamp(records: &[PredictionRecord]) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_predictions(records)?)))
}

// ---------------------------------------------------------------------------
// Tables

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Emph {
    Plain,
    Bold,
    Underline,
}

#[derive(Debug, Clone)]
struct Cell {
    text: String,
    emph: Emph,
}

impl Cell {
    fn plain(text: impl Into<String>) -> Cell {
        Cell { text: text.into(), emph: Emph::Plain }
    }

    fn with(text: impl Into<String>, emph: Emph) -> Cell {
        Cell { text: text.into(), emph }
    }
}

#[derive(Debug, Clone)]
enum Row {
    Section(String),
    /// Visual separator in markdown only.
    Break,
    Data(Vec<Cell>),
}

#[derive(Debug, Clone)]
struct Table {
    title: String,
    header: Vec<String>,
    rows: Vec<Row>,
    notes: Vec<String>,
}

impl Table {
    fn new(title: impl Into<String>, header: &[&str]) -> Table {
        Table {
            title: title.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn push(&mut self, cells: Vec<Cell>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(Row::Data(cells));
    }

    fn has_sections(&self) -> bool {
        self.rows.iter().any(|r| matches!(r, Row::Section(_)))
    }

    fn to_csv(&self, stamp: &str) -> Result<String> {
        let sectioned = self.has_sections();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.header.clone();
        if sectioned {
            header.insert(0, "section".into());
        }
        w.write_record(&header)?;
        let mut section = String::new();
        for row in &self.rows {
            match row {
                Row::Section(s) => section = s.clone(),
                Row::Break => section.clear(),
                Row::Data(cells) => {
                    let mut rec: Vec<&str> = cells.iter().map(|c| c.text.as_str()).collect();
                    if sectioned {
                        rec.insert(0, &section);
                    }
                    w.write_record(&rec)?;
                }
            }
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
            .expect("csv output is utf-8");
        let mut out = format!("# source_sha256={stamp}\n{body}");
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        Ok(out)
    }

    fn to_markdown(&self, stamp: &str) -> String {
        let mut out = format!("## {}\n\n", self.title);
        let _ = writeln!(out, "| {} |", self.header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(self.header.len()));
        let width = self.header.len();
        for row in &self.rows {
            match row {
                Row::Section(s) => {
                    let _ = writeln!(out, "| *{s}* |{}", " |".repeat(width - 1));
                }
                Row::Break => {
                    let _ = writeln!(out, "|{}", " ┄ |".repeat(width));
                }
                Row::Data(cells) => {
                    let texts: Vec<String> = cells
                        .iter()
                        .map(|c| match c.emph {
                            Emph::Plain => c.text.clone(),
                            Emph::Bold => format!("**{}**", c.text),
                            Emph::Underline => format!("<u>{}</u>", c.text),
                        })
                        .collect();
                    let _ = writeln!(out, "| {} |", texts.join(" | "));
                }
            }
        }
        if !self.notes.is_empty() {
            out.push('\n');
            for n in &self.notes {
                let _ = writeln!(out, "*{n}*  ");
            }
        }
        let _ = write!(out, "\nsource_sha256: `{stamp}`\n");
        out
    }
}

fn data_csv(stamp: &str, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .expect("csv output is utf-8");
    Ok(format!("# source_sha256={stamp}\n{body}"))
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn mean_sd(m: Option<MeanSd>) -> String {
    match m {
        Some(m) => format!("{:.3} ({:.2})", m.mean, m.sd),
        None => "--".into(),
    }
}

fn display_name(signal_id: &str) -> String {
    lookup_task(signal_id)
        .map(|t| t.display_name.to_string())
        .unwrap_or_else(|| signal_id.to_string())
}

fn type_sections<'t>(tasks: &[&'t SignalTask]) -> Vec<(&'static str, Vec<&'t SignalTask>)> {
    let mut out = Vec::new();
    for (label, ty) in [("Type-I Signals", SignalType::TypeI), ("Type-II Signals", SignalType::TypeII)] {
        let members: Vec<&SignalTask> = tasks.iter().copied().filter(|t| t.signal_type == ty).collect();
        if !members.is_empty() {
            out.push((label, members));
        }
    }
    out
}

/// Bold for the best value, underline for the second best. Ties share the
/// emphasis.
fn rank_emphasis(values: &[Option<f64>]) -> Vec<Emph> {
    let mut distinct: Vec<f64> = values.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    values
        .iter()
        .map(|v| match v {
            Some(v) if distinct.first().is_some_and(|b| (v - b).abs() < 1e-12) => Emph::Bold,
            Some(v) if distinct.get(1).is_some_and(|b| (v - b).abs() < 1e-12) => Emph::Underline,
            _ => Emph::Plain,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Bundle

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub q: f64,
    pub lambda: f64,
    pub penalty: Penalty,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            q: crate::difficulty::DEFAULT_QUANTILE,
            lambda: crate::ensemble::DEFAULT_LAMBDA,
            penalty: Penalty::L1,
        }
    }
}

pub struct ReportInputs<'a> {
    pub corpus: &'a Corpus,
    pub records: &'a [PredictionRecord],
    pub configs: &'a [Configuration],
    pub tasks: &'a [&'static SignalTask],
    pub lexicon: Option<&'a Lexicon>,
    pub options: ReportOptions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub file_name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Written { files: Vec<String> },
    Skipped { notice: String },
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub stamp: String,
    pub artifacts: Vec<Artifact>,
    pub outcomes: Vec<(Analysis, Outcome)>,
}

impl ReportBundle {
    pub fn artifact(&self, file_name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.file_name == file_name)
    }

    pub fn notices(&self) -> Vec<String> {
        self.outcomes
            .iter()
            .filter_map(|(a, o)| match o {
                Outcome::Skipped { notice } => Some(format!("{}: {notice}", a.name())),
                Outcome::Written { .. } => None,
            })
            .collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for a in &self.artifacts {
            let p = dir.join(&a.file_name);
            fs::write(&p, &a.contents).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

struct Ctx<'a> {
    inputs: &'a ReportInputs<'a>,
    records: Vec<PredictionRecord>,
    matrix: CorrectnessMatrix,
    group: GroupContext,
    stamp: String,
    ensemble: Option<std::result::Result<EnsembleReport, String>>,
}

/// Keeps records for the selected configurations and tasks on slices that
/// survived the word filter.
fn select_records(inputs: &ReportInputs<'_>) -> Vec<PredictionRecord> {
    let configs: BTreeSet<String> = inputs.configs.iter().map(|c| c.config_id()).collect();
    let tasks: BTreeSet<&str> = inputs.tasks.iter().map(|t| t.signal_id).collect();
    let slices: BTreeSet<SliceKey> = inputs.corpus.slices.iter().map(|s| s.key()).collect();
    inputs
        .records
        .iter()
        .filter(|r| {
            configs.contains(&r.config_id)
                && tasks.contains(r.signal_id.as_str())
                && slices.contains(&SliceKey {
                    visit_id: r.visit_id.clone(),
                    slice_index: r.slice_index,
                })
        })
        .cloned()
        .collect()
}

/// Runs the requested analyses. An analysis that lacks its inputs is skipped
/// with a notice; integrity and I/O failures abort the bundle.
pub fn build_report(inputs: &ReportInputs<'_>, which: &[Analysis]) -> Result<ReportBundle> {
    let records = select_records(inputs);
    let matrix = correctness_matrix(&records, &inputs.corpus.labels)?;
    let stamp = source_stamp(&records)?;
    let mut ctx = Ctx {
        inputs,
        group: GroupContext::from_corpus(inputs.corpus),
        records,
        matrix,
        stamp,
        ensemble: None,
    };
    let wanted: BTreeSet<Analysis> = which.iter().copied().collect();
    let mut artifacts = Vec::new();
    let mut outcomes = Vec::new();
    for analysis in Analysis::ALL.into_iter().filter(|a| wanted.contains(a)) {
        let result = match analysis {
            Analysis::Overall => ctx.overall(),
            Analysis::GlmmModel => ctx.glmm_model(),
            Analysis::GlmmPrompt => ctx.glmm_prompt(),
            Analysis::GlmmConfig => ctx.glmm_config(),
            Analysis::GlmmTask => ctx.glmm_task(),
            Analysis::Difficulty => ctx.difficulty(),
            Analysis::Fairness => ctx.fairness(),
            Analysis::Segments => ctx.segments(),
            Analysis::Ensemble => ctx.ensemble_tables(),
        };
        match result {
            Ok(files) => {
                outcomes.push((
                    analysis,
                    Outcome::Written {
                        files: files.iter().map(|a| a.file_name.clone()).collect(),
                    },
                ));
                artifacts.extend(files);
            }
            Err(e @ (Error::Integrity(_) | Error::Io { .. })) => return Err(e),
            Err(e) => outcomes.push((analysis, Outcome::Skipped { notice: e.to_string() })),
        }
    }
    let summary = ctx.summary(&outcomes)?;
    artifacts.push(Artifact {
        file_name: SUMMARY_FILE.into(),
        contents: summary,
    });
    Ok(ReportBundle {
        stamp: ctx.stamp,
        artifacts,
        outcomes,
    })
}

impl Ctx<'_> {
    fn table_artifacts(&self, stem: &str, table: &Table) -> Result<Vec<Artifact>> {
        Ok(vec![
            Artifact {
                file_name: format!("{stem}.csv"),
                contents: table.to_csv(&self.stamp)?,
            },
            Artifact {
                file_name: format!("{stem}.md"),
                contents: table.to_markdown(&self.stamp),
            },
        ])
    }

    fn data_artifact(&self, file_name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Artifact> {
        Ok(Artifact {
            file_name: file_name.into(),
            contents: data_csv(&self.stamp, header, rows)?,
        })
    }

    fn config_ids(&self) -> Vec<String> {
        self.inputs.configs.iter().map(|c| c.config_id()).collect()
    }

    fn require_cells(&self) -> Result<()> {
        if self.matrix.cells.is_empty() {
            return Err(Error::DegenerateSample("no answered, labeled predictions".into()));
        }
        Ok(())
    }

    fn ensemble_report(&mut self) -> std::result::Result<&EnsembleReport, String> {
        if self.ensemble.is_none() {
            let opts = EnsembleOptions {
                lambda: self.inputs.options.lambda,
                penalty: self.inputs.options.penalty,
                ..EnsembleOptions::default()
            };
            let r = ensemble_evaluate(
                &self.records,
                &self.inputs.corpus.labels,
                &self.inputs.corpus.metadata,
                self.inputs.configs,
                self.inputs.tasks,
                &opts,
            )
            .map_err(|e| e.to_string());
            self.ensemble = Some(r);
        }
        self.ensemble.as_ref().expect("just set").as_ref().map_err(Clone::clone)
    }

    /// Labeled, kept slices with their binary label for one task.
    fn task_labels(&self, signal_id: &str) -> Vec<(&crate::corpus::Slice, u8)> {
        self.inputs
            .corpus
            .slices
            .iter()
            .filter_map(|s| {
                self.inputs
                    .corpus
                    .labels
                    .get(&s.visit_id, s.slice_index, signal_id)
                    .map(|l| (s, l.binary))
            })
            .collect()
    }

    fn race_of(&self, visit_id: &str) -> PatientRace {
        self.group.race.get(visit_id).copied().unwrap_or(PatientRace::Unknown)
    }

    // -- overall ------------------------------------------------------------

    fn overall(&mut self) -> Result<Vec<Artifact>> {
        self.require_cells()?;
        let configs = self.config_ids();
        let metrics = group_by_dimensions(&self.matrix.cells, &self.group, &[Dimension::Task, Dimension::Config])?;
        let ba: BTreeMap<(String, String), &GroupMetric> = metrics
            .iter()
            .map(|m| ((m.group_key[0].clone(), m.group_key[1].clone()), m))
            .collect();
        let ensemble: BTreeMap<String, Option<MeanSd>> = match self.ensemble_report() {
            Ok(r) => r.tasks.iter().map(|t| (t.signal_id.clone(), t.summary)).collect(),
            Err(_) => BTreeMap::new(),
        };
        let ensemble_note = match self.ensemble_report() {
            Ok(_) => None,
            Err(e) => Some(format!("Ensemble (LOGO) unavailable: {e}")),
        };

        let mut header = vec!["Social Signal"];
        header.extend(configs.iter().map(String::as_str));
        header.push("Ensemble (LOGO)");
        let mut table = Table::new("Overall balanced accuracy", &header);
        let mut per_config: Vec<Vec<f64>> = vec![Vec::new(); configs.len()];
        let mut ens_means = Vec::new();
        for (section, tasks) in type_sections(self.inputs.tasks) {
            table.rows.push(Row::Section(section.into()));
            for task in tasks {
                let values: Vec<Option<f64>> = configs
                    .iter()
                    .map(|c| ba.get(&(task.signal_id.to_string(), c.clone())).and_then(|m| m.balanced_accuracy))
                    .collect();
                let emph = rank_emphasis(&values);
                let mut cells = vec![Cell::plain(task.display_name)];
                for (j, (v, e)) in values.iter().zip(&emph).enumerate() {
                    match v {
                        Some(v) => {
                            per_config[j].push(*v);
                            cells.push(Cell::with(f3(*v), *e));
                        }
                        None => cells.push(Cell::plain("--")),
                    }
                }
                let ens = ensemble.get(task.signal_id).copied().flatten();
                if let Some(m) = ens {
                    ens_means.push(m.mean);
                }
                cells.push(Cell::plain(mean_sd(ens)));
                table.push(cells);
            }
        }
        let summaries: Vec<Option<MeanSd>> = per_config.iter().map(|v| MeanSd::of(v)).collect();
        let ens_summary = MeanSd::of(&ens_means);
        let mut mean_row = vec![Cell::plain("MEAN")];
        let mut std_row = vec![Cell::plain("STD")];
        for s in summaries.iter().chain(std::iter::once(&ens_summary)) {
            mean_row.push(Cell::plain(s.map_or("--".into(), |m| f3(m.mean))));
            std_row.push(Cell::plain(s.map_or("--".into(), |m| format!("{:.2}", m.sd))));
        }
        table.rows.push(Row::Break);
        table.push(mean_row);
        table.push(std_row);
        table.notes.push(format!(
            "Abstained predictions excluded from the denominators: {}",
            self.matrix.total_abstained()
        ));
        if let Some(n) = ensemble_note {
            table.notes.push(n);
        }
        let mut out = self.table_artifacts("table2_overall", &table)?;

        // Label prevalence per signal and visit segment.
        let mut rows = Vec::new();
        for task in self.inputs.tasks {
            let labels = self.task_labels(task.signal_id);
            let mut push = |seg: &str, vals: Vec<u8>| {
                let n = vals.len();
                let pos = vals.iter().filter(|&&b| b == 1).count();
                let prev = if n == 0 { String::new() } else { format!("{:.6}", pos as f64 / n as f64) };
                rows.push(vec![task.signal_id.to_string(), seg.to_string(), n.to_string(), pos.to_string(), prev]);
            };
            push("all", labels.iter().map(|(_, b)| *b).collect());
            for seg in Segment::ALL {
                push(seg.as_str(), labels.iter().filter(|(s, _)| s.segment == seg).map(|(_, b)| *b).collect());
            }
        }
        out.push(self.data_artifact(
            "fig1_prevalence.csv",
            &["signal_id", "segment", "n", "positives", "prevalence"],
            &rows,
        )?);
        Ok(out)
    }

    // -- mixed models -------------------------------------------------------

    fn glmm_data(&self) -> Result<GlmmData> {
        self.require_cells()?;
        let mut data = GlmmData::new(&["visit", "prompt", "task", "model", "configuration"]);
        for c in &self.matrix.cells {
            let config: Configuration = c.config_id.parse()?;
            data.push(
                c.correct,
                &[
                    c.visit_id.as_str(),
                    config.strategy.code(),
                    c.signal_id.as_str(),
                    config.dialect.code(),
                    c.config_id.as_str(),
                ],
            )?;
        }
        Ok(data)
    }

    fn random_var_note(fit: &GlmmFit, labels: &[(&str, &str)]) -> String {
        let parts: Vec<String> = labels
            .iter()
            .map(|(factor, label)| format!("{label} = {:.2}", fit.variance(factor).unwrap_or(0.0)))
            .collect();
        format!("Random Var ({})", parts.join(", "))
    }

    fn reference_table(
        &self,
        stem: &str,
        title: &str,
        fixed: &str,
        reference: &str,
        order: Vec<String>,
        random: &[(&str, &str)],
        label: impl Fn(&str) -> String,
    ) -> Result<Vec<Artifact>> {
        let data = self.glmm_data()?;
        let random_factors: Vec<&str> = random.iter().map(|(f, _)| *f).collect();
        let mut spec = GlmmSpec::new(fixed, Coding::Reference(reference.into()), &random_factors);
        spec.level_order = Some(order);
        let fit = fit_binomial_glmm(&data, &spec)?;
        let mut table = Table::new(title, &["", "Coef. (log)", "Odds Ratio"]);
        for row in odds_ratio_table(&fit, OrSort::None) {
            if row.is_reference {
                table.push(vec![
                    Cell::plain(format!("{} (reference)", label(&row.level))),
                    Cell::plain(f3(row.coef)),
                    Cell::plain(format!("[{}]", f3(row.odds_ratio))),
                ]);
            } else {
                table.push(vec![
                    Cell::plain(label(&row.level)),
                    Cell::plain(f3(row.coef)),
                    Cell::plain(f3(row.odds_ratio)),
                ]);
            }
        }
        table.notes.push(Self::random_var_note(&fit, random));
        if !fit.converged {
            table.notes.push("Variance search stopped at the cycle limit".into());
        }
        self.table_artifacts(stem, &table)
    }

    fn glmm_model(&mut self) -> Result<Vec<Artifact>> {
        let order = ModelDialect::ALL.iter().map(|d| d.code().to_string()).collect();
        self.reference_table(
            "table3_model",
            "Model",
            "model",
            ModelDialect::Flan.code(),
            order,
            &[("visit", "visit"), ("prompt", "prompt"), ("task", "task")],
            |l| {
                ModelDialect::ALL
                    .into_iter()
                    .find(|d| d.code() == l)
                    .map_or(l.to_string(), |d| d.long_name().to_string())
            },
        )
    }

    fn glmm_prompt(&mut self) -> Result<Vec<Artifact>> {
        let order = PromptStrategy::ALL.iter().map(|p| p.code().to_string()).collect();
        self.reference_table(
            "table3_prompt",
            "Prompting Style",
            "prompt",
            PromptStrategy::ZeroShot.code(),
            order,
            &[("visit", "visit"), ("task", "task"), ("model", "model")],
            |l| {
                PromptStrategy::ALL
                    .into_iter()
                    .find(|p| p.code() == l)
                    .map_or(l.to_string(), |p| p.long_name().to_string())
            },
        )
    }

    fn glmm_config(&mut self) -> Result<Vec<Artifact>> {
        let order = self.config_ids();
        self.reference_table(
            "table3_config",
            "Configuration",
            "configuration",
            "FLAN-ZS",
            order,
            &[("visit", "visit"), ("task", "task")],
            |l| l.to_string(),
        )
    }

    fn glmm_task(&mut self) -> Result<Vec<Artifact>> {
        let data = self.glmm_data()?;
        let mut spec = GlmmSpec::new("task", Coding::CellMeans, &["visit", "configuration"]);
        spec.level_order = Some(self.inputs.tasks.iter().map(|t| t.signal_id.to_string()).collect());
        let fit = fit_binomial_glmm(&data, &spec)?;
        let mut table = Table::new(
            "Relative task difficulty",
            &["Social Signal (task)", "Coef. (log)", "Odds Ratio (OR)", "abs(1-OR)", "marked"],
        );
        let rows = odds_ratio_table(&fit, OrSort::AscendingOr);
        let mut prev_marked: Option<bool> = None;
        for row in rows {
            if prev_marked.is_some_and(|m| m != row.marked) {
                table.rows.push(Row::Break);
            }
            prev_marked = Some(row.marked);
            table.push(vec![
                Cell::plain(display_name(&row.level)),
                Cell::plain(f3(row.coef)),
                Cell::plain(f3(row.odds_ratio)),
                Cell::plain(f3(row.abs_one_minus_or)),
                Cell::plain(if row.marked { "yes" } else { "no" }),
            ]);
        }
        table
            .notes
            .push(Self::random_var_note(&fit, &[("visit", "visit"), ("configuration", "configuration")]));
        self.table_artifacts("table5_task_difficulty", &table)
    }

    // -- difficulty ---------------------------------------------------------

    fn difficulty(&mut self) -> Result<Vec<Artifact>> {
        let counts: Vec<(SliceKey, f64)> = self
            .matrix
            .per_slice
            .iter()
            .map(|s| {
                (
                    SliceKey {
                        visit_id: s.visit_id.clone(),
                        slice_index: s.slice_index,
                    },
                    s.correct as f64,
                )
            })
            .collect();
        if counts.is_empty() {
            return Err(Error::DegenerateSample("no labeled slices with predictions".into()));
        }
        let mut out = Vec::new();

        // Histogram of per-slice correct counts and its per-slice source.
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &self.matrix.per_slice {
            *hist.entry(s.correct).or_default() += 1;
        }
        let hist_rows: Vec<Vec<String>> = hist.iter().map(|(k, n)| vec![k.to_string(), n.to_string()]).collect();
        out.push(self.data_artifact("fig2_correct_histogram.csv", &["correct", "slices"], &hist_rows)?);
        let slice_rows: Vec<Vec<String>> = self
            .matrix
            .per_slice
            .iter()
            .map(|s| {
                vec![
                    s.visit_id.clone(),
                    s.slice_index.to_string(),
                    s.correct.to_string(),
                    s.answered.to_string(),
                    s.abstained.to_string(),
                ]
            })
            .collect();
        out.push(self.data_artifact(
            "fig2_slices.csv",
            &["visit_id", "slice_index", "correct", "answered", "abstained"],
            &slice_rows,
        )?);

        let split = split_quantiles(&counts, self.inputs.options.q)?;
        let empty = Lexicon::default();
        let lexicon = self.inputs.lexicon.unwrap_or(&empty);
        let mut features: BTreeMap<SliceKey, FeatureVector> = BTreeMap::new();
        for key in split.hard.iter().chain(&split.easy) {
            let slice = self
                .inputs
                .corpus
                .slice(key)
                .ok_or_else(|| Error::Integrity(format!("slice {key} missing from corpus")))?;
            features.insert(key.clone(), extract_features(&slice.plain_text(), lexicon)?);
        }
        let rows = compare_groups(&features, &split.hard, &split.easy)?;
        let mut table = Table::new(
            "Textual features of hard and easy slices",
            &["Feature", "Description (example words)", "Hard", "Easy", "U-statistic"],
        );
        for r in &rows {
            let description = match r.feature.as_str() {
                "WPS" => "Words per sentence".to_string(),
                "AllPunc" => "Number of punctuation marks".to_string(),
                "Period" => "Number of periods".to_string(),
                cat => lexicon
                    .categories
                    .iter()
                    .find(|(c, _)| c == cat)
                    .map(|(_, pats)| {
                        let ex: Vec<String> = pats.iter().take(4).map(|p| p.to_string()).collect();
                        format!("Lexicon category ({})", ex.join(", "))
                    })
                    .unwrap_or_default(),
            };
            let u = format!("{:.1} {}", r.u, r.stars);
            table.push(vec![
                Cell::plain(r.feature.clone()),
                Cell::plain(description),
                Cell::plain(mean_sd(Some(r.hard))),
                Cell::plain(mean_sd(Some(r.easy))),
                Cell::plain(u.trim_end()),
            ]);
        }
        table.notes.push(format!(
            "q = {}: hard = {} slices with at most {} correct, easy = {} slices with at least {} correct",
            split.q,
            split.hard.len(),
            split.hard_threshold,
            split.easy.len(),
            split.easy_threshold
        ));
        table.notes.push("Mann-Whitney U with Bonferroni correction: * p<0.05, ** p<0.01, *** p<0.001".into());
        if self.inputs.lexicon.is_none() {
            table.notes.push("No lexicon configured; only sentence and punctuation features".into());
        }
        let values: Vec<f64> = counts.iter().map(|(_, c)| *c).collect();
        match ks_normality(&values) {
            Ok(ks) => table.notes.push(format!(
                "Correct-count normality: KS D = {:.3}, p = {:.4} ({})",
                ks.statistic,
                ks.p_value,
                ks.caveat.unwrap_or("")
            )),
            Err(e) => table.notes.push(format!("Correct-count normality not tested: {e}")),
        }
        out.extend(self.table_artifacts("table4_difficulty", &table)?);
        Ok(out)
    }

    // -- fairness -----------------------------------------------------------

    fn fairness(&mut self) -> Result<Vec<Artifact>> {
        self.require_cells()?;
        let races: BTreeSet<PatientRace> = self
            .inputs
            .corpus
            .slices
            .iter()
            .map(|s| self.race_of(&s.visit_id))
            .collect();
        if !(races.contains(&PatientRace::White) && races.contains(&PatientRace::NonWhite)) {
            return Err(Error::Config(
                "patient race metadata must cover both white and non-white visits".into(),
            ));
        }
        let spreads = spread_over_configs(&self.matrix.cells, &self.group, &[Dimension::Task, Dimension::Race])?;
        let spread_of = |task: &str, race: PatientRace| {
            spreads
                .iter()
                .find(|s| s.group_key[0] == task && s.group_key[1] == race.as_str())
        };
        let mut table = Table::new(
            "Labels and balanced accuracy by patient race",
            &[
                "Social Signal",
                "Labels White",
                "Labels Non-White",
                "Statistical Difference",
                "Balanced Accuracy White",
                "Balanced Accuracy Non-White",
            ],
        );
        let mut any_degenerate = false;
        for task in self.inputs.tasks {
            let labels = self.task_labels(task.signal_id);
            let by_race = |race: PatientRace| -> Vec<f64> {
                labels
                    .iter()
                    .filter(|(s, _)| self.race_of(&s.visit_id) == race)
                    .map(|(_, b)| f64::from(*b))
                    .collect()
            };
            let w = by_race(PatientRace::White);
            let nw = by_race(PatientRace::NonWhite);
            let count = |v: &[f64]| {
                let pos = v.iter().filter(|&&x| x == 1.0).count() as u64;
                (pos, v.len() as u64 - pos)
            };
            let (wp, wn) = count(&w);
            let (np, nn) = count(&nw);
            let (stat, stars) = match fisher_exact_2x2([[np, nn], [wp, wn]]) {
                Ok(r) if r.statistic.is_nan() => ("--".to_string(), ""),
                Ok(r) if r.statistic.is_infinite() => ("inf".to_string(), significance_stars(r.p_value)),
                Ok(r) => (f3(r.statistic), significance_stars(r.p_value)),
                Err(_) => ("--".to_string(), ""),
            };
            let name = if stars.is_empty() {
                task.display_name.to_string()
            } else {
                format!("{} {stars}", task.display_name)
            };
            let ba_cell = |race: PatientRace| -> Cell {
                match spread_of(task.signal_id, race) {
                    Some(s) => {
                        let emph = match s.summary {
                            Some(m) if m.mean > 0.55 => Emph::Bold,
                            Some(m) if m.mean < 0.5 => Emph::Underline,
                            _ => Emph::Plain,
                        };
                        let mut text = mean_sd(s.summary);
                        if s.degenerate {
                            text.push_str(" †");
                        }
                        Cell::with(text, emph)
                    }
                    None => Cell::plain("--"),
                }
            };
            any_degenerate |= [PatientRace::White, PatientRace::NonWhite]
                .into_iter()
                .any(|r| spread_of(task.signal_id, r).is_some_and(|s| s.degenerate));
            table.push(vec![
                Cell::plain(name),
                Cell::plain(mean_sd(MeanSd::of(&w))),
                Cell::plain(mean_sd(MeanSd::of(&nw))),
                Cell::plain(stat),
                ba_cell(PatientRace::White),
                ba_cell(PatientRace::NonWhite),
            ]);
        }
        table
            .notes
            .push("Statistical Difference: Fisher exact odds ratio (non-white vs white); stars from its p-value".into());
        table
            .notes
            .push("Balanced accuracy: mean (sd) across configurations; bold > 0.55, underlined < 0.5".into());
        if any_degenerate {
            table.notes.push("† includes a configuration whose group has one label class only".into());
        }
        let mut out = self.table_artifacts("table6_fairness", &table)?;

        let metrics = group_by_dimensions(
            &self.matrix.cells,
            &self.group,
            &[Dimension::Task, Dimension::Config, Dimension::Race],
        )?;
        let mut rows = Vec::new();
        for task in self.inputs.tasks {
            for config in self.config_ids() {
                let find = |race: PatientRace| {
                    metrics.iter().find(|m| {
                        m.group_key[0] == task.signal_id && m.group_key[1] == config && m.group_key[2] == race.as_str()
                    })
                };
                let (Some(w), Some(nw)) = (find(PatientRace::White), find(PatientRace::NonWhite)) else {
                    continue;
                };
                let dpr = demographic_parity_ratio(w, nw);
                let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
                rows.push(vec![
                    task.signal_id.to_string(),
                    config,
                    fmt(w.balanced_accuracy),
                    fmt(nw.balanced_accuracy),
                    fmt(dpr.dpr),
                    dpr.flagged.to_string(),
                    dpr.undefined_reason.unwrap_or_default(),
                ]);
            }
        }
        out.push(self.data_artifact(
            "fig3_dpr.csv",
            &["signal_id", "config_id", "ba_white", "ba_non_white", "dpr", "flagged", "undefined_reason"],
            &rows,
        )?);
        Ok(out)
    }

    // -- segments -----------------------------------------------------------

    fn segments(&mut self) -> Result<Vec<Artifact>> {
        self.require_cells()?;
        let mut labels_table = Table::new(
            "Labels by visit segment",
            &["Social Signal", "Start", "Middle", "End", "Statistic χ²(2)"],
        );
        let mut tests: Vec<Option<(f64, f64)>> = Vec::new();
        let mut label_cells: Vec<Vec<Cell>> = Vec::new();
        for task in self.inputs.tasks {
            let labels = self.task_labels(task.signal_id);
            let mut cells = vec![Cell::plain(task.display_name)];
            let mut contingency = Vec::new();
            for seg in Segment::ALL {
                let v: Vec<f64> = labels
                    .iter()
                    .filter(|(s, _)| s.segment == seg)
                    .map(|(_, b)| f64::from(*b))
                    .collect();
                cells.push(Cell::plain(mean_sd(MeanSd::of(&v))));
                let pos = v.iter().sum::<f64>();
                if !v.is_empty() {
                    contingency.push(vec![v.len() as f64 - pos, pos]);
                }
            }
            tests.push(
                chi_squared_independence(&contingency)
                    .ok()
                    .filter(|r| r.statistic.is_finite())
                    .map(|r| (r.statistic, r.p_value)),
            );
            label_cells.push(cells);
        }
        let raw: Vec<f64> = tests.iter().map(|t| t.map_or(1.0, |(_, p)| p)).collect();
        let corrected = bonferroni(&raw, None)?;
        let mut significant = BTreeSet::new();
        for ((task, mut cells), (test, p)) in self
            .inputs
            .tasks
            .iter()
            .zip(label_cells)
            .zip(tests.iter().zip(&corrected))
        {
            let stat = match test {
                Some((s, _)) => {
                    let stars = significance_stars(*p);
                    if !stars.is_empty() {
                        significant.insert(task.signal_id);
                    }
                    format!("{} {stars}", f3(*s)).trim_end().to_string()
                }
                None => "--".into(),
            };
            cells.push(Cell::plain(stat));
            labels_table.push(cells);
        }
        labels_table
            .notes
            .push("Chi-squared test with Bonferroni correction: * p<0.05, ** p<0.01, *** p<0.001; -- when a label class never occurs".into());
        let mut out = self.table_artifacts("table7_segment_labels", &labels_table)?;

        let spreads = spread_over_configs(&self.matrix.cells, &self.group, &[Dimension::Task, Dimension::Segment])?;
        let mut perf = Table::new(
            "Balanced accuracy by visit segment",
            &["Social Signal", "Start", "Middle", "End"],
        );
        let mut seg_means: BTreeMap<Segment, Vec<f64>> = BTreeMap::new();
        for task in self.inputs.tasks {
            let name_emph = if significant.contains(task.signal_id) { Emph::Bold } else { Emph::Plain };
            let mut cells = vec![Cell::with(task.display_name, name_emph)];
            for seg in Segment::ALL {
                let s = spreads
                    .iter()
                    .find(|s| s.group_key[0] == task.signal_id && s.group_key[1] == seg.as_str());
                let summary = s.and_then(|s| s.summary);
                if let Some(m) = summary {
                    seg_means.entry(seg).or_default().push(m.mean);
                }
                let emph = if summary.is_some_and(|m| m.mean < 0.5) { Emph::Underline } else { Emph::Plain };
                cells.push(Cell::with(mean_sd(summary), emph));
            }
            perf.push(cells);
        }
        perf.rows.push(Row::Break);
        let mut avg = vec![Cell::plain("Averaged Performance")];
        for seg in Segment::ALL {
            avg.push(Cell::plain(mean_sd(seg_means.get(&seg).and_then(|v| MeanSd::of(v)))));
        }
        perf.push(avg);
        perf.notes.push(
            "Mean (sd) across configurations; bold signals differ in label distribution by segment; underlined < 0.5"
                .into(),
        );
        out.extend(self.table_artifacts("table8_segment_accuracy", &perf)?);
        Ok(out)
    }

    // -- ensemble -----------------------------------------------------------

    fn ensemble_tables(&mut self) -> Result<Vec<Artifact>> {
        self.require_cells()?;
        let report = self.ensemble_report().map_err(Error::Config)?.clone();
        let mut table = Table::new(
            format!("Ensemble ({} logistic regression, lambda = {})", report.penalty.label(), report.lambda),
            &["Social Signal", "Ensemble (LOGO)", "Folds", "Nonzero configurations"],
        );
        let mut fold_rows = Vec::new();
        for t in &report.tasks {
            let evaluated = t.folds.iter().filter(|f| f.balanced_accuracy.is_some()).count();
            table.push(vec![
                Cell::plain(display_name(&t.signal_id)),
                Cell::plain(mean_sd(t.summary)),
                Cell::plain(format!("{evaluated}/{}", t.folds.len())),
                Cell::plain(t.nonzero_configs.join(" ")),
            ]);
            for f in &t.folds {
                fold_rows.push(vec![
                    t.signal_id.clone(),
                    f.held_out_group.clone(),
                    f.n_train.to_string(),
                    f.n_test.to_string(),
                    f.balanced_accuracy.map_or(String::new(), |b| format!("{b:.6}")),
                    f.degenerate.to_string(),
                ]);
            }
        }
        table
            .notes
            .push("Leave-one-provider-group-out; folds whose held-out group has one label class are not averaged".into());
        let mut out = self.table_artifacts("ensemble", &table)?;
        out.push(self.data_artifact(
            "ensemble_folds.csv",
            &["signal_id", "held_out_group", "n_train", "n_test", "balanced_accuracy", "degenerate"],
            &fold_rows,
        )?);
        Ok(out)
    }

    // -- summary ------------------------------------------------------------

    fn summary(&self, outcomes: &[(Analysis, Outcome)]) -> Result<String> {
        let answered = self.matrix.cells.len();
        let correct = self.matrix.cells.iter().filter(|c| c.correct).count();
        let analyses: BTreeMap<&str, &Outcome> = outcomes.iter().map(|(a, o)| (a.name(), o)).collect();
        let per_config: BTreeMap<String, Option<f64>> = match group_by_dimensions(
            &self.matrix.cells,
            &self.group,
            &[Dimension::Task, Dimension::Config],
        ) {
            Ok(metrics) => self
                .config_ids()
                .into_iter()
                .map(|c| {
                    let v: Vec<f64> = metrics
                        .iter()
                        .filter(|m| m.group_key[1] == c)
                        .filter_map(|m| m.balanced_accuracy)
                        .collect();
                    (c, MeanSd::of(&v).map(|m| m.mean))
                })
                .collect(),
            Err(_) => BTreeMap::new(),
        };
        let value = json!({
            "source_sha256": self.stamp,
            "records": self.records.len(),
            "labeled_slices": self.matrix.per_slice.len(),
            "answered": answered,
            "correct": correct,
            "abstained": self.matrix.total_abstained(),
            "configs": self.config_ids(),
            "tasks": self.inputs.tasks.iter().map(|t| t.signal_id).collect::<Vec<_>>(),
            "mean_balanced_accuracy_by_config": per_config,
            "analyses": analyses,
        });
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }
}
