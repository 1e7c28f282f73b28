//! Transcript ingestion, thin slicing, label binarization and visit metadata.
//!
//! A visit is a diarized conversation. It is cut into fixed-length thin
//! slices by turn start time (half-open windows, turns never split), slices
//! with too few words are dropped, and each surviving slice is tagged with its
//! position in the visit (start, middle or end).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SLICE_LEN_S: f64 = 180.0;
pub const DEFAULT_MIN_WORDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Provider,
    Patient,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub visit_id: String,
    pub speaker: Speaker,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

impl Turn {
    fn validate(&self) -> std::result::Result<(), String> {
        if !self.start_s.is_finite() || !self.end_s.is_finite() {
            return Err("timestamps must be finite".into());
        }
        if self.start_s < 0.0 {
            return Err(format!("negative start_s {}", self.start_s));
        }
        if self.end_s < self.start_s {
            return Err(format!(
                "end_s {} precedes start_s {}",
                self.end_s, self.start_s
            ));
        }
        if self.text.trim().is_empty() {
            return Err("empty turn text".into());
        }
        if self.visit_id.is_empty() {
            return Err("empty visit_id".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub visit_id: String,
    pub turns: Vec<Turn>,
}

impl Visit {
    pub fn word_count(&self) -> usize {
        self.turns.iter().map(|t| word_count(&t.text)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Start,
    Middle,
    End,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Start, Segment::Middle, Segment::End];

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Start => "start",
            Segment::Middle => "middle",
            Segment::End => "end",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub visit_id: String,
    pub slice_index: usize,
    pub turns: Vec<Turn>,
    pub word_count: usize,
    pub segment: Segment,
}

impl Slice {
    pub fn key(&self) -> SliceKey {
        SliceKey {
            visit_id: self.visit_id.clone(),
            slice_index: self.slice_index,
        }
    }

    /// Concatenated turn texts, one utterance per line, without speaker tags.
    pub fn plain_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.text.trim())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub visit_id: String,
    pub slice_index: usize,
}

impl fmt::Display for SliceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.visit_id, self.slice_index)
    }
}

/// Whitespace-token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn parse_turn_lines<R: BufRead>(reader: R, path: &Path) -> Result<Vec<Visit>> {
    let mut by_visit: BTreeMap<String, Vec<Turn>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let turn: Turn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        turn.validate()
            .map_err(|m| Error::validation(format!("{}:{}", path.display(), line_no), m))?;
        by_visit.entry(turn.visit_id.clone()).or_default().push(turn);
    }
    Ok(by_visit
        .into_iter()
        .map(|(visit_id, mut turns)| {
            turns.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            Visit { visit_id, turns }
        })
        .collect())
}

/// Reads a JSON Lines transcript file into visits, ordered by visit id with
/// turns sorted by start time.
pub fn ingest_transcripts(path: impl AsRef<Path>) -> Result<Vec<Visit>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_turn_lines(BufReader::new(file), path)
}

/// Same as [`ingest_transcripts`] over an in-memory reader.
pub fn read_transcripts<R: Read>(reader: R) -> Result<Vec<Visit>> {
    parse_turn_lines(BufReader::new(reader), Path::new("<memory>"))
}

pub fn segment_position(slice_index: usize, n_slices: usize) -> Segment {
    debug_assert!(slice_index < n_slices);
    if slice_index == 0 {
        Segment::Start
    } else if slice_index + 1 == n_slices {
        Segment::End
    } else {
        Segment::Middle
    }
}

/// Cuts a visit into thin slices of `slice_len_s` seconds.
///
/// A turn belongs to window `floor(start_s / slice_len_s)`. Empty windows are
/// dropped and the remaining slices re-indexed densely in time order, so a
/// silent stretch never produces an empty slice.
pub fn slice_visit(visit: &Visit, slice_len_s: f64) -> Result<Vec<Slice>> {
    if !(slice_len_s > 0.0 && slice_len_s.is_finite()) {
        return Err(Error::Config(format!(
            "slice length must be positive, got {slice_len_s}"
        )));
    }
    let mut windows: BTreeMap<u64, Vec<Turn>> = BTreeMap::new();
    for turn in &visit.turns {
        let w = (turn.start_s / slice_len_s).floor() as u64;
        windows.entry(w).or_default().push(turn.clone());
    }
    let n = windows.len();
    Ok(windows
        .into_values()
        .enumerate()
        .map(|(slice_index, mut turns)| {
            turns.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            let word_count = turns.iter().map(|t| word_count(&t.text)).sum();
            Slice {
                visit_id: visit.visit_id.clone(),
                slice_index,
                turns,
                word_count,
                segment: segment_position(slice_index, n),
            }
        })
        .collect())
}

/// Keeps slices with at least `min_words` words; returns the survivors and the
/// number dropped.
///
/// Slice indices and segment positions are those assigned by [`slice_visit`];
/// filtering does not renumber, so label files keep referring to the same
/// slicing.
pub fn filter_slices(slices: Vec<Slice>, min_words: usize) -> (Vec<Slice>, usize) {
    let before = slices.len();
    let kept: Vec<Slice> = slices
        .into_iter()
        .filter(|s| s.word_count >= min_words)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Slices every visit and applies the word-count filter.
pub fn build_slices(visits: &[Visit], slice_len_s: f64, min_words: usize) -> Result<SliceSet> {
    let mut all = Vec::new();
    let mut dropped = 0;
    for v in visits {
        let (kept, d) = filter_slices(slice_visit(v, slice_len_s)?, min_words);
        dropped += d;
        all.extend(kept);
    }
    Ok(SliceSet {
        slices: all,
        dropped,
    })
}

#[derive(Debug, Clone)]
pub struct SliceSet {
    pub slices: Vec<Slice>,
    pub dropped: usize,
}

impl SliceSet {
    pub fn index(&self) -> BTreeMap<SliceKey, &Slice> {
        self.slices.iter().map(|s| (s.key(), s)).collect()
    }
}

// ---------------------------------------------------------------------------
// Signal registry

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subject {
    Provider,
    Patient,
}

/// Type-I signals are bidirectional around the 3.5 midpoint; Type-II signals
/// grade presence, with 1 meaning absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SignalType {
    TypeI,
    TypeII,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignalTask {
    pub signal_id: &'static str,
    pub subject: Subject,
    pub display_name: &'static str,
    pub signal_type: SignalType,
}

impl SignalTask {
    /// Lowercase name used inside prompts, e.g. "provider warmth".
    pub fn prompt_name(&self) -> String {
        self.display_name.to_lowercase()
    }
}

const fn task(
    signal_id: &'static str,
    subject: Subject,
    display_name: &'static str,
    signal_type: SignalType,
) -> SignalTask {
    SignalTask {
        signal_id,
        subject,
        display_name,
        signal_type,
    }
}

use SignalType::{TypeI, TypeII};
use Subject::{Patient, Provider};

static REGISTRY: [SignalTask; 20] = [
    task("provider_dominance", Provider, "Provider Dominance", TypeI),
    task("provider_attentiveness", Provider, "Provider Attentiveness", TypeI),
    task("provider_warmth", Provider, "Provider Warmth", TypeI),
    task("provider_engagement", Provider, "Provider Engagement", TypeI),
    task("provider_empathy", Provider, "Provider Empathy", TypeI),
    task("provider_respect", Provider, "Provider Respect", TypeI),
    task("provider_interactivity", Provider, "Provider Interactivity", TypeI),
    task("patient_dominance", Patient, "Patient Dominance", TypeI),
    task("patient_attentiveness", Patient, "Patient Attentiveness", TypeI),
    task("patient_warmth", Patient, "Patient Warmth", TypeI),
    task("patient_engagement", Patient, "Patient Engagement", TypeI),
    task("patient_empathy", Patient, "Patient Empathy", TypeI),
    task("patient_respect", Patient, "Patient Respect", TypeI),
    task("patient_interactivity", Patient, "Patient Interactivity", TypeI),
    task("provider_hurriedness", Provider, "Provider Hurriedness", TypeI),
    task("provider_irritation", Provider, "Provider Irritation", TypeII),
    task("patient_irritation", Patient, "Patient Irritation", TypeII),
    task("patient_nervousness", Patient, "Patient Nervousness", TypeII),
    task("patient_sadness", Patient, "Patient Sadness", TypeII),
    task("patient_distress", Patient, "Patient Distress", TypeII),
];

/// The 20 signal tasks in reporting order (Type-I first).
pub fn registry() -> &'static [SignalTask] {
    &REGISTRY
}

pub fn lookup_task(signal_id: &str) -> Option<&'static SignalTask> {
    REGISTRY.iter().find(|t| t.signal_id == signal_id)
}

/// Position of a task in reporting order.
pub fn task_rank(signal_id: &str) -> usize {
    REGISTRY
        .iter()
        .position(|t| t.signal_id == signal_id)
        .unwrap_or(usize::MAX)
}

// ---------------------------------------------------------------------------
// Labels

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLabel {
    pub visit_id: String,
    pub slice_index: usize,
    pub signal_id: String,
    pub raw_score: f64,
}

pub fn binarize(task: &SignalTask, raw_score: f64) -> Result<u8> {
    if !(1.0..=6.0).contains(&raw_score) {
        return Err(Error::validation(
            task.signal_id,
            format!("raw score {raw_score} outside [1, 6]"),
        ));
    }
    let cut = match task.signal_type {
        SignalType::TypeI => 3.5,
        SignalType::TypeII => 1.5,
    };
    Ok(u8::from(raw_score > cut))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelKey {
    pub visit_id: String,
    pub slice_index: usize,
    pub signal_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub raw_score: f64,
    pub binary: u8,
}

/// Binarized labels keyed by (visit, slice, signal). A missing key means the
/// pair was not coded and is not evaluated.
#[derive(Debug, Clone, Default)]
pub struct LabelSet {
    pub labels: BTreeMap<LabelKey, Label>,
}

impl LabelSet {
    pub fn from_raw(raw: &[RawLabel]) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for (i, r) in raw.iter().enumerate() {
            let task = lookup_task(&r.signal_id).ok_or_else(|| {
                Error::validation(
                    format!("label row {}", i + 1),
                    format!("unknown signal_id `{}`", r.signal_id),
                )
            })?;
            let binary = binarize(task, r.raw_score)
                .map_err(|_| Error::validation(
                    format!("label row {}", i + 1),
                    format!("raw score {} outside [1, 6]", r.raw_score),
                ))?;
            let key = LabelKey {
                visit_id: r.visit_id.clone(),
                slice_index: r.slice_index,
                signal_id: r.signal_id.clone(),
            };
            if labels
                .insert(
                    key,
                    Label {
                        raw_score: r.raw_score,
                        binary,
                    },
                )
                .is_some()
            {
                return Err(Error::Integrity(format!(
                    "duplicate label for {}#{} {}",
                    r.visit_id, r.slice_index, r.signal_id
                )));
            }
        }
        Ok(LabelSet { labels })
    }

    pub fn get(&self, visit_id: &str, slice_index: usize, signal_id: &str) -> Option<Label> {
        self.labels
            .get(&LabelKey {
                visit_id: visit_id.to_string(),
                slice_index,
                signal_id: signal_id.to_string(),
            })
            .copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn check_header(path: &Path, reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<RawLabel>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &["visit_id", "slice_index", "signal_id", "raw_score"])?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RawLabel>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[RawLabel]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for l in labels {
        w.serialize(l)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Metadata

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientRace {
    White,
    NonWhite,
    Unknown,
}

impl PatientRace {
    pub fn as_str(self) -> &'static str {
        match self {
            PatientRace::White => "white",
            PatientRace::NonWhite => "non_white",
            PatientRace::Unknown => "unknown",
        }
    }
}

impl FromStr for PatientRace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "white" => Ok(PatientRace::White),
            "non_white" | "nonwhite" => Ok(PatientRace::NonWhite),
            "" | "unknown" => Ok(PatientRace::Unknown),
            other => Err(format!("unknown patient_race `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitMetadata {
    pub visit_id: String,
    pub provider_id: String,
    pub provider_group: String,
    pub patient_race: PatientRace,
}

#[derive(Deserialize)]
struct MetadataRow {
    visit_id: String,
    provider_id: String,
    provider_group: String,
    patient_race: String,
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<BTreeMap<String, VisitMetadata>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    check_header(
        path,
        &mut rdr,
        &["visit_id", "provider_id", "provider_group", "patient_race"],
    )?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<MetadataRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let patient_race = row.patient_race.parse().map_err(|m| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        })?;
        let meta = VisitMetadata {
            visit_id: row.visit_id.clone(),
            provider_id: row.provider_id,
            provider_group: row.provider_group,
            patient_race,
        };
        if out.insert(row.visit_id.clone(), meta).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate visit_id `{}`", row.visit_id),
            });
        }
    }
    Ok(out)
}

pub fn write_metadata(path: impl AsRef<Path>, meta: &BTreeMap<String, VisitMetadata>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["visit_id", "provider_id", "provider_group", "patient_race"])?;
    for m in meta.values() {
        w.write_record([
            m.visit_id.as_str(),
            m.provider_id.as_str(),
            m.provider_group.as_str(),
            m.patient_race.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Corpus

/// Sliced transcripts plus labels and metadata, the unit every downstream
/// stage consumes.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub slices: Vec<Slice>,
    pub dropped_slices: usize,
    pub labels: LabelSet,
    pub metadata: BTreeMap<String, VisitMetadata>,
}

#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub transcripts: PathBuf,
    pub labels: PathBuf,
    pub metadata: Option<PathBuf>,
}

impl Corpus {
    pub fn load(
        paths: &CorpusPaths,
        slice_len_s: f64,
        min_words: usize,
    ) -> Result<Corpus> {
        let visits = ingest_transcripts(&paths.transcripts)?;
        let set = build_slices(&visits, slice_len_s, min_words)?;
        let labels = LabelSet::from_raw(&read_labels(&paths.labels)?)?;
        let metadata = match &paths.metadata {
            Some(p) => read_metadata(p)?,
            None => BTreeMap::new(),
        };
        Ok(Corpus {
            slices: set.slices,
            dropped_slices: set.dropped,
            labels,
            metadata,
        })
    }

    pub fn slice(&self, key: &SliceKey) -> Option<&Slice> {
        self.slices
            .iter()
            .find(|s| s.visit_id == key.visit_id && s.slice_index == key.slice_index)
    }

    /// Slices with at least one label, in (visit, slice) order.
    pub fn labeled_slices(&self) -> Vec<&Slice> {
        let labeled: BTreeSet<(&str, usize)> = self
            .labels
            .labels
            .keys()
            .map(|k| (k.visit_id.as_str(), k.slice_index))
            .collect();
        let mut out: Vec<&Slice> = self
            .slices
            .iter()
            .filter(|s| labeled.contains(&(s.visit_id.as_str(), s.slice_index)))
            .collect();
        out.sort_by(|a, b| (&a.visit_id, a.slice_index).cmp(&(&b.visit_id, b.slice_index)));
        out
    }

    pub fn segment_of(&self, visit_id: &str, slice_index: usize) -> Option<Segment> {
        self.slices
            .iter()
            .find(|s| s.visit_id == visit_id && s.slice_index == slice_index)
            .map(|s| s.segment)
    }
}

// ---------------------------------------------------------------------------
// Descriptive summary

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Mean and population standard deviation; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<MeanSd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanSd {
            mean,
            sd: var.sqrt(),
            n: values.len(),
        })
    }
}

impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.0} ± {:.0}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusSummary {
    pub visits: usize,
    pub slices: usize,
    pub dropped_slices: usize,
    pub slices_per_visit: Option<MeanSd>,
    pub words_per_slice: Option<MeanSd>,
    pub words_start: Option<MeanSd>,
    pub words_middle: Option<MeanSd>,
    pub words_end: Option<MeanSd>,
}

pub fn summarize(slices: &[Slice], dropped_slices: usize) -> CorpusSummary {
    let mut per_visit: BTreeMap<&str, usize> = BTreeMap::new();
    for s in slices {
        *per_visit.entry(s.visit_id.as_str()).or_default() += 1;
    }
    let counts: Vec<f64> = per_visit.values().map(|&c| c as f64).collect();
    let words = |seg: Option<Segment>| -> Vec<f64> {
        slices
            .iter()
            .filter(|s| seg.is_none_or(|g| s.segment == g))
            .map(|s| s.word_count as f64)
            .collect()
    };
    CorpusSummary {
        visits: per_visit.len(),
        slices: slices.len(),
        dropped_slices,
        slices_per_visit: MeanSd::of(&counts),
        words_per_slice: MeanSd::of(&words(None)),
        words_start: MeanSd::of(&words(Some(Segment::Start))),
        words_middle: MeanSd::of(&words(Some(Segment::Middle))),
        words_end: MeanSd::of(&words(Some(Segment::End))),
    }
}

impl CorpusSummary {
    /// Markdown table laid out like a dataset statistics summary.
    pub fn to_markdown(&self) -> String {
        let cell = |m: &Option<MeanSd>, prec: usize| match m {
            Some(m) => format!("{:.prec$} ± {:.prec$}", m.mean, m.sd, prec = prec),
            None => "--".to_string(),
        };
        let mut s = String::new();
        s.push_str("| Metric | Mean ± SD |\n|---|---|\n");
        s.push_str(&format!("| Segments/slices per visit | {} |\n", cell(&self.slices_per_visit, 1)));
        s.push_str(&format!("| Word count per segment | {} |\n", cell(&self.words_per_slice, 0)));
        s.push_str(&format!("| Word count (initial segments) | {} |\n", cell(&self.words_start, 0)));
        s.push_str(&format!("| Word count (middle segments) | {} |\n", cell(&self.words_middle, 0)));
        s.push_str(&format!("| Word count (final segments) | {} |\n", cell(&self.words_end, 0)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn turn(visit: &str, start: f64, text: &str) -> Turn {
        Turn {
            visit_id: visit.into(),
            speaker: Speaker::Provider,
            start_s: start,
            end_s: start + 1.0,
            text: text.into(),
        }
    }

    #[test]
    fn ingest_groups_and_sorts() {
        let data = r#"{"visit_id":"v1","speaker":"patient","start_s":20,"end_s":25,"text":"b"}
{"visit_id":"v1","speaker":"provider","start_s":0,"end_s":5,"text":"a"}
{"visit_id":"v1","speaker":"other","start_s":40,"end_s":41,"text":"c"}
"#;
        let visits = read_transcripts(data.as_bytes()).unwrap();
        assert_eq!(visits.len(), 1);
        let texts: Vec<_> = visits[0].turns.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["a", "b", "c"]);
    }

    #[test]
    fn ingest_empty_file() {
        assert!(read_transcripts(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn ingest_rejects_inverted_timestamps_with_line() {
        let data = "{\"visit_id\":\"v1\",\"speaker\":\"patient\",\"start_s\":1,\"end_s\":2,\"text\":\"x\"}\n\
                    {\"visit_id\":\"v1\",\"speaker\":\"patient\",\"start_s\":9,\"end_s\":3,\"text\":\"x\"}\n";
        let err = read_transcripts(data.as_bytes()).unwrap_err();
        assert!(matches!(&err, Error::Validation { location, .. } if location.ends_with(":2")), "{err}");
    }

    #[test]
    fn ingest_rejects_malformed_line() {
        let data = "{\"visit_id\":\"v1\",\"speaker\":\"patient\",\"start_s\":1,\"end_s\":2,\"text\":\"x\"}\nnot json\n";
        let err = read_transcripts(data.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn ingest_rejects_negative_start() {
        let data = "{\"visit_id\":\"v1\",\"speaker\":\"patient\",\"start_s\":-1,\"end_s\":2,\"text\":\"x\"}\n";
        assert!(matches!(read_transcripts(data.as_bytes()), Err(Error::Validation { .. })));
    }

    #[test]
    fn slicing_boundaries() {
        let v = Visit {
            visit_id: "v".into(),
            turns: vec![turn("v", 10.0, "a"), turn("v", 200.0, "b"), turn("v", 390.0, "c")],
        };
        let s = slice_visit(&v, 180.0).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.iter().map(|s| s.segment).collect::<Vec<_>>(), [Segment::Start, Segment::Middle, Segment::End]);

        let v = Visit {
            visit_id: "v".into(),
            turns: vec![turn("v", 0.0, "a"), turn("v", 170.0, "b")],
        };
        assert_eq!(slice_visit(&v, 180.0).unwrap().len(), 1);

        let v = Visit {
            visit_id: "v".into(),
            turns: vec![turn("v", 0.0, "a"), turn("v", 180.0, "b")],
        };
        let s = slice_visit(&v, 180.0).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].turns[0].text, "b");
    }

    #[test]
    fn empty_windows_are_reindexed() {
        let v = Visit {
            visit_id: "v".into(),
            turns: vec![turn("v", 0.0, "a"), turn("v", 700.0, "b")],
        };
        let s = slice_visit(&v, 180.0).unwrap();
        assert_eq!(s.iter().map(|s| s.slice_index).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(s[1].segment, Segment::End);
    }

    #[test]
    fn slice_length_must_be_positive() {
        let v = Visit { visit_id: "v".into(), turns: vec![] };
        assert!(slice_visit(&v, 0.0).is_err());
    }

    #[test]
    fn filter_drops_short_slices() {
        let v = Visit {
            visit_id: "v".into(),
            turns: vec![turn("v", 0.0, "one two three four five")],
        };
        let s = slice_visit(&v, 180.0).unwrap();
        let (kept, dropped) = filter_slices(s.clone(), 20);
        assert!(kept.is_empty());
        assert_eq!(dropped, 1);
        let (kept, dropped) = filter_slices(s.clone(), 0);
        assert_eq!(kept, s);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn binarize_thresholds() {
        let t1 = lookup_task("provider_warmth").unwrap();
        let t2 = lookup_task("patient_sadness").unwrap();
        assert_eq!(binarize(t1, 4.0).unwrap(), 1);
        assert_eq!(binarize(t1, 3.0).unwrap(), 0);
        assert_eq!(binarize(t2, 1.0).unwrap(), 0);
        let type1: Vec<u8> = (1..=6).map(|s| binarize(t1, s as f64).unwrap()).collect();
        let type2: Vec<u8> = (1..=6).map(|s| binarize(t2, s as f64).unwrap()).collect();
        assert_eq!(type1, [0, 0, 0, 1, 1, 1]);
        assert_eq!(type2, [0, 1, 1, 1, 1, 1]);
        assert!(binarize(t1, 0.5).is_err());
        assert!(binarize(t1, 6.5).is_err());
        assert!(binarize(t1, f64::NAN).is_err());
    }

    #[test]
    fn segment_rule() {
        assert_eq!(segment_position(0, 5), Segment::Start);
        assert_eq!(segment_position(2, 5), Segment::Middle);
        assert_eq!(segment_position(4, 5), Segment::End);
        assert_eq!(segment_position(0, 1), Segment::Start);
        assert_eq!(segment_position(1, 2), Segment::End);
    }

    #[test]
    fn registry_cardinality() {
        assert_eq!(registry().len(), 20);
        assert_eq!(registry().iter().filter(|t| t.signal_type == SignalType::TypeII).count(), 5);
        let ids: BTreeSet<_> = registry().iter().map(|t| t.signal_id).collect();
        assert_eq!(ids.len(), 20);
        assert_eq!(lookup_task("provider_hurriedness").unwrap().signal_type, SignalType::TypeI);
    }

    #[test]
    fn label_set_rejects_duplicates_and_unknown_signals() {
        let l = |sig: &str, score| RawLabel { visit_id: "v".into(), slice_index: 0, signal_id: sig.into(), raw_score: score };
        assert!(LabelSet::from_raw(&[l("provider_warmth", 2.0), l("provider_warmth", 3.0)]).is_err());
        assert!(LabelSet::from_raw(&[l("provider_anxiety", 2.0)]).is_err());
        assert!(LabelSet::from_raw(&[l("provider_warmth", 7.0)]).is_err());
        let set = LabelSet::from_raw(&[l("provider_warmth", 5.0)]).unwrap();
        assert_eq!(set.get("v", 0, "provider_warmth").unwrap().binary, 1);
    }

    #[test]
    fn race_parsing() {
        assert_eq!("Non-White".parse::<PatientRace>().unwrap(), PatientRace::NonWhite);
        assert_eq!("".parse::<PatientRace>().unwrap(), PatientRace::Unknown);
        assert!("purple".parse::<PatientRace>().is_err());
    }

    proptest! {
        #[test]
        fn slicing_partitions_turns(starts in proptest::collection::vec(0.0f64..2000.0, 0..60), len in 30.0f64..400.0) {
            let turns: Vec<Turn> = starts.iter().enumerate()
                .map(|(i, &s)| turn("v", s, &"w ".repeat(i % 7 + 1)))
                .collect();
            let mut v = Visit { visit_id: "v".into(), turns };
            v.turns.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            let slices = slice_visit(&v, len).unwrap();
            let n_turns: usize = slices.iter().map(|s| s.turns.len()).sum();
            prop_assert_eq!(n_turns, v.turns.len());
            let words: usize = slices.iter().map(|s| s.word_count).sum();
            prop_assert_eq!(words, v.word_count());
            let n = slices.len();
            let count = |g| slices.iter().filter(|s| s.segment == g).count();
            if n > 0 {
                prop_assert_eq!(count(Segment::Start), 1);
                prop_assert_eq!(count(Segment::End), usize::from(n >= 2));
                prop_assert_eq!(count(Segment::Middle), n.saturating_sub(2));
            }
            for (i, s) in slices.iter().enumerate() {
                prop_assert_eq!(s.slice_index, i);
                prop_assert!(s.turns.windows(2).all(|w| w[0].start_s <= w[1].start_s));
            }
        }

        #[test]
        fn binarize_is_monotone(a in 1.0f64..=6.0, b in 1.0f64..=6.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for t in registry() {
                prop_assert!(binarize(t, lo).unwrap() <= binarize(t, hi).unwrap());
            }
        }
    }
}
