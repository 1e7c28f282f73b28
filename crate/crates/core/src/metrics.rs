//! Balanced accuracy, correctness aggregation and demographic parity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::corpus::{task_rank, Corpus, LabelSet, MeanSd, PatientRace, Segment, SliceKey};
use crate::error::{Error, Result};
use crate::inference::{PredictionKey, PredictionRecord};
use crate::promptkit::Configuration;

/// Ratio below which the four-fifths rule flags disparate impact.
pub const FOUR_FIFTHS: f64 = 0.8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, prediction: u8, truth: u8) {
        match (prediction, truth) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = Confusion::default();
        for (p, t) in pairs {
            c.add(p, t);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Only one class present in the ground truth; `value` is that class's
    /// recall.
    pub degenerate: bool,
}

pub fn balanced_accuracy(c: &Confusion) -> Result<BalancedAccuracy> {
    let pos = c.tp + c.fn_;
    let neg = c.tn + c.fp;
    let tpr = (pos > 0).then(|| c.tp as f64 / pos as f64);
    let tnr = (neg > 0).then(|| c.tn as f64 / neg as f64);
    match (tpr, tnr) {
        (Some(a), Some(b)) => Ok(BalancedAccuracy {
            value: (a + b) / 2.0,
            degenerate: false,
        }),
        (Some(v), None) | (None, Some(v)) => Ok(BalancedAccuracy {
            value: v,
            degenerate: true,
        }),
        (None, None) => Err(Error::UndefinedMetric("empty confusion matrix".into())),
    }
}

// ---------------------------------------------------------------------------
// Correctness

/// One answered prediction joined with its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorrectnessCell {
    pub visit_id: String,
    pub slice_index: usize,
    pub signal_id: String,
    pub config_id: String,
    pub prediction: u8,
    pub truth: u8,
    pub correct: bool,
}

impl CorrectnessCell {
    pub fn slice_key(&self) -> SliceKey {
        SliceKey {
            visit_id: self.visit_id.clone(),
            slice_index: self.slice_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SliceCorrectness {
    pub visit_id: String,
    pub slice_index: usize,
    pub correct: usize,
    /// Answered (task, configuration) cells; the denominator for `correct`.
    pub answered: usize,
    pub abstained: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CorrectnessMatrix {
    pub cells: Vec<CorrectnessCell>,
    pub per_slice: Vec<SliceCorrectness>,
}

impl CorrectnessMatrix {
    pub fn total_abstained(&self) -> usize {
        self.per_slice.iter().map(|s| s.abstained).sum()
    }
}

/// Joins predictions with labels. Records without a label are ignored;
/// unanswered records count as abstentions for their slice.
pub fn correctness_matrix(records: &[PredictionRecord], labels: &LabelSet) -> Result<CorrectnessMatrix> {
    let mut seen: BTreeSet<PredictionKey> = BTreeSet::new();
    let mut per_slice: BTreeMap<SliceKey, SliceCorrectness> = BTreeMap::new();
    let mut cells = Vec::new();
    for r in records {
        if !seen.insert(r.key()) {
            return Err(Error::Integrity(format!(
                "duplicate prediction for {}/{}/{}/{}",
                r.visit_id, r.slice_index, r.signal_id, r.config_id
            )));
        }
        let Some(label) = labels.get(&r.visit_id, r.slice_index, &r.signal_id) else {
            continue;
        };
        let entry = per_slice
            .entry(SliceKey {
                visit_id: r.visit_id.clone(),
                slice_index: r.slice_index,
            })
            .or_insert_with(|| SliceCorrectness {
                visit_id: r.visit_id.clone(),
                slice_index: r.slice_index,
                correct: 0,
                answered: 0,
                abstained: 0,
            });
        match r.prediction {
            Some(p) => {
                let correct = p == label.binary;
                entry.answered += 1;
                entry.correct += usize::from(correct);
                cells.push(CorrectnessCell {
                    visit_id: r.visit_id.clone(),
                    slice_index: r.slice_index,
                    signal_id: r.signal_id.clone(),
                    config_id: r.config_id.clone(),
                    prediction: p,
                    truth: label.binary,
                    correct,
                });
            }
            None => entry.abstained += 1,
        }
    }
    cells.sort_by(|a, b| {
        (&a.visit_id, a.slice_index, task_rank(&a.signal_id), config_rank(&a.config_id), &a.config_id).cmp(&(
            &b.visit_id,
            b.slice_index,
            task_rank(&b.signal_id),
            config_rank(&b.config_id),
            &b.config_id,
        ))
    });
    Ok(CorrectnessMatrix {
        cells,
        per_slice: per_slice.into_values().collect(),
    })
}

fn config_rank(config_id: &str) -> usize {
    config_id
        .parse::<Configuration>()
        .map(|c| c.rank())
        .unwrap_or(usize::MAX)
}

// ---------------------------------------------------------------------------
// Grouping

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Task,
    Config,
    Segment,
    Race,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Task,
    Config,
    TaskConfig,
    Segment,
    Race,
    TaskRace,
    TaskSegment,
}

impl Grouping {
    pub fn dimensions(self) -> &'static [Dimension] {
        match self {
            Grouping::Task => &[Dimension::Task],
            Grouping::Config => &[Dimension::Config],
            Grouping::TaskConfig => &[Dimension::Task, Dimension::Config],
            Grouping::Segment => &[Dimension::Segment],
            Grouping::Race => &[Dimension::Race],
            Grouping::TaskRace => &[Dimension::Task, Dimension::Race],
            Grouping::TaskSegment => &[Dimension::Task, Dimension::Segment],
        }
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace(['×', '*', '-', 'x'], "_").as_str() {
            "task" => Grouping::Task,
            "config" | "configuration" => Grouping::Config,
            "task_config" => Grouping::TaskConfig,
            "segment" => Grouping::Segment,
            "race" => Grouping::Race,
            "task_race" => Grouping::TaskRace,
            "task_segment" => Grouping::TaskSegment,
            _ => return Err(Error::Config(format!("unknown grouping `{s}`"))),
        })
    }
}

/// Segment and race lookups used to resolve grouping keys.
#[derive(Debug, Clone, Default)]
pub struct GroupContext {
    pub segments: BTreeMap<SliceKey, Segment>,
    pub race: BTreeMap<String, PatientRace>,
}

impl GroupContext {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        GroupContext {
            segments: corpus.slices.iter().map(|s| (s.key(), s.segment)).collect(),
            race: corpus
                .metadata
                .iter()
                .map(|(v, m)| (v.clone(), m.patient_race))
                .collect(),
        }
    }

    fn value(&self, dim: Dimension, cell: &CorrectnessCell) -> Result<String> {
        Ok(match dim {
            Dimension::Task => cell.signal_id.clone(),
            Dimension::Config => cell.config_id.clone(),
            Dimension::Segment => self
                .segments
                .get(&cell.slice_key())
                .ok_or_else(|| Error::Config(format!("no segment for slice {}", cell.slice_key())))?
                .as_str()
                .to_string(),
            Dimension::Race => self
                .race
                .get(&cell.visit_id)
                .ok_or_else(|| Error::Config(format!("no patient race for visit `{}`", cell.visit_id)))?
                .as_str()
                .to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetric {
    pub group_key: Vec<String>,
    pub balanced_accuracy: Option<f64>,
    pub n: u64,
    pub degenerate: bool,
    pub confusion: Confusion,
}

impl GroupMetric {
    fn from_confusion(group_key: Vec<String>, confusion: Confusion) -> Self {
        let ba = balanced_accuracy(&confusion).ok();
        GroupMetric {
            group_key,
            balanced_accuracy: ba.map(|b| b.value),
            n: confusion.total(),
            degenerate: ba.is_some_and(|b| b.degenerate),
            confusion,
        }
    }
}

fn key_order(dims: &[Dimension], key: &[String]) -> Vec<(usize, String)> {
    dims.iter()
        .zip(key)
        .map(|(d, v)| {
            let rank = match d {
                Dimension::Task => task_rank(v),
                Dimension::Config => config_rank(v),
                Dimension::Segment => Segment::ALL.iter().position(|s| s.as_str() == v).unwrap_or(usize::MAX),
                Dimension::Race => 0,
            };
            (rank, v.clone())
        })
        .collect()
}

fn confusions_by(
    cells: &[CorrectnessCell],
    ctx: &GroupContext,
    dims: &[Dimension],
) -> Result<Vec<(Vec<String>, Confusion)>> {
    let mut map: BTreeMap<Vec<(usize, String)>, Confusion> = BTreeMap::new();
    for cell in cells {
        let key: Vec<String> = dims.iter().map(|&d| ctx.value(d, cell)).collect::<Result<_>>()?;
        map.entry(key_order(dims, &key))
            .or_default()
            .add(cell.prediction, cell.truth);
    }
    Ok(map
        .into_iter()
        .map(|(k, c)| (k.into_iter().map(|(_, v)| v).collect(), c))
        .collect())
}

/// One metric per group, ordered by task registry, configuration and segment
/// order.
pub fn group_balanced_accuracy(
    cells: &[CorrectnessCell],
    ctx: &GroupContext,
    grouping: Grouping,
) -> Result<Vec<GroupMetric>> {
    group_by_dimensions(cells, ctx, grouping.dimensions())
}

pub fn group_by_dimensions(
    cells: &[CorrectnessCell],
    ctx: &GroupContext,
    dims: &[Dimension],
) -> Result<Vec<GroupMetric>> {
    Ok(confusions_by(cells, ctx, dims)?
        .into_iter()
        .map(|(k, c)| GroupMetric::from_confusion(k, c))
        .collect())
}

/// Balanced accuracy per configuration within each group, summarized as
/// mean and population sd across configurations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigSpread {
    pub group_key: Vec<String>,
    pub per_config: Vec<GroupMetric>,
    pub summary: Option<MeanSd>,
    /// At least one per-configuration cell was degenerate.
    pub degenerate: bool,
}

pub fn spread_over_configs(
    cells: &[CorrectnessCell],
    ctx: &GroupContext,
    outer: &[Dimension],
) -> Result<Vec<ConfigSpread>> {
    let mut dims = outer.to_vec();
    dims.push(Dimension::Config);
    let mut grouped: Vec<ConfigSpread> = Vec::new();
    for metric in group_by_dimensions(cells, ctx, &dims)? {
        let outer_key = metric.group_key[..outer.len()].to_vec();
        match grouped.last_mut() {
            Some(g) if g.group_key == outer_key => g.per_config.push(metric),
            _ => grouped.push(ConfigSpread {
                group_key: outer_key,
                per_config: vec![metric],
                summary: None,
                degenerate: false,
            }),
        }
    }
    for g in &mut grouped {
        let values: Vec<f64> = g.per_config.iter().filter_map(|m| m.balanced_accuracy).collect();
        g.summary = MeanSd::of(&values);
        g.degenerate = g.per_config.iter().any(|m| m.degenerate);
    }
    Ok(grouped)
}

// ---------------------------------------------------------------------------
// Demographic parity

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParityRatio {
    pub dpr: Option<f64>,
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undefined_reason: Option<String>,
}

impl ParityRatio {
    fn undefined(reason: impl Into<String>) -> Self {
        ParityRatio {
            dpr: None,
            flagged: false,
            undefined_reason: Some(reason.into()),
        }
    }
}

/// `min / max` of two balanced accuracies, flagged when strictly below 0.8.
pub fn parity_ratio(a: f64, b: f64) -> ParityRatio {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if !(hi > 0.0) || !lo.is_finite() {
        return ParityRatio::undefined("both groups have zero balanced accuracy");
    }
    let dpr = lo / hi;
    ParityRatio {
        dpr: Some(dpr),
        // Tolerance keeps exact four-fifths ratios such as 0.4/0.5 unflagged.
        flagged: dpr < FOUR_FIFTHS - 1e-12,
        undefined_reason: None,
    }
}

pub fn demographic_parity_ratio(a: &GroupMetric, b: &GroupMetric) -> ParityRatio {
    for g in [a, b] {
        if g.n == 0 || g.balanced_accuracy.is_none() {
            return ParityRatio::undefined(format!("group {} is empty", g.group_key.join("/")));
        }
        if g.degenerate {
            return ParityRatio::undefined(format!(
                "group {} has one class only",
                g.group_key.join("/")
            ));
        }
    }
    parity_ratio(a.balanced_accuracy.unwrap(), b.balanced_accuracy.unwrap())
}

impl fmt::Display for ParityRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.dpr {
            Some(d) => write!(f, "{d:.3}{}", if self.flagged { " (flagged)" } else { "" }),
            None => write!(f, "undefined"),
        }
    }
}
