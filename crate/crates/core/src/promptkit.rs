//! Prompt compilation for every valid (model dialect, prompt strategy) pair.
//!
//! A prompt is built from fixed components: a role specification, a job
//! description, the scoring instruction for the task, the transcript, and an
//! output-format clause. Few-shot strategies add labeled example transcripts
//! ahead of the target transcript; reasoning strategies swap the output clause
//! for the answer-then-explanation variant.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, SignalTask, SignalType, Slice, Speaker};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptStrategy {
    #[serde(rename = "ZS")]
    ZeroShot,
    #[serde(rename = "FS")]
    FewShot,
    #[serde(rename = "COT")]
    ChainOfThought,
    #[serde(rename = "FSCOT")]
    FewShotChainOfThought,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::ZeroShot,
        PromptStrategy::FewShot,
        PromptStrategy::ChainOfThought,
        PromptStrategy::FewShotChainOfThought,
    ];

    pub fn code(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "ZS",
            PromptStrategy::FewShot => "FS",
            PromptStrategy::ChainOfThought => "COT",
            PromptStrategy::FewShotChainOfThought => "FSCOT",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "Zero Shot",
            PromptStrategy::FewShot => "Few Shot",
            PromptStrategy::ChainOfThought => "Chain of Thought",
            PromptStrategy::FewShotChainOfThought => "Few Shot with Chain of Thought",
        }
    }

    pub fn uses_examples(self) -> bool {
        matches!(self, PromptStrategy::FewShot | PromptStrategy::FewShotChainOfThought)
    }

    pub fn uses_reasoning(self) -> bool {
        matches!(
            self,
            PromptStrategy::ChainOfThought | PromptStrategy::FewShotChainOfThought
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelDialect {
    Flan,
    Gemma,
    Llama,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStyle {
    YesNo,
    Numeric,
}

impl ModelDialect {
    pub const ALL: [ModelDialect; 3] = [ModelDialect::Flan, ModelDialect::Gemma, ModelDialect::Llama];

    pub fn code(self) -> &'static str {
        match self {
            ModelDialect::Flan => "FLAN",
            ModelDialect::Gemma => "Gemma",
            ModelDialect::Llama => "LLaMA",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            ModelDialect::Flan => "FLAN-T5",
            ModelDialect::Gemma => "Gemma2-2b",
            ModelDialect::Llama => "LLaMA3.1-405B",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ModelDialect::Flan => "flan",
            ModelDialect::Gemma => "gemma",
            ModelDialect::Llama => "llama",
        }
    }

    pub fn answer_style(self) -> AnswerStyle {
        match self {
            ModelDialect::Llama => AnswerStyle::Numeric,
            _ => AnswerStyle::YesNo,
        }
    }

    pub fn supports_reasoning(self) -> bool {
        !matches!(self, ModelDialect::Flan)
    }

    pub fn supports_fs_reasoning(self) -> bool {
        matches!(self, ModelDialect::Llama)
    }

    pub fn supports(self, strategy: PromptStrategy) -> bool {
        match strategy {
            PromptStrategy::ZeroShot | PromptStrategy::FewShot => true,
            PromptStrategy::ChainOfThought => self.supports_reasoning(),
            PromptStrategy::FewShotChainOfThought => self.supports_fs_reasoning(),
        }
    }
}

impl FromStr for ModelDialect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flan" | "flan-t5" => Ok(ModelDialect::Flan),
            "gemma" | "gemma2" => Ok(ModelDialect::Gemma),
            "llama" => Ok(ModelDialect::Llama),
            _ => Err(Error::Config(format!("unknown model dialect `{s}`"))),
        }
    }
}

/// A model dialect paired with a prompt strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Configuration {
    pub dialect: ModelDialect,
    pub strategy: PromptStrategy,
}

impl Configuration {
    pub fn config_id(&self) -> String {
        format!("{}-{}", self.dialect.code(), self.strategy.code())
    }

    pub fn is_valid(&self) -> bool {
        self.dialect.supports(self.strategy)
    }

    /// Position in the reporting order of [`valid_configurations`].
    pub fn rank(&self) -> usize {
        valid_configurations()
            .iter()
            .position(|c| c == self)
            .unwrap_or(usize::MAX)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.config_id())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (d, p) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("malformed configuration id `{s}`")))?;
        let dialect: ModelDialect = d.parse()?;
        let strategy = PromptStrategy::ALL
            .into_iter()
            .find(|st| st.code().eq_ignore_ascii_case(p))
            .ok_or_else(|| Error::Config(format!("unknown prompt strategy `{p}`")))?;
        Ok(Configuration { dialect, strategy })
    }
}

/// The nine evaluated configurations in reporting order.
pub fn valid_configurations() -> Vec<Configuration> {
    ModelDialect::ALL
        .into_iter()
        .flat_map(|dialect| {
            PromptStrategy::ALL
                .into_iter()
                .map(move |strategy| Configuration { dialect, strategy })
        })
        .filter(Configuration::is_valid)
        .collect()
}

// ---------------------------------------------------------------------------
// Templates

/// Text blocks for one dialect. `{signal}` expands to the lowercase signal
/// name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialectTemplates {
    pub role: String,
    pub job: String,
    pub scoring_type1: String,
    pub scoring_type2_presence: String,
    pub output_answer: String,
    pub output_answer_reasoning: String,
}

const ROLE: &str = "You are a behavior analyst assessing doctor patient interaction to help doctors with communication feedback. You will be given a small part of a transcript of a conversation between a doctor and a patient.";
const JOB: &str = "You have to score the {signal} in this text. Look at each behavior and look for deviations from normal or neutral behavior, be it positive (high) or negative (low).";
const INTEGER_SCALE: &str = "The expected scale tags each behavior with an integer: 0 means below average or not existent, 1 means above average or existent.";
const LLAMA_EXAMPLE_INTRO: &str = "Here are examples (please interpret speaker turns accurately based on the context, even if the diarization may not be perfect):";
const YES_NO_EXAMPLE_INTRO: &str = "Here are example transcripts with their labels:";

impl DialectTemplates {
    pub fn yes_no_default() -> Self {
        DialectTemplates {
            role: ROLE.into(),
            job: JOB.into(),
            scoring_type1: "Is the {signal} higher than normal?".into(),
            scoring_type2_presence: "Did you see any presence of {signal} in this slice?".into(),
            output_answer: "Respond only with one word, \"yes\" or \"no\".".into(),
            output_answer_reasoning: "Start your answer with either Yes or No. Explain why you think it was higher or lower. DO NOT repeat any sentence!".into(),
        }
    }

    pub fn numeric_default() -> Self {
        DialectTemplates {
            role: ROLE.into(),
            job: JOB.into(),
            scoring_type1: INTEGER_SCALE.into(),
            scoring_type2_presence: format!(
                "Did you see any presence of {{signal}} in this slice? {INTEGER_SCALE}"
            ),
            output_answer: "Return the integer only.".into(),
            output_answer_reasoning:
                "Return the integer first, followed by an explanation of the score in two sentences."
                    .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub flan: DialectTemplates,
    pub gemma: DialectTemplates,
    pub llama: DialectTemplates,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            flan: DialectTemplates::yes_no_default(),
            gemma: DialectTemplates::yes_no_default(),
            llama: DialectTemplates::numeric_default(),
        }
    }
}

/// Partial override of one dialect's blocks; unset keys keep the default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialectOverride {
    role: Option<String>,
    job: Option<String>,
    scoring_type1: Option<String>,
    scoring_type2_presence: Option<String>,
    output_answer: Option<String>,
    output_answer_reasoning: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateOverrideFile {
    flan: Option<DialectOverride>,
    gemma: Option<DialectOverride>,
    llama: Option<DialectOverride>,
}

impl DialectOverride {
    fn apply(self, t: &mut DialectTemplates) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { t.$f = v; } )* };
        }
        set!(role, job, scoring_type1, scoring_type2_presence, output_answer, output_answer_reasoning);
    }
}

impl PromptTemplates {
    /// Defaults with the keyed blocks of a TOML override file applied.
    pub fn from_override_toml(text: &str) -> Result<Self> {
        let file: TemplateOverrideFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("prompt template file: {e}")))?;
        let mut t = PromptTemplates::default();
        if let Some(o) = file.flan {
            o.apply(&mut t.flan);
        }
        if let Some(o) = file.gemma {
            o.apply(&mut t.gemma);
        }
        if let Some(o) = file.llama {
            o.apply(&mut t.llama);
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_override_toml(&text)
    }

    pub fn for_dialect(&self, d: ModelDialect) -> &DialectTemplates {
        match d {
            ModelDialect::Flan => &self.flan,
            ModelDialect::Gemma => &self.gemma,
            ModelDialect::Llama => &self.llama,
        }
    }
}

fn fill(template: &str, task: &SignalTask) -> String {
    template.replace("{signal}", &task.prompt_name())
}

/// The task-specific scoring instruction for a dialect.
pub fn scoring_question(task: &SignalTask, dialect: ModelDialect) -> String {
    scoring_question_with(&PromptTemplates::default(), task, dialect)
}

pub fn scoring_question_with(
    templates: &PromptTemplates,
    task: &SignalTask,
    dialect: ModelDialect,
) -> String {
    let t = templates.for_dialect(dialect);
    match task.signal_type {
        SignalType::TypeI => fill(&t.scoring_type1, task),
        SignalType::TypeII => fill(&t.scoring_type2_presence, task),
    }
}

/// Renders a slice as `Doctor: ...` / `Patient: ...` lines.
pub fn render_transcript(slice: &Slice) -> String {
    slice
        .turns
        .iter()
        .map(|t| {
            let who = match t.speaker {
                Speaker::Provider => "Doctor",
                Speaker::Patient => "Patient",
                Speaker::Other => "Other",
            };
            format!("{who}: {}", t.text.trim())
        })
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------------
// Few-shot bank

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub signal_id: String,
    pub text: String,
    pub label: u8,
    pub visit_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_index: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FewShotBank {
    pub entries: BTreeMap<String, Vec<FewShotExample>>,
}

/// Raw-score cut-offs that make a labeled slice an extreme example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankThresholds {
    pub type1_low_max: f64,
    pub type1_high_min: f64,
    pub type2_absent_max: f64,
    pub type2_present_min: f64,
}

impl Default for BankThresholds {
    fn default() -> Self {
        BankThresholds {
            type1_low_max: 2.0,
            type1_high_min: 5.0,
            type2_absent_max: 1.0,
            type2_present_min: 3.0,
        }
    }
}

impl FewShotBank {
    pub fn push(&mut self, ex: FewShotExample) -> Result<()> {
        if ex.label > 1 {
            return Err(Error::validation(
                format!("few-shot example for {}", ex.signal_id),
                format!("label {} is not binary", ex.label),
            ));
        }
        self.entries.entry(ex.signal_id.clone()).or_default().push(ex);
        Ok(())
    }

    /// Collects extreme-score slices of the corpus as examples.
    pub fn from_corpus(corpus: &Corpus, thresholds: &BankThresholds) -> FewShotBank {
        let mut bank = FewShotBank::default();
        let index: BTreeMap<(&str, usize), &Slice> = corpus
            .slices
            .iter()
            .map(|s| ((s.visit_id.as_str(), s.slice_index), s))
            .collect();
        for (key, label) in &corpus.labels.labels {
            let Some(task) = crate::corpus::lookup_task(&key.signal_id) else {
                continue;
            };
            let Some(slice) = index.get(&(key.visit_id.as_str(), key.slice_index)) else {
                continue;
            };
            let (lo, hi) = match task.signal_type {
                SignalType::TypeI => (thresholds.type1_low_max, thresholds.type1_high_min),
                SignalType::TypeII => (thresholds.type2_absent_max, thresholds.type2_present_min),
            };
            let label = if label.raw_score <= lo {
                0
            } else if label.raw_score >= hi {
                1
            } else {
                continue;
            };
            bank.entries
                .entry(key.signal_id.clone())
                .or_default()
                .push(FewShotExample {
                    signal_id: key.signal_id.clone(),
                    text: render_transcript(slice),
                    label,
                    visit_id: key.visit_id.clone(),
                    slice_index: Some(key.slice_index),
                });
        }
        bank
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FewShotBank> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut bank = FewShotBank::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ex: FewShotExample = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            bank.push(ex)?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for ex in self.entries.values().flatten() {
            let line = serde_json::to_string(ex)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn derived_seed(seed: u64, task: &SignalTask, target: &Slice) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(task.signal_id.as_bytes());
    h.update([0]);
    h.update(target.visit_id.as_bytes());
    h.update([0]);
    h.update((target.slice_index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Picks `k_per_class` positive and negative examples for `task`, never from
/// the target slice's visit.
///
/// Numeric dialects get all positive examples before all negative ones;
/// yes/no dialects get alternating positive/negative pairs.
pub fn select_few_shot(
    bank: &FewShotBank,
    task: &SignalTask,
    target: &Slice,
    style: AnswerStyle,
    k_per_class: usize,
    seed: u64,
) -> Result<Vec<FewShotExample>> {
    let pool = bank.entries.get(task.signal_id).map(Vec::as_slice).unwrap_or(&[]);
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, task, target));
    let mut pick = |label: u8, class: &'static str| -> Result<Vec<FewShotExample>> {
        let mut eligible: Vec<&FewShotExample> = pool
            .iter()
            .filter(|e| e.label == label && e.visit_id != target.visit_id)
            .collect();
        if eligible.len() < k_per_class || k_per_class == 0 {
            return Err(Error::FewShotUnavailable {
                task: task.signal_id.to_string(),
                class,
            });
        }
        eligible.shuffle(&mut rng);
        Ok(eligible.into_iter().take(k_per_class).cloned().collect())
    };
    let high = pick(1, "positive")?;
    let low = pick(0, "negative")?;
    Ok(match style {
        AnswerStyle::Numeric => high.into_iter().chain(low).collect(),
        AnswerStyle::YesNo => high
            .into_iter()
            .zip(low)
            .flat_map(|(h, l)| [h, l])
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Compilation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadingToken {
    LeadingYesNo,
    LeadingInteger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsePlan {
    pub leading: LeadingToken,
    pub reasoning_expected: bool,
}

impl ParsePlan {
    /// Answer tokens as (positive, negative).
    pub fn candidate_tokens(&self) -> (&'static str, &'static str) {
        match self.leading {
            LeadingToken::LeadingYesNo => ("yes", "no"),
            LeadingToken::LeadingInteger => ("1", "0"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPrompt {
    pub config: Configuration,
    pub signal_id: &'static str,
    pub full_text: String,
    pub parse_plan: ParsePlan,
    pub candidate_tokens: (String, String),
    /// Visits the few-shot examples came from, in prompt order.
    pub example_sources: Vec<String>,
}

/// Compiles prompts under fixed templates, few-shot bank and seed.
#[derive(Debug, Clone)]
pub struct PromptCompiler {
    pub templates: PromptTemplates,
    pub bank: Option<FewShotBank>,
    pub k_per_class: usize,
    pub seed: u64,
}

impl PromptCompiler {
    pub fn new(bank: Option<FewShotBank>, seed: u64) -> Self {
        PromptCompiler {
            templates: PromptTemplates::default(),
            bank,
            k_per_class: 1,
            seed,
        }
    }

    pub fn compile(
        &self,
        config: Configuration,
        task: &'static SignalTask,
        slice: &Slice,
    ) -> Result<CompiledPrompt> {
        if !config.is_valid() {
            return Err(Error::Config(format!(
                "configuration {config} is not evaluated: {} does not support {}",
                config.dialect.long_name(),
                config.strategy.long_name()
            )));
        }
        let dialect = config.dialect;
        let style = dialect.answer_style();
        let t = self.templates.for_dialect(dialect);
        let transcript = render_transcript(slice);
        let question = scoring_question_with(&self.templates, task, dialect);
        let output = if config.strategy.uses_reasoning() {
            fill(&t.output_answer_reasoning, task)
        } else {
            fill(&t.output_answer, task)
        };

        let mut parts: Vec<String> = vec![fill(&t.role, task), fill(&t.job, task)];
        let mut example_sources = Vec::new();

        if config.strategy.uses_examples() {
            let bank = self.bank.as_ref().ok_or_else(|| {
                Error::Config(format!("{config} requires a few-shot bank"))
            })?;
            let examples = select_few_shot(bank, task, slice, style, self.k_per_class, self.seed)?;
            example_sources = examples.iter().map(|e| e.visit_id.clone()).collect();
            match style {
                AnswerStyle::Numeric => {
                    let name = task.prompt_name();
                    let listed = examples
                        .iter()
                        .map(|e| {
                            let level = if e.label == 1 { "High" } else { "Low" };
                            format!("{level} {name} example: {}", e.text)
                        })
                        .collect::<Vec<_>>()
                        .join(";\n");
                    parts.push(format!("{question}\n{LLAMA_EXAMPLE_INTRO}\n{listed}."));
                    parts.push(format!("Transcript:\n{transcript}"));
                    parts.push(output);
                }
                AnswerStyle::YesNo => {
                    parts.push(format!("{question}\n{YES_NO_EXAMPLE_INTRO}"));
                    for e in &examples {
                        let label = if e.label == 1 { "yes" } else { "no" };
                        parts.push(format!("#TRANSCRIPT: {}\n#LABEL: {label}", e.text));
                    }
                    parts.push(format!("#TRANSCRIPT: {transcript}"));
                    parts.push(output);
                    parts.push("#LABEL:".to_string());
                }
            }
        } else {
            parts.push(format!("Transcript:\n{transcript}"));
            parts.push(format!("{question}\n{output}"));
        }

        let full_text = parts.join("\n\n");
        if full_text.matches(transcript.as_str()).count() != 1 {
            return Err(Error::Integrity(format!(
                "target transcript {}#{} is not contained exactly once in the {config} prompt",
                slice.visit_id, slice.slice_index
            )));
        }
        let parse_plan = ParsePlan {
            leading: match style {
                AnswerStyle::YesNo => LeadingToken::LeadingYesNo,
                AnswerStyle::Numeric => LeadingToken::LeadingInteger,
            },
            reasoning_expected: config.strategy.uses_reasoning(),
        };
        let (pos, neg) = parse_plan.candidate_tokens();
        Ok(CompiledPrompt {
            config,
            signal_id: task.signal_id,
            full_text,
            parse_plan,
            candidate_tokens: (pos.to_string(), neg.to_string()),
            example_sources,
        })
    }
}

/// One-off compilation with default templates and one example per class.
pub fn compile_prompt(
    config: Configuration,
    task: &'static SignalTask,
    slice: &Slice,
    bank: Option<&FewShotBank>,
    seed: u64,
) -> Result<CompiledPrompt> {
    PromptCompiler::new(bank.cloned(), seed).compile(config, task, slice)
}
