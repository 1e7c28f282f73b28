//! Deterministic synthetic study used by the examples, the CLI smoke tests
//! and the acceptance suite.
//!
//! Ten visits, five provider groups of two visits, three non-white patients.
//! Every slice carries one tone (cheerful, calm, worried or neutral) that
//! shows up as a marker word in the transcript and drives both the labels and
//! the rule-based mock backends, so predictions are right often but not
//! always.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    registry, write_labels, write_metadata, PatientRace, RawLabel, SignalType, Speaker, Turn,
    VisitMetadata,
};
use crate::error::{Error, Result};
use crate::inference::MockRule;
use crate::promptkit::ModelDialect;

pub const FIXTURE_VISITS: usize = 10;
const SLICES_PER_VISIT: [usize; FIXTURE_VISITS] = [5, 6, 5, 6, 7, 5, 6, 5, 6, 5];
const NON_WHITE: [usize; 3] = [2, 5, 8];
/// Visit that ends with a slice too short to keep.
const SHORT_TAIL_VISIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tone {
    Cheerful,
    Calm,
    Worried,
    Neutral,
}

impl Tone {
    fn sentence(self) -> &'static str {
        match self {
            Tone::Cheerful => "Honestly I feel cheerful today, thanks for asking!",
            Tone::Calm => "Things have been calm and steady, I think.",
            Tone::Worried => "I am worried about these results, to be honest.",
            Tone::Neutral => "Let us go over the chart together.",
        }
    }

    fn type1_high(self) -> f64 {
        match self {
            Tone::Cheerful => 0.85,
            Tone::Calm => 0.55,
            Tone::Neutral => 0.3,
            Tone::Worried => 0.15,
        }
    }

    fn type2_present(self) -> f64 {
        match self {
            Tone::Worried => 0.8,
            Tone::Neutral => 0.2,
            Tone::Calm | Tone::Cheerful => 0.08,
        }
    }
}

const PROVIDER_LINES: &[&str] = &[
    "So how have you been feeling since the last visit?",
    "Okay. Any new pain in the back or the knees?",
    "I see here that your blood pressure was a little high.",
    "We can adjust the dose if the side effects continue, right?",
    "Are you still taking the medication every morning?",
    "Good. Let me check your breathing for a moment.",
    "That makes sense; many people notice the same thing.",
    "I would like to order a few more tests next week.",
    "Tell me more about the sleep problems you mentioned.",
    "We talked about walking more. How is that going?",
];

const PATIENT_LINES: &[&str] = &[
    "Mostly fine, but the mornings are still hard for me.",
    "Yes, every day, although sometimes I forget the evening one.",
    "My daughter drives me here, so the timing is tricky.",
    "Not really. The knee is better since I started stretching.",
    "I have been sleeping badly; maybe four hours a night.",
    "The new pills make me a bit dizzy after lunch.",
    "I walk to the store and back, about twenty minutes.",
    "Okay, that sounds reasonable. What should I watch for?",
    "I read something online about it, but I was not sure.",
    "Sure. Should I keep the same diet as before?",
];

/// In-memory form of the fixture.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub turns: Vec<Turn>,
    pub labels: Vec<RawLabel>,
    pub metadata: BTreeMap<String, VisitMetadata>,
    pub tones: BTreeMap<(String, usize), Tone>,
}

pub fn visit_id(i: usize) -> String {
    format!("v{:02}", i + 1)
}

fn pick_tone(rng: &mut ChaCha8Rng, race: PatientRace) -> Tone {
    let weights: [(Tone, f64); 4] = match race {
        PatientRace::NonWhite => [
            (Tone::Cheerful, 0.2),
            (Tone::Calm, 0.2),
            (Tone::Worried, 0.35),
            (Tone::Neutral, 0.25),
        ],
        _ => [
            (Tone::Cheerful, 0.35),
            (Tone::Calm, 0.25),
            (Tone::Worried, 0.15),
            (Tone::Neutral, 0.25),
        ],
    };
    let mut u: f64 = rng.random();
    for (t, w) in weights {
        if u < w {
            return t;
        }
        u -= w;
    }
    Tone::Neutral
}

fn raw_score(rng: &mut ChaCha8Rng, signal_type: SignalType, high: bool) -> f64 {
    let choices: &[f64] = match (signal_type, high) {
        (SignalType::TypeI, true) => &[4.0, 5.0, 5.0, 6.0],
        (SignalType::TypeI, false) => &[1.0, 2.0, 2.0, 3.0],
        (SignalType::TypeII, true) => &[2.0, 3.0, 4.0, 5.0],
        (SignalType::TypeII, false) => &[1.0],
    };
    *choices.choose(rng).expect("non-empty")
}

fn extreme(signal_type: SignalType, high: bool) -> f64 {
    match (signal_type, high) {
        (SignalType::TypeI, true) => 6.0,
        (SignalType::TypeII, true) => 4.0,
        (_, false) => 1.0,
    }
}

/// Builds the synthetic study. The same seed always gives the same study.
pub fn generate(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turns = Vec::new();
    let mut labels = Vec::new();
    let mut metadata = BTreeMap::new();
    let mut tones = BTreeMap::new();
    let tasks = registry();
    // How closely each task follows the slice tone; the rest is coin flips.
    let fidelity: Vec<f64> = (0..tasks.len()).map(|i| 0.45 + 0.5 * ((i * 7) % 11) as f64 / 10.0).collect();

    for v in 0..FIXTURE_VISITS {
        let vid = visit_id(v);
        let race = if NON_WHITE.contains(&v) {
            PatientRace::NonWhite
        } else {
            PatientRace::White
        };
        metadata.insert(
            vid.clone(),
            VisitMetadata {
                visit_id: vid.clone(),
                provider_id: format!("dr{}", v / 2 + 1),
                provider_group: format!("g{}", v / 2 + 1),
                patient_race: race,
            },
        );
        for s in 0..SLICES_PER_VISIT[v] {
            let tone = pick_tone(&mut rng, race);
            tones.insert((vid.clone(), s), tone);
            let base = s as f64 * 180.0;
            let n_turns = rng.random_range(4..=5);
            let tone_at = rng.random_range(0..n_turns);
            let mut t = base + rng.random_range(0.0..10.0);
            for k in 0..n_turns {
                let speaker = if k % 2 == 0 { Speaker::Provider } else { Speaker::Patient };
                let pool = if speaker == Speaker::Provider { PROVIDER_LINES } else { PATIENT_LINES };
                let mut text = pool.choose(&mut rng).expect("non-empty").to_string();
                if k == tone_at {
                    text = format!("{text} {}", tone.sentence());
                }
                let dur = rng.random_range(6.0..25.0);
                turns.push(Turn {
                    visit_id: vid.clone(),
                    speaker,
                    start_s: round2(t),
                    end_s: round2(t + dur),
                    text,
                });
                t += dur + rng.random_range(0.5..4.0);
            }
            for (ti, task) in tasks.iter().enumerate() {
                let forced = match (v, s) {
                    (0, 0) | (1, 1) => Some(true),
                    (0, 1) | (1, 0) => Some(false),
                    _ => None,
                };
                let raw = match forced {
                    Some(high) => extreme(task.signal_type, high),
                    None => {
                        let p_tone = match task.signal_type {
                            SignalType::TypeI => tone.type1_high(),
                            SignalType::TypeII => tone.type2_present(),
                        };
                        let p = fidelity[ti] * p_tone + (1.0 - fidelity[ti]) * 0.5;
                        let high = rng.random::<f64>() < p;
                        raw_score(&mut rng, task.signal_type, high)
                    }
                };
                labels.push(RawLabel {
                    visit_id: vid.clone(),
                    slice_index: s,
                    signal_id: task.signal_id.to_string(),
                    raw_score: raw,
                });
            }
        }
        if v == SHORT_TAIL_VISIT {
            let start = SLICES_PER_VISIT[v] as f64 * 180.0 + 5.0;
            turns.push(Turn {
                visit_id: vid.clone(),
                speaker: Speaker::Provider,
                start_s: start,
                end_s: start + 2.0,
                text: "Okay, see you soon.".into(),
            });
        }
    }
    Fixture {
        turns,
        labels,
        metadata,
        tones,
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn rule(pattern: &str, text: &str) -> MockRule {
    MockRule {
        pattern: pattern.into(),
        response_text: text.into(),
        logprobs: None,
    }
}

fn logit_rule(pattern: &str, lp: &[(&str, f64)]) -> MockRule {
    MockRule {
        pattern: pattern.into(),
        response_text: String::new(),
        logprobs: Some(lp.iter().map(|(k, v)| (k.to_string(), *v)).collect()),
    }
}

/// Rule set for one dialect's mock backend. First match wins. Presence
/// questions (Type II) and intensity questions (Type I) get different rules so
/// that no two configurations answer identically.
pub fn mock_rules(dialect: ModelDialect) -> Vec<MockRule> {
    match dialect {
        ModelDialect::Flan => vec![
            logit_rule("*worried*presence of*Respond only with one word*", &[("yes", -0.5), ("no", -1.1)]),
            rule("*presence of*Respond only with one word*", "no"),
            rule("*cheerful*Respond only with one word*", "yes"),
            rule("*calm*Respond only with one word*", "yes"),
            rule("*Respond only with one word*", "no"),
        ],
        ModelDialect::Gemma => vec![
            rule("*worried*presence of*Start your answer with either Yes or No*", "Yes. The patient sounded worried."),
            rule("*presence of*Start your answer with either Yes or No*", "No, nothing like that came up."),
            rule("*cheerful*Start your answer with either Yes or No*", "Yes, the tone was upbeat."),
            rule("*calm*Start your answer with either Yes or No*", "Hard to tell from such a short exchange."),
            rule("*worried*Start your answer with either Yes or No*", "Yes, there was some tension."),
            rule("*Start your answer with either Yes or No*", "No, it seemed ordinary."),
            rule("*cheerful*Respond only with one word*", "yes"),
            rule("*worried*Respond only with one word*", "yes"),
            logit_rule("*calm*Respond only with one word*", &[("yes", -0.4), ("maybe", -0.9)]),
            rule("*Respond only with one word*", "no"),
        ],
        ModelDialect::Llama => vec![
            rule("*worried*presence of*Return the integer first*", "1\nThe patient voiced concern. The doctor responded to it."),
            rule("*presence of*Return the integer first*", "0\nThe exchange was routine. Nothing stood out."),
            rule("*cheerful*Return the integer first*", "1\nThe exchange sounded upbeat. Both speakers stayed engaged."),
            rule("*Return the integer first*", "0\nThe exchange was routine. Nothing stood out."),
            logit_rule("*worried*Return the integer only.*", &[("1", -0.3), ("0", -1.4)]),
            rule("*cheerful*Return the integer only.*", "1"),
            rule("*calm*Return the integer only.*", "Score: 1"),
            rule("*Return the integer only.*", "0"),
        ],
    }
}

pub const LEXICON_CSV: &str = "category,pattern
affect_pos,cheerful
affect_pos,calm
affect_pos,good
affect_pos,better
affect_pos,thank*
affect_neg,worried
affect_neg,pain
affect_neg,hard
affect_neg,dizzy
affect_neg,badly
you,you
you,your
cogproc,think
cogproc,sure
cogproc,maybe
cogproc,makes
cogproc,know*
";

/// Files written by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub transcripts: PathBuf,
    pub labels: PathBuf,
    pub metadata: PathBuf,
    pub lexicon: PathBuf,
}

pub fn config_toml(seed: u64) -> String {
    let mut out = format!(
        "seed = {seed}\n\n[paths]\ntranscripts = \"transcripts.jsonl\"\nlabels = \"labels.csv\"\nmetadata = \"metadata.csv\"\nlexicon = \"lexicon.csv\"\nrun_dir = \"run\"\n\n[analysis]\nlambda = 0.01\n"
    );
    for d in ModelDialect::ALL {
        out.push_str(&format!(
            "\n[backends.{k}]\nkind = \"mock\"\nrules = \"mock_rules_{k}.json\"\ndefault_text = \"no\"\nmax_in_flight = 4\n",
            k = d.key()
        ));
    }
    out
}

/// Writes the synthetic study and a ready-to-run configuration into `dir`.
pub fn write_fixture(dir: impl AsRef<Path>, seed: u64) -> Result<FixturePaths> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fx = generate(seed);
    let paths = FixturePaths {
        dir: dir.to_path_buf(),
        config: dir.join("thinslice.toml"),
        transcripts: dir.join("transcripts.jsonl"),
        labels: dir.join("labels.csv"),
        metadata: dir.join("metadata.csv"),
        lexicon: dir.join("lexicon.csv"),
    };
    let mut f = fs::File::create(&paths.transcripts).map_err(|e| Error::io(&paths.transcripts, e))?;
    for t in &fx.turns {
        let line = serde_json::to_string(t)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&paths.transcripts, e))?;
    }
    write_labels(&paths.labels, &fx.labels)?;
    write_metadata(&paths.metadata, &fx.metadata)?;
    fs::write(&paths.lexicon, LEXICON_CSV).map_err(|e| Error::io(&paths.lexicon, e))?;
    for d in ModelDialect::ALL {
        let p = dir.join(format!("mock_rules_{}.json", d.key()));
        let body = serde_json::to_string_pretty(&mock_rules(d))?;
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    fs::write(&paths.config, config_toml(seed)).map_err(|e| Error::io(&paths.config, e))?;
    Ok(paths)
}
