//! Model backends, answer parsing and the resumable experiment runner.

mod http;
mod journal;
mod mock;
mod runner;

use serde::{Deserialize, Serialize};

use crate::promptkit::{CompiledPrompt, LeadingToken, ParsePlan};

pub use http::{BackendConfig, HttpBackend, RetryPolicy};
pub use journal::{latest_by_key, read_journal, write_sorted_predictions, Journal, JOURNAL_FILE, PREDICTIONS_FILE};
pub use mock::{load_mock_rules, wildcard_match, MockBackend, MockRule};
pub use runner::{run_experiment, BackendSet, RunOptions, RunSummary};

/// Log-probabilities of the two answer candidates at the first generated
/// position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateLogprobs {
    pub positive: f64,
    pub negative: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationResponse {
    pub text: String,
    pub candidate_logprobs: Option<CandidateLogprobs>,
    /// Log-probabilities were returned but at least one candidate fell
    /// outside the returned top-k.
    pub logprobs_incomplete: bool,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Network failure or timeout after all retries.
    Transport(String),
    /// Non-success HTTP status.
    Status { code: u16, body_excerpt: String },
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendError::Transport(m) => write!(f, "transport error: {m}"),
            BackendError::Status { code, body_excerpt } => {
                write!(f, "backend returned status {code}: {body_excerpt}")
            }
        }
    }
}

impl std::error::Error for BackendError {}

/// A text-generation service under deterministic decoding.
pub trait Backend: Send + Sync {
    fn generate(&self, prompt: &CompiledPrompt) -> Result<GenerationResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Direct,
    LogitFallback,
    Abstain,
    TransportError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainReason {
    /// No leading answer token and no log-probabilities.
    Unparseable,
    /// Log-probabilities returned, but a candidate was missing from top-k.
    CandidatesOutsideTopK,
    /// The prompt could not be compiled (e.g. no few-shot example).
    PromptUnavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub prediction: Option<u8>,
    pub status: ParseStatus,
    pub abstain_reason: Option<AbstainReason>,
}

fn leading_yes_no(text: &str) -> Option<u8> {
    let word: String = text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    match word.to_lowercase().as_str() {
        "yes" => Some(1),
        "no" => Some(0),
        _ => None,
    }
}

fn leading_integer(text: &str) -> Option<u8> {
    let digits: String = text
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    match digits.as_str() {
        "1" => Some(1),
        "0" => Some(0),
        _ => None,
    }
}

/// Turns a response into a binary prediction. Never fails: unusable output
/// becomes an abstention.
pub fn parse_prediction(response: &GenerationResponse, plan: &ParsePlan) -> ParsedAnswer {
    let direct = match plan.leading {
        LeadingToken::LeadingYesNo => leading_yes_no(&response.text),
        LeadingToken::LeadingInteger => leading_integer(&response.text),
    };
    if let Some(p) = direct {
        return ParsedAnswer {
            prediction: Some(p),
            status: ParseStatus::Direct,
            abstain_reason: None,
        };
    }
    if let Some(lp) = response.candidate_logprobs {
        return ParsedAnswer {
            prediction: Some(u8::from(lp.positive > lp.negative)),
            status: ParseStatus::LogitFallback,
            abstain_reason: None,
        };
    }
    ParsedAnswer {
        prediction: None,
        status: ParseStatus::Abstain,
        abstain_reason: Some(if response.logprobs_incomplete {
            AbstainReason::CandidatesOutsideTopK
        } else {
            AbstainReason::Unparseable
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PredictionKey {
    pub visit_id: String,
    pub slice_index: usize,
    pub signal_id: String,
    pub config_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub visit_id: String,
    pub slice_index: usize,
    pub signal_id: String,
    pub config_id: String,
    pub prediction: Option<u8>,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstain_reason: Option<AbstainReason>,
    pub raw_text: String,
    pub positive_logprob: Option<f64>,
    pub negative_logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

impl PredictionRecord {
    pub fn key(&self) -> PredictionKey {
        PredictionKey {
            visit_id: self.visit_id.clone(),
            slice_index: self.slice_index,
            signal_id: self.signal_id.clone(),
            config_id: self.config_id.clone(),
        }
    }

    pub fn is_answered(&self) -> bool {
        matches!(
            self.parse_status,
            ParseStatus::Direct | ParseStatus::LogitFallback
        )
    }

    fn sort_tuple(&self) -> (&str, usize, &str, &str) {
        (&self.visit_id, self.slice_index, &self.signal_id, &self.config_id)
    }
}

pub fn sort_records(records: &mut [PredictionRecord]) {
    records.sort_by(|a, b| a.sort_tuple().cmp(&b.sort_tuple()));
}

#[cfg(test)]
mod tests {
    use super::*;

    const YES_NO: ParsePlan = ParsePlan {
        leading: LeadingToken::LeadingYesNo,
        reasoning_expected: false,
    };
    const INTEGER: ParsePlan = ParsePlan {
        leading: LeadingToken::LeadingInteger,
        reasoning_expected: true,
    };

    fn resp(text: &str, lp: Option<(f64, f64)>) -> GenerationResponse {
        GenerationResponse {
            text: text.into(),
            candidate_logprobs: lp.map(|(positive, negative)| CandidateLogprobs { positive, negative }),
            ..Default::default()
        }
    }

    #[test]
    fn direct_answers() {
        let p = parse_prediction(&resp("Yes, the doctor showed...", None), &YES_NO);
        assert_eq!((p.prediction, p.status), (Some(1), ParseStatus::Direct));
        let p = parse_prediction(&resp("  no.", None), &YES_NO);
        assert_eq!((p.prediction, p.status), (Some(0), ParseStatus::Direct));
        let p = parse_prediction(&resp("1. The patient sounded tense because...", None), &INTEGER);
        assert_eq!((p.prediction, p.status), (Some(1), ParseStatus::Direct));
        let p = parse_prediction(&resp("0", None), &INTEGER);
        assert_eq!(p.prediction, Some(0));
    }

    #[test]
    fn logit_fallback() {
        let p = parse_prediction(&resp("The transcript shows a routine visit.", Some((-1.9, -0.2))), &YES_NO);
        assert_eq!((p.prediction, p.status), (Some(0), ParseStatus::LogitFallback));
        let p = parse_prediction(&resp("", Some((-0.1, -2.5))), &INTEGER);
        assert_eq!((p.prediction, p.status), (Some(1), ParseStatus::LogitFallback));
        // "Yesterday" is not "yes"; "10" is not a 0/1 answer.
        let p = parse_prediction(&resp("Yesterday", None), &YES_NO);
        assert_eq!(p.status, ParseStatus::Abstain);
        let p = parse_prediction(&resp("10", None), &INTEGER);
        assert_eq!(p.abstain_reason, Some(AbstainReason::Unparseable));
    }

    #[test]
    fn incomplete_logprobs_abstain_distinctly() {
        let r = GenerationResponse {
            text: "Well".into(),
            logprobs_incomplete: true,
            ..Default::default()
        };
        let p = parse_prediction(&r, &YES_NO);
        assert_eq!(p.status, ParseStatus::Abstain);
        assert_eq!(p.abstain_reason, Some(AbstainReason::CandidatesOutsideTopK));
    }

    proptest::proptest! {
        #[test]
        fn parse_is_total_and_fallback_is_argmax(text in ".{0,40}", pos in -20.0f64..0.0, neg in -20.0f64..0.0, with_lp: bool) {
            let r = resp(&text, with_lp.then_some((pos, neg)));
            for plan in [YES_NO, INTEGER] {
                let p = parse_prediction(&r, &plan);
                proptest::prop_assert_eq!(p.prediction.is_some(), matches!(p.status, ParseStatus::Direct | ParseStatus::LogitFallback));
                if p.status == ParseStatus::LogitFallback {
                    proptest::prop_assert_eq!(p.prediction, Some(u8::from(pos > neg)));
                }
            }
        }
    }
}
