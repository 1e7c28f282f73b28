use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CandidateLogprobs, GenerationResponse};
use crate::error::{Error, Result};
use crate::promptkit::CompiledPrompt;

/// One entry of a mock rule file.
///
/// A pattern without `*` matches as a literal substring of the prompt. A
/// pattern containing `*` is anchored at both ends, with `*` matching any
/// run of characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    #[serde(default)]
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<BTreeMap<String, f64>>,
}

pub fn load_mock_rules(path: impl AsRef<Path>) -> Result<Vec<MockRule>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn wildcard_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<usize> = None;
    let mut mark = 0;
    while ti < t.len() {
        if pi < p.len() && p[pi] != b'*' && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == b'*' {
            star = Some(pi);
            pi += 1;
            mark = ti;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

/// Deterministic rule-driven backend: first matching rule wins.
#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<MockRule>,
    default: MockRule,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>, default_text: impl Into<String>) -> Self {
        MockBackend {
            rules,
            default: MockRule {
                pattern: "*".into(),
                response_text: default_text.into(),
                logprobs: None,
            },
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn matching(&self, prompt: &str) -> &MockRule {
        self.rules
            .iter()
            .find(|r| {
                if r.pattern.contains('*') {
                    wildcard_match(&r.pattern, prompt)
                } else {
                    prompt.contains(&r.pattern)
                }
            })
            .unwrap_or(&self.default)
    }
}

fn lookup(map: &BTreeMap<String, f64>, candidate: &str) -> Option<f64> {
    map.iter()
        .filter(|(k, _)| k.trim().eq_ignore_ascii_case(candidate))
        .map(|(_, &v)| v)
        .reduce(f64::max)
}

impl Backend for MockBackend {
    fn generate(&self, prompt: &CompiledPrompt) -> Result<GenerationResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let rule = self.matching(&prompt.full_text);
        let (pos, neg) = &prompt.candidate_tokens;
        let (candidate_logprobs, logprobs_incomplete) = match &rule.logprobs {
            None => (None, false),
            Some(map) => match (lookup(map, pos), lookup(map, neg)) {
                (Some(positive), Some(negative)) => {
                    (Some(CandidateLogprobs { positive, negative }), false)
                }
                _ => (None, true),
            },
        };
        Ok(GenerationResponse {
            text: rule.response_text.clone(),
            candidate_logprobs,
            logprobs_incomplete,
            usage: None,
        })
    }
}
