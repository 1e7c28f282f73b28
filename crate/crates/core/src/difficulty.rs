//! Lexicon-based text features and hard/easy slice comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{MeanSd, SliceKey};
use crate::error::{Error, Result};
use crate::stats::{bonferroni, mann_whitney_u, significance_stars, MwMode};

pub const DEFAULT_QUANTILE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Word(String),
    Stem(String),
}

impl Pattern {
    pub fn parse(raw: &str) -> Result<Pattern> {
        let p = raw.trim();
        if p.is_empty() || p != p.to_lowercase() {
            return Err(Error::validation("lexicon", format!("pattern `{raw}` must be non-empty and lowercase")));
        }
        match p.strip_suffix('*') {
            Some(stem) if !stem.is_empty() && !stem.contains('*') => Ok(Pattern::Stem(stem.to_string())),
            None if !p.contains('*') => Ok(Pattern::Word(p.to_string())),
            _ => Err(Error::validation("lexicon", format!("bad wildcard in `{raw}`"))),
        }
    }

    pub fn matches(&self, token: &str) -> bool {
        match self {
            Pattern::Word(w) => token == w,
            Pattern::Stem(s) => token.starts_with(s.as_str()),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pattern::Word(w) => f.write_str(w),
            Pattern::Stem(s) => write!(f, "{s}*"),
        }
    }
}

/// Word categories in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    pub categories: Vec<(String, Vec<Pattern>)>,
}

#[derive(Deserialize)]
struct LexiconRow {
    category: String,
    pattern: String,
}

impl Lexicon {
    pub fn add(&mut self, category: &str, pattern: &str) -> Result<()> {
        let pat = Pattern::parse(pattern)?;
        match self.categories.iter_mut().find(|(c, _)| c == category) {
            Some((_, pats)) => pats.push(pat),
            None => self.categories.push((category.to_string(), vec![pat])),
        }
        Ok(())
    }

    /// Reads a CSV with header `category,pattern`.
    pub fn load(path: impl AsRef<Path>) -> Result<Lexicon> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let headers = reader.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["category", "pattern"] {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "expected header `category,pattern`".into(),
            });
        }
        let mut lex = Lexicon::default();
        for (i, row) in reader.deserialize::<LexiconRow>().enumerate() {
            let row = row?;
            let category = row.category.trim();
            if category.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: "empty category".into(),
                });
            }
            lex.add(category, &row.pattern).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })?;
        }
        if lex.categories.is_empty() {
            return Err(Error::validation("lexicon", "no categories"));
        }
        Ok(lex)
    }
}

/// Lowercased alphabetic runs; an apostrophe between letters stays inside
/// the token ("don't").
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphabetic() {
            cur.extend(c.to_lowercase());
        } else if (c == '\'' || c == '’')
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphabetic())
        {
            cur.push('\'');
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn is_internal_apostrophe(chars: &[char], i: usize) -> bool {
    i > 0
        && chars[i - 1].is_alphabetic()
        && chars.get(i + 1).is_some_and(|n| n.is_alphabetic())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureVector {
    pub tokens: usize,
    /// Percentage of tokens matched by each category, in lexicon order.
    pub categories: Vec<(String, f64)>,
    pub words_per_sentence: f64,
    /// Punctuation marks per 100 tokens.
    pub all_punc: f64,
    /// Periods per 100 tokens.
    pub period: f64,
}

impl FeatureVector {
    /// Feature names and values in report order.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("WPS".to_string(), self.words_per_sentence),
            ("AllPunc".to_string(), self.all_punc),
            ("Period".to_string(), self.period),
        ];
        out.extend(self.categories.iter().cloned());
        out
    }
}

pub fn extract_features(text: &str, lexicon: &Lexicon) -> Result<FeatureVector> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::DegenerateText("no word tokens".into()));
    }
    let n = tokens.len() as f64;
    let categories = lexicon
        .categories
        .iter()
        .map(|(name, pats)| {
            let hits = tokens.iter().filter(|t| pats.iter().any(|p| p.matches(t))).count();
            (name.clone(), 100.0 * hits as f64 / n)
        })
        .collect();
    let sentences = text
        .split(['.', '!', '?'])
        .filter(|s| s.chars().any(char::is_alphabetic))
        .count()
        .max(1);
    let chars: Vec<char> = text.chars().collect();
    let punct = chars
        .iter()
        .enumerate()
        .filter(|&(i, c)| (c.is_ascii_punctuation() || *c == '’') && !((*c == '\'' || *c == '’') && is_internal_apostrophe(&chars, i)))
        .count();
    let periods = chars.iter().filter(|&&c| c == '.').count();
    Ok(FeatureVector {
        tokens: tokens.len(),
        categories,
        words_per_sentence: n / sentences as f64,
        all_punc: 100.0 * punct as f64 / n,
        period: 100.0 * periods as f64 / n,
    })
}

// ---------------------------------------------------------------------------
// Quantile split

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileSplit {
    pub q: f64,
    pub hard_threshold: f64,
    pub easy_threshold: f64,
    pub hard: Vec<SliceKey>,
    pub easy: Vec<SliceKey>,
}

/// Hard: count at or below the nearest-rank `q` quantile. Easy: count at or
/// above the nearest-rank value `q` from the top.
pub fn split_quantiles(counts: &[(SliceKey, f64)], q: f64) -> Result<QuantileSplit> {
    if !(q > 0.0 && q < 0.5) {
        return Err(Error::Config(format!("quantile must be in (0, 0.5), got {q}")));
    }
    let n = counts.len();
    if n < 2 {
        return Err(Error::QuantileSplit(format!("{n} slices")));
    }
    let mut sorted: Vec<f64> = counts.iter().map(|(_, c)| *c).collect();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * n as f64).ceil() as usize).max(1);
    let hard_threshold = sorted[rank - 1];
    let easy_threshold = sorted[n - rank];
    if hard_threshold >= easy_threshold {
        return Err(Error::QuantileSplit(format!(
            "lower threshold {hard_threshold} is not below upper threshold {easy_threshold}"
        )));
    }
    let pick = |f: &dyn Fn(f64) -> bool| -> Vec<SliceKey> {
        let mut keys: Vec<SliceKey> = counts.iter().filter(|(_, c)| f(*c)).map(|(k, _)| k.clone()).collect();
        keys.sort();
        keys
    };
    Ok(QuantileSplit {
        q,
        hard_threshold,
        easy_threshold,
        hard: pick(&|c| c <= hard_threshold),
        easy: pick(&|c| c >= easy_threshold),
    })
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureComparison {
    pub feature: String,
    pub hard: MeanSd,
    pub easy: MeanSd,
    /// U statistic of the hard group.
    pub u: f64,
    pub p_value: f64,
    pub corrected_p: f64,
    pub stars: &'static str,
}

pub fn compare_groups(
    features: &BTreeMap<SliceKey, FeatureVector>,
    hard: &[SliceKey],
    easy: &[SliceKey],
) -> Result<Vec<FeatureComparison>> {
    let collect = |keys: &[SliceKey]| -> Result<Vec<Vec<(String, f64)>>> {
        keys.iter()
            .map(|k| {
                features
                    .get(k)
                    .map(FeatureVector::named_values)
                    .ok_or_else(|| Error::validation("difficulty", format!("no features for slice {k}")))
            })
            .collect()
    };
    let h = collect(hard)?;
    let e = collect(easy)?;
    if h.is_empty() || e.is_empty() {
        return Err(Error::DegenerateSample("hard and easy groups must be non-empty".into()));
    }
    let names: Vec<String> = h[0].iter().map(|(n, _)| n.clone()).collect();
    let mut rows = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let hv: Vec<f64> = h.iter().map(|r| r[j].1).collect();
        let ev: Vec<f64> = e.iter().map(|r| r[j].1).collect();
        let mw = mann_whitney_u(&hv, &ev, MwMode::Auto)?;
        rows.push(FeatureComparison {
            feature: name.clone(),
            hard: MeanSd::of(&hv).expect("non-empty"),
            easy: MeanSd::of(&ev).expect("non-empty"),
            u: mw.u_x,
            p_value: mw.result.p_value,
            corrected_p: 1.0,
            stars: "",
        });
    }
    let raw: Vec<f64> = rows.iter().map(|r| r.p_value).collect();
    for (row, p) in rows.iter_mut().zip(bonferroni(&raw, None)?) {
        row.corrected_p = p;
        row.stars = significance_stars(p);
    }
    Ok(rows)
}
