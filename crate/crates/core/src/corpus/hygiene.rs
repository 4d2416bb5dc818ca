use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::QaPair;
use crate::text::{is_mostly_cjk, question_key};

#[derive(Debug, Error, PartialEq)]
pub enum HygieneError {
    #[error("no benchmark questions supplied for decontamination")]
    EmptyTestset,
    #[error("invalid decontamination config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dedup {
    pub kept: Vec<QaPair>,
    pub dropped: Vec<QaPair>,
}

/// Keep the first pair of each normalized question, in input order.
pub fn dedupe(pairs: Vec<QaPair>) -> Dedup {
    let mut seen = HashSet::new();
    let mut out = Dedup::default();
    for p in pairs {
        if seen.insert(question_key(&p.question)) {
            out.kept.push(p);
        } else {
            out.dropped.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontaminationConfig {
    pub ngram: usize,
    /// Fraction of a benchmark question's n-grams that must reappear in a
    /// corpus question for it to be removed.
    pub threshold: f64,
}

impl Default for DecontaminationConfig {
    fn default() -> Self {
        DecontaminationConfig {
            ngram: 8,
            threshold: 0.8,
        }
    }
}

impl DecontaminationConfig {
    pub fn check(&self) -> Result<(), HygieneError> {
        if self.ngram == 0 {
            return Err(HygieneError::InvalidConfig("ngram must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(HygieneError::InvalidConfig(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminatedPair {
    pub pair: QaPair,
    pub test_index: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decontamination {
    pub kept: Vec<QaPair>,
    pub removed: Vec<ContaminatedPair>,
}

fn tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    if is_mostly_cjk(&lower) {
        lower
            .chars()
            .filter(|c| c.is_alphanumeric())
            .map(String::from)
            .collect()
    } else {
        lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }
}

/// Distinct n-grams of a question: character grams for CJK-dominant text,
/// word grams otherwise. Texts shorter than `n` yield one gram.
pub fn ngrams(text: &str, n: usize) -> HashSet<String> {
    let toks = tokens(text);
    if toks.is_empty() {
        return HashSet::new();
    }
    if toks.len() < n {
        return HashSet::from([toks.join("\u{1}")]);
    }
    toks.windows(n).map(|w| w.join("\u{1}")).collect()
}

/// Remove corpus pairs whose question matches a benchmark question exactly
/// (after normalization) or covers at least `threshold` of its n-grams.
pub fn decontaminate(
    pairs: Vec<QaPair>,
    testsets: &[String],
    cfg: &DecontaminationConfig,
) -> Result<Decontamination, HygieneError> {
    cfg.check()?;
    if testsets.is_empty() {
        return Err(HygieneError::EmptyTestset);
    }
    let mut exact: HashMap<String, usize> = HashMap::new();
    let mut index: HashMap<String, Vec<usize>> = HashMap::new();
    let mut sizes = Vec::with_capacity(testsets.len());
    for (i, t) in testsets.iter().enumerate() {
        exact.entry(question_key(t)).or_insert(i);
        let grams = ngrams(t, cfg.ngram);
        sizes.push(grams.len());
        for g in grams {
            index.entry(g).or_default().push(i);
        }
    }

    let mut out = Decontamination::default();
    for p in pairs {
        if let Some(&i) = exact.get(&question_key(&p.question)) {
            out.removed.push(ContaminatedPair {
                pair: p,
                test_index: i,
                overlap: 1.0,
            });
            continue;
        }
        let mut shared: HashMap<usize, usize> = HashMap::new();
        for g in ngrams(&p.question, cfg.ngram) {
            if let Some(tests) = index.get(&g) {
                for &i in tests {
                    *shared.entry(i).or_default() += 1;
                }
            }
        }
        let best = shared
            .into_iter()
            .map(|(i, c)| (i, c as f64 / sizes[i] as f64))
            .filter(|&(_, r)| r >= cfg.threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((test_index, overlap)) => out.removed.push(ContaminatedPair {
                pair: p,
                test_index,
                overlap,
            }),
            None => out.kept.push(p),
        }
    }
    Ok(out)
}
