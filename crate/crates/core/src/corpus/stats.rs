use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Sample;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("no samples to summarize")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub source: String,
    pub avg_question_len: f64,
    pub avg_reasoning_len: f64,
    pub avg_answer_len: f64,
    pub sample_count: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// One row per source, in order of first appearance.
    pub rows: Vec<SourceStats>,
    pub total: usize,
}

impl CorpusStats {
    pub fn row(&self, source: &str) -> Option<&SourceStats> {
        self.rows.iter().find(|r| r.source == source)
    }
}

#[derive(Default)]
struct Sums {
    question: u128,
    reasoning: u128,
    answer: u128,
    count: usize,
}

/// Incremental form of [`corpus_stats`], fed with already-measured lengths.
#[derive(Default)]
pub struct StatsAccumulator {
    order: Vec<String>,
    sums: std::collections::HashMap<String, Sums>,
}

impl StatsAccumulator {
    pub fn add(&mut self, source: &str, question_len: usize, reasoning_len: usize, answer_len: usize) {
        let entry = self.sums.entry(source.to_string()).or_insert_with(|| {
            self.order.push(source.to_string());
            Sums::default()
        });
        entry.question += question_len as u128;
        entry.reasoning += reasoning_len as u128;
        entry.answer += answer_len as u128;
        entry.count += 1;
    }

    pub fn finish(self) -> Result<CorpusStats, StatsError> {
        let total: usize = self.sums.values().map(|s| s.count).sum();
        if total == 0 {
            return Err(StatsError::EmptyInput);
        }
        let rows = self
            .order
            .iter()
            .map(|source| {
                let s = &self.sums[source];
                let n = s.count as f64;
                SourceStats {
                    source: source.clone(),
                    avg_question_len: s.question as f64 / n,
                    avg_reasoning_len: s.reasoning as f64 / n,
                    avg_answer_len: s.answer as f64 / n,
                    sample_count: s.count,
                    proportion: n / total as f64,
                }
            })
            .collect();
        Ok(CorpusStats { rows, total })
    }
}

/// Per-source mean lengths of question, concatenated trace and final answer.
pub fn corpus_stats(
    samples: &[Sample],
    length_fn: &dyn Fn(&str) -> usize,
) -> Result<CorpusStats, StatsError> {
    let mut acc = StatsAccumulator::default();
    for s in samples {
        acc.add(
            &s.qa.source,
            length_fn(&s.qa.question),
            length_fn(&s.solution.trace.concatenated()),
            length_fn(&s.solution.final_answer),
        );
    }
    acc.finish()
}
