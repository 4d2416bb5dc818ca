//! Dataset serialization, read-back, manifests and distribution reports.
//!
//! One JSON object per line, keys always in this order:
//!
//! ```text
//! {"question": ...,
//!  "solution": {"cot": [{"kind": ..., "text": ...}, ...], "answer": ...},
//!  "metadata": {"content", "ability", "complexity", "quality", "language", "task"},
//!  "lineage": {"id", "source", "provenance", "gold_answer", "language"}}
//! ```
//!
//! `lineage` carries the pair identity so a file reads back into the exact
//! samples that were written.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotator::TASK_DOMAINS;
use crate::corpus::{CorpusStats, StatsAccumulator};
use crate::model::{
    duplicate_ids, validate_sample, Ability, CotTrace, Language, MetadataRecord, Provenance,
    QaPair, Sample, Segment, Solution, SCORE_MAX, SCORE_MIN,
};

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("invalid sample {id}: {violations}")]
    InvalidSample { id: String, violations: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no samples to report on")]
    EmptyInput,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmitError + '_ {
    move |source| EmitError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    question: String,
    solution: RecordSolution,
    metadata: RecordMetadata,
    lineage: Lineage,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordSolution {
    cot: Vec<Segment>,
    answer: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMetadata {
    content: String,
    ability: Ability,
    complexity: u8,
    quality: u8,
    language: Language,
    task: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Lineage {
    id: String,
    source: String,
    provenance: Provenance,
    gold_answer: String,
    language: Language,
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Record {
        Record {
            question: s.qa.question.clone(),
            solution: RecordSolution {
                cot: s.solution.trace.segments.clone(),
                answer: s.solution.final_answer.clone(),
            },
            metadata: RecordMetadata {
                content: s.metadata.content.clone(),
                ability: s.metadata.ability,
                complexity: s.metadata.complexity,
                quality: s.metadata.quality,
                language: s.metadata.language,
                task: s.metadata.task_path.clone(),
            },
            lineage: Lineage {
                id: s.qa.id.clone(),
                source: s.qa.source.clone(),
                provenance: s.qa.provenance,
                gold_answer: s.qa.gold_answer.clone(),
                language: s.qa.language,
            },
        }
    }
}

impl From<Record> for Sample {
    fn from(r: Record) -> Sample {
        Sample {
            qa: QaPair {
                id: r.lineage.id,
                question: r.question,
                gold_answer: r.lineage.gold_answer,
                source: r.lineage.source,
                provenance: r.lineage.provenance,
                language: r.lineage.language,
            },
            solution: Solution {
                trace: CotTrace {
                    segments: r.solution.cot,
                },
                final_answer: r.solution.answer,
            },
            metadata: MetadataRecord {
                content: r.metadata.content,
                ability: r.metadata.ability,
                complexity: r.metadata.complexity,
                quality: r.metadata.quality,
                language: r.metadata.language,
                task_path: r.metadata.task,
            },
        }
    }
}

/// Serialized dataset bytes. Fails on the first invalid sample or repeated id.
pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>, EmitError> {
    for s in samples {
        if let Err(v) = validate_sample(s) {
            return Err(EmitError::InvalidSample {
                id: s.qa.id.clone(),
                violations: v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
            });
        }
    }
    if let Some(dup) = duplicate_ids(samples.iter().map(|s| s.qa.id.as_str())).first() {
        return Err(EmitError::InvalidSample {
            id: String::new(),
            violations: dup.to_string(),
        });
    }
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, &Record::from(s)).expect("records serialize");
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `bytes` to `path` through a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EmitError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| EmitError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// Validate every sample, then write the dataset atomically. Nothing is
/// written when any sample is invalid.
pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<Manifest, EmitError> {
    let bytes = encode_dataset(samples)?;
    write_atomic(path, &bytes)?;
    Ok(Manifest {
        count: samples.len(),
        sha256: sha256_hex(&bytes),
    })
}

/// Parse dataset text; blank lines are skipped, line numbers are 1-based.
pub fn decode_dataset(text: &str) -> Result<Vec<Sample>, EmitError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| EmitError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Sample::from(r));
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>, EmitError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    decode_dataset(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskShare {
    pub label: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub total: usize,
    /// Canonical labels first in their fixed order, then any others by name.
    pub task_composition: Vec<TaskShare>,
    /// Every score from 1 to 10, zero-filled.
    pub complexity_histogram: BTreeMap<u8, usize>,
    pub source_stats: CorpusStats,
}

impl Report {
    pub fn share(&self, label: &str) -> Option<&TaskShare> {
        self.task_composition.iter().find(|t| t.label == label)
    }
}

/// Source row a sample counts under. Mined pairs name their parent sample
/// as source, so they are pooled in one row.
pub fn stats_group(qa: &QaPair) -> &str {
    match qa.provenance {
        Provenance::T2q => "T2Q",
        _ => &qa.source,
    }
}

pub fn report(samples: &[Sample], length_fn: &dyn Fn(&str) -> usize) -> Result<Report, EmitError> {
    if samples.is_empty() {
        return Err(EmitError::EmptyInput);
    }
    let mut tasks: BTreeMap<String, usize> = BTreeMap::new();
    let mut hist: BTreeMap<u8, usize> = (SCORE_MIN..=SCORE_MAX).map(|s| (s, 0)).collect();
    let mut acc = StatsAccumulator::default();
    for s in samples {
        let label = s.metadata.task_domain().unwrap_or("").to_string();
        *tasks.entry(label).or_default() += 1;
        *hist.entry(s.metadata.complexity).or_default() += 1;
        acc.add(
            stats_group(&s.qa),
            length_fn(&s.qa.question),
            length_fn(&s.solution.trace.concatenated()),
            length_fn(&s.solution.final_answer),
        );
    }
    let total = samples.len();
    let rank = |l: &str| TASK_DOMAINS.iter().position(|d| *d == l).unwrap_or(TASK_DOMAINS.len());
    let mut task_composition: Vec<TaskShare> = tasks
        .into_iter()
        .map(|(label, count)| TaskShare {
            percent: 100.0 * count as f64 / total as f64,
            label,
            count,
        })
        .collect();
    task_composition.sort_by(|a, b| rank(&a.label).cmp(&rank(&b.label)).then(a.label.cmp(&b.label)));
    Ok(Report {
        total,
        task_composition,
        complexity_histogram: hist,
        source_stats: acc.finish().map_err(|_| EmitError::EmptyInput)?,
    })
}

/// Plain-text rendering of a report.
pub fn render_report(r: &Report) -> String {
    let mut s = format!("samples: {}\n\ntask composition\n", r.total);
    for t in &r.task_composition {
        s += &format!("  {:<28} {:>7} {:>7.2}%\n", t.label, t.count, t.percent);
    }
    s += "\ncomplexity\n";
    for (score, n) in &r.complexity_histogram {
        s += &format!("  {score:>2} {n:>7}\n");
    }
    s += &format!(
        "\n  {:<20} {:>9} {:>9} {:>9} {:>8} {:>8}\n",
        "source", "N_Q", "N_R", "N_A", "count", "share"
    );
    for row in &r.source_stats.rows {
        s += &format!(
            "  {:<20} {:>9.2} {:>9.2} {:>9.2} {:>8} {:>7.2}%\n",
            row.source,
            row.avg_question_len,
            row.avg_reasoning_len,
            row.avg_answer_len,
            row.sample_count,
            100.0 * row.proportion
        );
    }
    s
}
