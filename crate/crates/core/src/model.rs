//! Shared data model for every pipeline stage, plus schema validation.
//!
//! All types are plain immutable values once built; they are `Send + Sync`
//! and can be shared freely between concurrent workers. Validation reports
//! violations as data instead of failing, so callers decide what to do with
//! a malformed item.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::text::normalize_whitespace;

/// Samples scoring below this quality are never admitted to a dataset.
pub const ADMISSION_QUALITY: u8 = 8;

pub const SCORE_MIN: u8 = 1;
pub const SCORE_MAX: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Provenance {
    Seed,
    Q2a,
    A2q,
    T2q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Zh,
    En,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::Zh => "zh",
            Language::En => "en",
        }
    }

    /// Strict parse of a language code. Unknown codes are rejected.
    pub fn from_code(code: &str) -> Option<Language> {
        match code.trim().to_ascii_lowercase().as_str() {
            "zh" => Some(Language::Zh),
            "en" => Some(Language::En),
            _ => None,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A question with its gold answer and lineage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    pub source: String,
    pub provenance: Provenance,
    pub language: Language,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Original,
    Reflection,
    Rewrite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
}

/// Ordered reasoning segments. A single ORIGINAL segment for sampled
/// traces; ORIGINAL followed by alternating REFLECTION/REWRITE pairs for
/// self-corrected traces.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CotTrace {
    pub segments: Vec<Segment>,
}

impl CotTrace {
    pub fn original(text: impl Into<String>) -> Self {
        CotTrace {
            segments: vec![Segment {
                kind: SegmentKind::Original,
                text: text.into(),
            }],
        }
    }

    pub fn push(&mut self, kind: SegmentKind, text: impl Into<String>) {
        self.segments.push(Segment {
            kind,
            text: text.into(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn kinds(&self) -> Vec<SegmentKind> {
        self.segments.iter().map(|s| s.kind).collect()
    }

    pub fn last_kind(&self) -> Option<SegmentKind> {
        self.segments.last().map(|s| s.kind)
    }

    /// Segment texts concatenated with no separator.
    pub fn concatenated(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    /// Segment texts joined by blank lines, for feeding back into prompts.
    pub fn rendered(&self) -> String {
        self.segments
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Violations of the alternation and non-empty-text rules.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.text.trim().is_empty() {
                out.push(Violation::EmptySegment { index: i });
            }
        }
        if self.segments.len() > 1 {
            for (i, seg) in self.segments.iter().enumerate() {
                let expected = match i {
                    0 => SegmentKind::Original,
                    i if i % 2 == 1 => SegmentKind::Reflection,
                    _ => SegmentKind::Rewrite,
                };
                if seg.kind != expected {
                    out.push(Violation::AlternationBroken { index: i });
                    break;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solution {
    pub trace: CotTrace,
    pub final_answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ability {
    Language,
    Reasoning,
    Knowledge,
    Mathematics,
    Code,
    InstructionFollowing,
    Agents,
}

impl Ability {
    pub const ALL: [Ability; 7] = [
        Ability::Language,
        Ability::Reasoning,
        Ability::Knowledge,
        Ability::Mathematics,
        Ability::Code,
        Ability::InstructionFollowing,
        Ability::Agents,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ability::Language => "language",
            Ability::Reasoning => "reasoning",
            Ability::Knowledge => "knowledge",
            Ability::Mathematics => "mathematics",
            Ability::Code => "code",
            Ability::InstructionFollowing => "instruction_following",
            Ability::Agents => "agents",
        }
    }

    /// Accepts the snake_case name, tolerating spaces/hyphens and case.
    pub fn parse(s: &str) -> Option<Ability> {
        let key = s.trim().to_lowercase().replace([' ', '-'], "_");
        Ability::ALL.into_iter().find(|a| a.as_str() == key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub content: String,
    pub ability: Ability,
    pub complexity: u8,
    pub quality: u8,
    pub language: Language,
    pub task_path: Vec<String>,
}

impl MetadataRecord {
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.content.trim().is_empty() {
            out.push(Violation::EmptyField("metadata.content"));
        }
        if !(SCORE_MIN..=SCORE_MAX).contains(&self.complexity) {
            out.push(Violation::ScoreOutOfRange {
                field: "complexity",
                value: self.complexity,
            });
        }
        if !(SCORE_MIN..=SCORE_MAX).contains(&self.quality) {
            out.push(Violation::ScoreOutOfRange {
                field: "quality",
                value: self.quality,
            });
        }
        if self.task_path.is_empty() {
            out.push(Violation::EmptyTaskPath);
        }
        for (i, label) in self.task_path.iter().enumerate() {
            if label.trim().is_empty() {
                out.push(Violation::EmptyTaskLabel { index: i });
            }
        }
        out
    }

    /// Level-1 task label, if any.
    pub fn task_domain(&self) -> Option<&str> {
        self.task_path.first().map(String::as_str)
    }
}

/// A QA pair with its solution, before metadata annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnannotatedSample {
    pub qa: QaPair,
    pub solution: Solution,
}

impl UnannotatedSample {
    pub fn annotate(self, metadata: MetadataRecord) -> Sample {
        Sample {
            qa: self.qa,
            solution: self.solution,
            metadata,
        }
    }
}

/// The unit of the emitted dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub qa: QaPair,
    pub solution: Solution,
    pub metadata: MetadataRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    EmptyField(&'static str),
    EmptySegment { index: usize },
    EmptyTrace,
    AlternationBroken { index: usize },
    ScoreOutOfRange { field: &'static str, value: u8 },
    EmptyTaskPath,
    EmptyTaskLabel { index: usize },
    BelowAdmissionQuality { quality: u8 },
    DuplicateId(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyField(name) => write!(f, "{name} is empty"),
            Violation::EmptySegment { index } => write!(f, "trace segment {index} is empty"),
            Violation::EmptyTrace => f.write_str("trace has no segments"),
            Violation::AlternationBroken { index } => {
                write!(f, "alternation broken at index {index}")
            }
            Violation::ScoreOutOfRange { field, value } => {
                write!(f, "{field} {value} outside [{SCORE_MIN},{SCORE_MAX}]")
            }
            Violation::EmptyTaskPath => f.write_str("task path is empty"),
            Violation::EmptyTaskLabel { index } => write!(f, "task label {index} is empty"),
            Violation::BelowAdmissionQuality { quality } => write!(
                f,
                "quality below admission threshold {ADMISSION_QUALITY} (got {quality})"
            ),
            Violation::DuplicateId(id) => write!(f, "duplicate id {id}"),
        }
    }
}

pub fn qa_violations(qa: &QaPair) -> Vec<Violation> {
    let mut out = Vec::new();
    if qa.id.trim().is_empty() {
        out.push(Violation::EmptyField("id"));
    }
    if normalize_whitespace(&qa.question).is_empty() {
        out.push(Violation::EmptyField("question"));
    }
    if normalize_whitespace(&qa.gold_answer).is_empty() {
        out.push(Violation::EmptyField("gold_answer"));
    }
    out
}

pub fn solution_violations(solution: &Solution) -> Vec<Violation> {
    let mut out = Vec::new();
    if solution.trace.is_empty() {
        out.push(Violation::EmptyTrace);
    }
    out.extend(solution.trace.violations());
    if solution.final_answer.trim().is_empty() {
        out.push(Violation::EmptyField("final_answer"));
    }
    out
}

/// Every invariant violation of a dataset sample, including the admission
/// quality rule. `Ok(())` iff the sample may be emitted.
pub fn validate_sample(s: &Sample) -> Result<(), Vec<Violation>> {
    let mut out = qa_violations(&s.qa);
    out.extend(solution_violations(&s.solution));
    out.extend(s.metadata.violations());
    if s.metadata.quality < ADMISSION_QUALITY {
        out.push(Violation::BelowAdmissionQuality {
            quality: s.metadata.quality,
        });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Ids that appear more than once, in order of their second appearance.
pub fn duplicate_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Vec<Violation> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in ids {
        if !seen.insert(id) {
            out.push(Violation::DuplicateId(id.to_string()));
        }
    }
    out
}
