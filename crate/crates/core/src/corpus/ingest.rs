use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Language, Provenance, QaPair};
use crate::text::{is_mostly_cjk, normalize_whitespace};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read source {path}: {cause}")]
    UnreadableSource { path: String, cause: String },
    #[error("source {path}: {cause}")]
    UnknownFormat { path: String, cause: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Csv,
    Tsv,
    Jsonl,
}

impl SourceFormat {
    pub fn parse(s: &str) -> Option<SourceFormat> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Some(SourceFormat::Csv),
            "tsv" => Some(SourceFormat::Tsv),
            "jsonl" | "ndjson" | "json_lines" => Some(SourceFormat::Jsonl),
            _ => None,
        }
    }
}

fn default_question() -> String {
    "question".into()
}

fn default_answer() -> String {
    "answer".into()
}

/// Where a seed corpus lives and how its columns map onto QA pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDescriptor {
    pub name: String,
    pub path: PathBuf,
    pub format: String,
    #[serde(default = "default_question")]
    pub question_column: String,
    #[serde(default = "default_answer")]
    pub answer_column: String,
    #[serde(default)]
    pub language_column: Option<String>,
    /// Language for every row when no column is mapped. Detected per row
    /// when both are absent.
    #[serde(default)]
    pub language: Option<Language>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub source: String,
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestOutcome {
    pub pairs: Vec<QaPair>,
    pub dropped: Vec<DropRecord>,
}

impl IngestOutcome {
    pub fn rows_read(&self) -> usize {
        self.pairs.len() + self.dropped.len()
    }
}

struct RawRow {
    question: String,
    answer: String,
    language: Option<String>,
}

/// Read one seed file into SEED-provenance pairs with ids `<name>:<n>`.
/// Rows with an empty question or answer are dropped and recorded.
pub fn ingest(src: &SourceDescriptor) -> Result<IngestOutcome, IngestError> {
    let format = SourceFormat::parse(&src.format).ok_or_else(|| IngestError::UnknownFormat {
        path: src.path.display().to_string(),
        cause: format!("unknown format `{}`", src.format),
    })?;
    let file = File::open(&src.path).map_err(|e| IngestError::UnreadableSource {
        path: src.path.display().to_string(),
        cause: e.to_string(),
    })?;
    let rows = match format {
        SourceFormat::Csv => read_delimited(src, file, b',')?,
        SourceFormat::Tsv => read_delimited(src, file, b'\t')?,
        SourceFormat::Jsonl => read_jsonl(src, file)?,
    };

    let mut out = IngestOutcome::default();
    for (i, row) in rows.into_iter().enumerate() {
        let row_no = i + 1;
        let drop = |reason: &str| DropRecord {
            source: src.name.clone(),
            row: row_no,
            reason: reason.to_string(),
        };
        let row = match row {
            Ok(r) => r,
            Err(reason) => {
                out.dropped.push(drop(&reason));
                continue;
            }
        };
        if normalize_whitespace(&row.question).is_empty() {
            out.dropped.push(drop("empty question"));
            continue;
        }
        if normalize_whitespace(&row.answer).is_empty() {
            out.dropped.push(drop("empty answer"));
            continue;
        }
        let language = match (&row.language, src.language) {
            (Some(code), _) if !code.trim().is_empty() => match Language::from_code(code) {
                Some(l) => l,
                None => {
                    out.dropped.push(drop(&format!("unknown language `{code}`")));
                    continue;
                }
            },
            (_, Some(l)) => l,
            _ => detect_language(&row.question),
        };
        let id = format!("{}:{}", src.name, out.pairs.len());
        out.pairs.push(QaPair {
            id,
            question: row.question.trim().to_string(),
            gold_answer: row.answer.trim().to_string(),
            source: src.name.clone(),
            provenance: Provenance::Seed,
            language,
        });
    }
    Ok(out)
}

/// Script-based language guess: Chinese when CJK characters dominate.
pub fn detect_language(text: &str) -> Language {
    if is_mostly_cjk(text) {
        Language::Zh
    } else {
        Language::En
    }
}

fn read_delimited(
    src: &SourceDescriptor,
    file: File,
    delim: u8,
) -> Result<Vec<Result<RawRow, String>>, IngestError> {
    let path = src.path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .flexible(true)
        .from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::UnknownFormat {
            path: path.clone(),
            cause: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::UnknownFormat {
                path: path.clone(),
                cause: format!("missing column `{name}`"),
            })
    };
    let q = col(&src.question_column)?;
    let a = col(&src.answer_column)?;
    let l = src.language_column.as_deref().map(col).transpose()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(match rec {
            Ok(r) => Ok(RawRow {
                question: r.get(q).unwrap_or_default().to_string(),
                answer: r.get(a).unwrap_or_default().to_string(),
                language: l.and_then(|l| r.get(l)).map(str::to_string),
            }),
            Err(e) => Err(format!("unparseable row: {e}")),
        });
    }
    Ok(rows)
}

fn field_text(v: Option<&Value>) -> String {
    match v {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

fn read_jsonl(
    src: &SourceDescriptor,
    file: File,
) -> Result<Vec<Result<RawRow, String>>, IngestError> {
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| IngestError::UnreadableSource {
            path: src.path.display().to_string(),
            cause: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(obj)) => Ok(RawRow {
                question: field_text(obj.get(&src.question_column)),
                answer: field_text(obj.get(&src.answer_column)),
                language: src
                    .language_column
                    .as_ref()
                    .map(|c| field_text(obj.get(c))),
            }),
            Ok(_) => Err("row is not a JSON object".to_string()),
            Err(e) => Err(format!("unparseable row: {e}")),
        });
    }
    Ok(rows)
}

/// Benchmark questions for decontamination: a `.jsonl` file with a
/// `question` field per line, or plain text with one question per line.
pub fn load_testset(path: &Path) -> Result<Vec<String>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::UnreadableSource {
        path: path.display().to_string(),
        cause: e.to_string(),
    })?;
    let is_jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "ndjson")
    );
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if is_jsonl {
            let v: Value = serde_json::from_str(line).map_err(|e| IngestError::UnknownFormat {
                path: path.display().to_string(),
                cause: format!("line {}: {e}", i + 1),
            })?;
            let q = field_text(v.get("question"));
            if !q.trim().is_empty() {
                out.push(q);
            }
        } else {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(path: &Path, format: &str) -> SourceDescriptor {
        SourceDescriptor {
            name: "fin".into(),
            path: path.to_path_buf(),
            format: format.into(),
            question_column: "question".into(),
            answer_column: "answer".into(),
            language_column: None,
            language: None,
        }
    }

    #[test]
    fn three_rows_three_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "question,answer\nq1,a1\nq2,a2\n\"q3, with comma\",a3\n").unwrap();
        let out = ingest(&desc(&p, "csv")).unwrap();
        let ids: Vec<_> = out.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["fin:0", "fin:1", "fin:2"]);
        assert!(out.dropped.is_empty());
        assert!(out.pairs.iter().all(|p| p.provenance == Provenance::Seed));
        assert_eq!(out.pairs[2].question, "q3, with comma");
    }

    #[test]
    fn blank_answer_row_is_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        std::fs::write(
            &p,
            concat!(
                "{\"question\":\"q1\",\"answer\":\"a1\"}\n",
                "{\"question\":\"q2\",\"answer\":\"a2\"}\n",
                "{\"question\":\"q3\",\"answer\":\"   \"}\n",
                "{\"question\":\"q4\",\"answer\":42}\n",
                "{\"question\":\"q5\",\"answer\":\"a5\"}\n",
            ),
        )
        .unwrap();
        let out = ingest(&desc(&p, "jsonl")).unwrap();
        assert_eq!(out.pairs.len(), 4);
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].row, 3);
        assert_eq!(out.pairs[2].gold_answer, "42");
        assert_eq!(out.pairs[3].id, "fin:3");
        assert_eq!(out.rows_read(), 5);
    }

    #[test]
    fn missing_file_is_unreadable() {
        let err = ingest(&desc(Path::new("/no/such/file.csv"), "csv")).unwrap_err();
        assert!(matches!(err, IngestError::UnreadableSource { .. }));
    }

    #[test]
    fn unknown_format_and_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "q,a\nx,y\n").unwrap();
        assert!(matches!(ingest(&desc(&p, "parquet")), Err(IngestError::UnknownFormat { .. })));
        assert!(matches!(ingest(&desc(&p, "csv")), Err(IngestError::UnknownFormat { .. })));
    }

    #[test]
    fn languages_from_column_default_or_detection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        std::fs::write(&p, "question\tanswer\tlang\n什么是股票？\t股份凭证\t\nWhat is a bond?\tdebt\ten\nx\ty\tfr\n").unwrap();
        let mut d = desc(&p, "tsv");
        d.language_column = Some("lang".into());
        let out = ingest(&d).unwrap();
        assert_eq!(out.pairs[0].language, Language::Zh);
        assert_eq!(out.pairs[1].language, Language::En);
        assert_eq!(out.dropped.len(), 1);
        assert!(out.dropped[0].reason.contains("unknown language"));
    }

    #[test]
    fn testset_loading() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("t.jsonl");
        std::fs::write(&j, "{\"question\":\"a\"}\n\n{\"question\":\"b\",\"gold\":\"x\"}\n").unwrap();
        assert_eq!(load_testset(&j).unwrap(), vec!["a", "b"]);
        let t = dir.path().join("t.txt");
        std::fs::write(&t, "one\ntwo\n").unwrap();
        assert_eq!(load_testset(&t).unwrap(), vec!["one", "two"]);
    }
}
