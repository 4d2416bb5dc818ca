//! Audit records for dropped, skipped and failed items.

use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub stage: String,
    pub item: String,
    pub event: String,
    pub cause: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl AuditRecord {
    pub fn new(
        stage: &str,
        item: impl Into<String>,
        event: &str,
        cause: impl Into<String>,
    ) -> AuditRecord {
        AuditRecord {
            stage: stage.to_string(),
            item: item.into(),
            event: event.to_string(),
            cause: cause.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> AuditRecord {
        self.detail = detail;
        self
    }
}

/// Write any serializable records as JSON Lines, replacing the file.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
