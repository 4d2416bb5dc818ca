use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::emitter::{sha256_hex, write_atomic};

use super::{PipelineError, Stage, StageCounts};

/// Sidecar describing one stage's saved output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: Stage,
    /// Digest of everything the stage output depends on.
    pub fingerprint: String,
    pub count: usize,
    /// SHA-256 of the data file.
    pub sha256: String,
    pub counts: StageCounts,
}

/// Stage outputs as JSON Lines under `<workdir>/checkpoints`.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    dir: PathBuf,
}

fn ck_err(path: &Path, message: impl ToString) -> PipelineError {
    PipelineError::Checkpoint {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn encode_lines<T: Serialize>(items: &[T]) -> Result<Vec<u8>, serde_json::Error> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

impl CheckpointStore {
    pub fn new(workdir: &Path) -> CheckpointStore {
        CheckpointStore {
            dir: workdir.join("checkpoints"),
        }
    }

    pub fn data_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{}.jsonl", stage.as_str()))
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{}.manifest.json", stage.as_str()))
    }

    /// Write the data, then the manifest; a crash in between leaves a
    /// manifest whose hash no longer verifies.
    pub fn save<T: Serialize>(
        &self,
        stage: Stage,
        fingerprint: &str,
        items: &[T],
        counts: StageCounts,
    ) -> Result<CheckpointManifest, PipelineError> {
        let path = self.data_path(stage);
        let bytes = encode_lines(items).map_err(|e| ck_err(&path, e))?;
        write_atomic(&path, &bytes).map_err(|e| ck_err(&path, e))?;
        self.record(stage, fingerprint, items.len(), sha256_hex(&bytes), counts)
    }

    /// Write only the manifest, for stages whose output lives elsewhere.
    pub fn record(
        &self,
        stage: Stage,
        fingerprint: &str,
        count: usize,
        sha256: String,
        counts: StageCounts,
    ) -> Result<CheckpointManifest, PipelineError> {
        let m = CheckpointManifest {
            stage,
            fingerprint: fingerprint.to_string(),
            count,
            sha256,
            counts,
        };
        let path = self.manifest_path(stage);
        let json = serde_json::to_vec_pretty(&m).map_err(|e| ck_err(&path, e))?;
        write_atomic(&path, &json).map_err(|e| ck_err(&path, e))?;
        Ok(m)
    }

    pub fn manifest(&self, stage: Stage) -> Result<Option<CheckpointManifest>, PipelineError> {
        let path = self.manifest_path(stage);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| ck_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ck_err(&path, e)),
        }
    }

    /// Load a stage's data, checking it against the manifest hash.
    pub fn load<T: DeserializeOwned>(
        &self,
        stage: Stage,
    ) -> Result<(Vec<T>, CheckpointManifest), PipelineError> {
        let m = self
            .manifest(stage)?
            .ok_or(PipelineError::MissingCheckpoint(stage))?;
        let path = self.data_path(stage);
        let bytes = std::fs::read(&path).map_err(|e| ck_err(&path, e))?;
        if sha256_hex(&bytes) != m.sha256 {
            return Err(ck_err(&path, "data does not match its manifest hash"));
        }
        let text = std::str::from_utf8(&bytes).map_err(|e| ck_err(&path, e))?;
        let items = text
            .lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| ck_err(&path, format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<T>, _>>()?;
        Ok((items, m))
    }

    /// The manifest, when it carries `fingerprint` and its data verifies.
    pub fn reusable(
        &self,
        stage: Stage,
        fingerprint: &str,
        data: &Path,
    ) -> Result<Option<CheckpointManifest>, PipelineError> {
        let Some(m) = self.manifest(stage)? else {
            return Ok(None);
        };
        if m.fingerprint != fingerprint {
            return Ok(None);
        }
        match std::fs::read(data) {
            Ok(bytes) if sha256_hex(&bytes) == m.sha256 => Ok(Some(m)),
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::new(dir.path());
        let counts = StageCounts {
            input: 2,
            output: 2,
            ..StageCounts::default()
        };
        let m = store.save(Stage::Ingest, "fp", &["a", "b"], counts).unwrap();
        assert_eq!(m.count, 2);
        let (items, m2) = store.load::<String>(Stage::Ingest).unwrap();
        assert_eq!(items, vec!["a", "b"]);
        assert_eq!(m, m2);
        let data = store.data_path(Stage::Ingest);
        assert!(store.reusable(Stage::Ingest, "fp", &data).unwrap().is_some());
        assert!(store.reusable(Stage::Ingest, "other", &data).unwrap().is_none());

        std::fs::write(&data, "\"a\"\n").unwrap();
        assert!(store.reusable(Stage::Ingest, "fp", &data).unwrap().is_none());
        assert!(matches!(
            store.load::<String>(Stage::Ingest),
            Err(PipelineError::Checkpoint { .. })
        ));
        assert!(matches!(
            store.load::<String>(Stage::Mke),
            Err(PipelineError::MissingCheckpoint(Stage::Mke))
        ));
    }
}
