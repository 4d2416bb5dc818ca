use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{DecontaminationConfig, SourceDescriptor, SourceFormat};
use crate::eval::EvalConfig;
use crate::gateway::BackendConfig;
use crate::mke::MkeConfig;
use crate::sampler::SamplerConfig;
use crate::scr::ScrConfig;

use super::Stage;

#[derive(Debug, Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Matcher,
    Annotator,
    Judge,
    Candidate,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Matcher => "matcher",
            Role::Annotator => "annotator",
            Role::Judge => "judge",
            Role::Candidate => "candidate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic replies from a fixture directory.
    Scripted,
    /// OpenAI-compatible chat-completions service.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(flatten)]
    pub gateway: BackendConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesConfig {
    pub dir: Option<PathBuf>,
    pub short_exemplars: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontaminationSection {
    pub testsets: Vec<PathBuf>,
    pub ngram: usize,
    pub threshold: f64,
}

impl Default for DecontaminationSection {
    fn default() -> Self {
        let d = DecontaminationConfig::default();
        DecontaminationSection {
            testsets: Vec::new(),
            ngram: d.ngram,
            threshold: d.threshold,
        }
    }
}

impl DecontaminationSection {
    pub fn params(&self) -> DecontaminationConfig {
        DecontaminationConfig {
            ngram: self.ngram,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Dataset file; relative paths are taken inside the work directory.
    pub dataset: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dataset: PathBuf::from("dataset.jsonl"),
        }
    }
}

fn default_seed() -> u64 {
    0
}

fn default_workdir() -> PathBuf {
    PathBuf::from("work")
}

fn default_concurrency() -> usize {
    8
}

/// The declarative run description, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    /// Items processed at once within a stage.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub sources: Vec<SourceDescriptor>,
    #[serde(default)]
    pub decontamination: DecontaminationSection,
    #[serde(default)]
    pub templates: TemplatesConfig,
    #[serde(default)]
    pub backends: BTreeMap<Role, BackendSpec>,
    #[serde(default)]
    pub mke: MkeConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub scr: ScrConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Config, ConfigError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.resolve_paths();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::from_toml(&text, &base)
    }

    fn resolve_paths(&mut self) {
        let base = self.base_dir.clone();
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.workdir);
        for s in &mut self.sources {
            abs(&mut s.path);
        }
        for t in &mut self.decontamination.testsets {
            abs(t);
        }
        if let Some(d) = &mut self.templates.dir {
            abs(d);
        }
        if let Some(d) = &mut self.templates.short_exemplars {
            abs(d);
        }
        for spec in self.backends.values_mut() {
            if let Some(f) = &mut spec.fixtures {
                abs(f);
            }
        }
        if self.output.dataset.is_relative() {
            self.output.dataset = self.workdir.join(&self.output.dataset);
        }
    }

    pub fn backend(&self, role: Role) -> Result<&BackendSpec, ConfigError> {
        self.backends
            .get(&role)
            .ok_or_else(|| invalid(format!("no [backends.{}] section", role.as_str())))
    }

    /// Roles a stage talks to.
    pub fn roles_for(stage: Stage) -> &'static [Role] {
        match stage {
            Stage::Mke | Stage::Sample | Stage::Scr => &[Role::Generator, Role::Matcher],
            Stage::Annotate => &[Role::Annotator],
            Stage::Ingest | Stage::Gate | Stage::Emit => &[],
        }
    }

    /// Check everything the selected stages need, before any work starts.
    /// Roles in `injected` already have a backend and need no section.
    pub fn validate(&self, stages: &[Stage], injected: &[Role]) -> Result<(), ConfigError> {
        if self.concurrency == 0 {
            return Err(invalid("concurrency must be at least 1"));
        }
        if stages.contains(&Stage::Ingest) {
            if self.sources.is_empty() {
                return Err(invalid("no [[sources]] given"));
            }
            let mut names = std::collections::HashSet::new();
            for s in &self.sources {
                if !names.insert(&s.name) {
                    return Err(invalid(format!("duplicate source name `{}`", s.name)));
                }
                if s.name.trim().is_empty() || s.name.contains(['#', ':']) {
                    return Err(invalid(format!("bad source name `{}`", s.name)));
                }
                if SourceFormat::parse(&s.format).is_none() {
                    return Err(invalid(format!("source `{}`: unknown format `{}`", s.name, s.format)));
                }
                if !s.path.is_file() {
                    return Err(invalid(format!("source `{}`: {} not found", s.name, s.path.display())));
                }
            }
            for t in &self.decontamination.testsets {
                if !t.is_file() {
                    return Err(invalid(format!("testset {} not found", t.display())));
                }
            }
            self.decontamination
                .params()
                .check()
                .map_err(|e| invalid(e.to_string()))?;
        }
        if let Some(d) = &self.templates.dir {
            if !d.is_dir() {
                return Err(invalid(format!("template dir {} not found", d.display())));
            }
        }
        if let Some(f) = &self.templates.short_exemplars {
            if !f.is_file() {
                return Err(invalid(format!("exemplar file {} not found", f.display())));
            }
        }
        let mut roles: Vec<Role> = stages.iter().flat_map(|s| Config::roles_for(*s)).copied().collect();
        roles.sort();
        roles.dedup();
        for role in roles.into_iter().filter(|r| !injected.contains(r)) {
            self.check_backend(role)?;
        }
        if stages.contains(&Stage::Sample) {
            if self.sampler.candidates == 0 {
                return Err(invalid("sampler.candidates must be at least 1"));
            }
            self.sampler.sampling.check().map_err(invalid)?;
        }
        if stages.contains(&Stage::Scr) && self.scr.enabled {
            if self.scr.limit == 0 {
                return Err(invalid("scr.limit must be at least 1"));
            }
            self.scr.sampling.check().map_err(invalid)?;
        }
        if stages.contains(&Stage::Mke) {
            self.mke.sampling.check().map_err(invalid)?;
        }
        Ok(())
    }

    pub fn check_backend(&self, role: Role) -> Result<(), ConfigError> {
        let spec = self.backend(role)?;
        let ctx = |m: String| invalid(format!("backends.{}: {m}", role.as_str()));
        spec.gateway.check().map_err(ctx)?;
        match spec.kind {
            BackendKind::Scripted => match &spec.fixtures {
                Some(d) if d.is_dir() => Ok(()),
                Some(d) => Err(ctx(format!("fixture dir {} not found", d.display()))),
                None => Err(ctx("scripted backend needs `fixtures`".into())),
            },
            BackendKind::Http => {
                if spec.gateway.endpoint.trim().is_empty() {
                    return Err(ctx("http backend needs `endpoint`".into()));
                }
                if spec.model.as_deref().unwrap_or("").trim().is_empty() {
                    return Err(ctx("http backend needs `model`".into()));
                }
                Ok(())
            }
        }
    }
}

/// SHA-256 over a file's bytes; a missing file hashes as empty.
pub fn file_digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap_or_default()))
}

/// SHA-256 over the names and contents of the files directly in `dir`.
pub fn dir_digest(dir: &Path) -> String {
    let mut h = Sha256::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    entries.sort();
    for p in entries.iter().filter(|p| p.is_file()) {
        h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
        h.update([0]);
        h.update(std::fs::read(p).unwrap_or_default());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

impl BackendSpec {
    /// Identity of the service for checkpoint fingerprints.
    pub fn fingerprint(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap_or_default();
        if let Some(d) = &self.fixtures {
            v["fixtures_digest"] = dir_digest(d).into();
            v["fixtures"] = serde_json::Value::Null;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let text = r#"
            seed = 7
            workdir = "out"

            [[sources]]
            name = "fin"
            path = "seed.jsonl"
            format = "jsonl"

            [decontamination]
            testsets = ["bench.txt"]
            ngram = 5

            [backends.generator]
            kind = "scripted"
            fixtures = "fx"
            max_inflight = 2

            [sampler]
            candidates = 2
            directive = "medium"

            [scr]
            limit = 2
        "#;
        let cfg = Config::from_toml(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.workdir, PathBuf::from("/base/out"));
        assert_eq!(cfg.sources[0].path, PathBuf::from("/base/seed.jsonl"));
        assert_eq!(cfg.output.dataset, PathBuf::from("/base/out/dataset.jsonl"));
        assert_eq!(cfg.decontamination.ngram, 5);
        assert_eq!(cfg.decontamination.threshold, 0.8);
        let g = cfg.backend(Role::Generator).unwrap();
        assert_eq!(g.gateway.max_inflight, 2);
        assert_eq!(g.fixtures.as_deref(), Some(Path::new("/base/fx")));
        assert_eq!(cfg.scr.limit, 2);
        assert!(cfg.backend(Role::Judge).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("sed = 1", Path::new(".")).is_err());
        assert!(Config::from_toml("[scr]\nlimt = 2", Path::new(".")).is_err());
    }

    #[test]
    fn validation_happens_before_work() {
        let cfg = Config::from_toml("", Path::new("/nowhere")).unwrap();
        let err = cfg.validate(&[Stage::Ingest], &[]).unwrap_err();
        assert!(err.0.contains("sources"));
        let cfg = Config::from_toml(
            "[[sources]]\nname = \"a\"\npath = \"missing.csv\"\nformat = \"csv\"",
            Path::new("/nowhere"),
        )
        .unwrap();
        assert!(cfg.validate(&[Stage::Ingest], &[]).unwrap_err().0.contains("not found"));
        assert!(cfg.validate(&[Stage::Gate], &[]).is_ok());
        assert!(cfg.validate(&[Stage::Sample], &[]).unwrap_err().0.contains("backends"));
        assert!(cfg
            .validate(&[Stage::Sample], &[Role::Generator, Role::Matcher])
            .is_ok());
    }
}
