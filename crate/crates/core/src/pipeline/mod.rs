//! Checkpointed orchestration of the dataset stages.
//!
//! Each stage reads its upstream stage's output, writes its own output to
//! `<workdir>/checkpoints/<stage>.jsonl` with a manifest, and appends audit
//! records to `<workdir>/audit/<stage>.jsonl`. A manifest carries a
//! fingerprint of the stage's config, backends, templates, seed and upstream
//! data, so `--resume` can skip stages whose inputs have not changed.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::Instant;

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::annotator::{annotate, language_flag, quality_gate};
use crate::audit::{write_jsonl, AuditRecord};
use crate::corpus::{decontaminate, dedupe, ingest, load_testset};
use crate::emitter::{render_report, report, sha256_hex, write_atomic, write_dataset, Manifest};
use crate::eval::{
    run_benchmark, split_difficulty, split_task, BenchmarkItem, EvalSummary, ItemResult, ModelLabeler,
};
use crate::gateway::http::HttpBackend;
use crate::gateway::scripted::ScriptedBackend;
use crate::gateway::{Backend, Gateway};
use crate::mke::run_mke;
use crate::model::{QaPair, Sample, UnannotatedSample, ADMISSION_QUALITY};
use crate::sampler::{sample_item, SampleOutcome};
use crate::scr::run_scr;
use crate::template::{parse_exemplars, TemplateSet};
use crate::text::char_len;

pub use checkpoint::{encode_lines, CheckpointManifest, CheckpointStore};
pub use config::{
    dir_digest, file_digest, BackendKind, BackendSpec, Config, ConfigError, DecontaminationSection,
    OutputConfig, Role, TemplatesConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Mke,
    Sample,
    Scr,
    Annotate,
    Gate,
    Emit,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Mke,
        Stage::Sample,
        Stage::Scr,
        Stage::Annotate,
        Stage::Gate,
        Stage::Emit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Mke => "mke",
            Stage::Sample => "sample",
            Stage::Scr => "scr",
            Stage::Annotate => "annotate",
            Stage::Gate => "gate",
            Stage::Emit => "emit",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        let key = s.trim().to_lowercase();
        Stage::ALL.into_iter().find(|st| st.as_str() == key)
    }

    pub fn upstream(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self)?;
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parse `all` or a comma-separated stage list into pipeline order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, ConfigError> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(Stage::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        out.push(Stage::parse(part).ok_or_else(|| ConfigError(format!("unknown stage `{}`", part.trim())))?);
    }
    if out.is_empty() {
        return Err(ConfigError("no stages selected".into()));
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("no checkpoint for stage {0}; run that stage first")]
    MissingCheckpoint(Stage),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("cancelled during stage {0}; its checkpoint was not written")]
    Cancelled(Stage),
}

impl PipelineError {
    /// Stable identifier for logs and the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "CONFIG_INVALID",
            PipelineError::Stage { .. } => "STAGE_FAILED",
            PipelineError::MissingCheckpoint(_) => "CHECKPOINT_MISSING",
            PipelineError::Checkpoint { .. } => "CHECKPOINT_INVALID",
            PipelineError::Cancelled(_) => "CANCELLED",
        }
    }
}

fn stage_err(stage: Stage) -> impl Fn(&dyn fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Item accounting for one stage: `input + generated == output + dropped + errored`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    /// Items created by the stage itself (mined pairs).
    pub generated: usize,
    pub output: usize,
    pub dropped: usize,
    /// Failures; quarantined or audited with their cause.
    pub errored: usize,
}

impl StageCounts {
    pub fn balanced(&self) -> bool {
        self.input + self.generated == self.output + self.dropped + self.errored
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    /// Skipped under `--resume`; the checkpoint matched.
    Resumed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    pub counts: StageCounts,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<Manifest>,
}

impl RunReport {
    /// 0 when clean, 1 when any item errored or was quarantined.
    pub fn exit_code(&self) -> i32 {
        if self.stages.iter().any(|s| s.counts.errored > 0) {
            1
        } else {
            0
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<9} {:<8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}\n",
            "stage", "status", "in", "gen", "out", "dropped", "errored", "ms"
        );
        for r in &self.stages {
            let c = r.counts;
            let status = match r.status {
                StageStatus::Ran => "ran",
                StageStatus::Resumed => "resumed",
            };
            s += &format!(
                "{:<9} {:<8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}\n",
                r.stage.as_str(),
                status,
                c.input,
                c.generated,
                c.output,
                c.dropped,
                c.errored,
                r.elapsed_ms
            );
        }
        if let (Some(path), Some(m)) = (&self.dataset, &self.manifest) {
            s += &format!("\ndataset {} ({} samples, sha256 {})\n", path.display(), m.count, m.sha256);
        }
        s
    }
}

#[derive(Default)]
struct CancelState {
    flag: AtomicBool,
    gateways: Mutex<Vec<Weak<Gateway>>>,
}

/// Stops a run: in-flight and queued model calls fail fast, and the stage
/// in progress ends without writing its checkpoint.
#[derive(Clone, Default)]
pub struct Canceller {
    inner: Arc<CancelState>,
}

impl Canceller {
    pub fn cancel(&self) {
        self.inner.flag.store(true, Ordering::SeqCst);
        let gateways = self.inner.gateways.lock().expect("cancel lock");
        for g in gateways.iter().filter_map(Weak::upgrade) {
            g.shutdown();
        }
    }

    pub fn is_cancelled(&self) -> bool {
        self.inner.flag.load(Ordering::SeqCst)
    }

    fn register(&self, g: &Arc<Gateway>) {
        {
            let mut gateways = self.inner.gateways.lock().expect("cancel lock");
            gateways.retain(|w| w.strong_count() > 0);
            gateways.push(Arc::downgrade(g));
        }
        if self.is_cancelled() {
            g.shutdown();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanAction {
    Run,
    Resume,
    /// Not selected; its checkpoint feeds the next stage.
    LoadCheckpoint,
    MissingCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub stage: Stage,
    pub action: PlanAction,
    /// `role: endpoint` for each backend the stage calls.
    pub backends: Vec<String>,
}

pub fn render_plan(plan: &[PlanStep]) -> String {
    let mut s = String::new();
    for p in plan {
        let action = match p.action {
            PlanAction::Run => "run",
            PlanAction::Resume => "resume from checkpoint",
            PlanAction::LoadCheckpoint => "load checkpoint",
            PlanAction::MissingCheckpoint => "MISSING checkpoint",
        };
        s += &format!("{:<9} {action}", p.stage.as_str());
        if !p.backends.is_empty() {
            s += &format!("  [{}]", p.backends.join(", "));
        }
        s.push('\n');
    }
    s
}

enum Data {
    Nothing,
    Pairs(Vec<QaPair>),
    Outcomes(Vec<SampleOutcome>),
    Unannotated(Vec<UnannotatedSample>),
    Samples(Vec<Sample>),
}

struct StageRun {
    data: Data,
    counts: StageCounts,
    audit: Vec<AuditRecord>,
    /// Extra JSONL files, relative to the work directory.
    extra: Vec<(&'static str, Vec<Value>)>,
}

impl StageRun {
    fn new(data: Data, counts: StageCounts) -> StageRun {
        StageRun {
            data,
            counts,
            audit: Vec::new(),
            extra: Vec::new(),
        }
    }
}

pub struct Pipeline {
    cfg: Config,
    templates: TemplateSet,
    templates_digest: Value,
    injected: BTreeMap<Role, Arc<dyn Backend>>,
    cancel: Canceller,
    resume: bool,
}

impl Pipeline {
    pub fn new(cfg: Config) -> Result<Pipeline, PipelineError> {
        let mut templates =
            TemplateSet::load(cfg.templates.dir.as_deref()).map_err(|e| ConfigError(e.to_string()))?;
        if let Some(path) = &cfg.templates.short_exemplars {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            templates = templates.with_exemplars(parse_exemplars(&text));
        }
        let templates_digest = json!({
            "dir": cfg.templates.dir.as_deref().map(dir_digest),
            "short_exemplars": cfg.templates.short_exemplars.as_deref().map(file_digest),
        });
        Ok(Pipeline {
            cfg,
            templates,
            templates_digest,
            injected: BTreeMap::new(),
            cancel: Canceller::default(),
            resume: false,
        })
    }

    /// Use `backend` for `role` instead of building one from the config.
    pub fn with_backend(mut self, role: Role, backend: Arc<dyn Backend>) -> Pipeline {
        self.injected.insert(role, backend);
        self
    }

    pub fn resume(mut self, yes: bool) -> Pipeline {
        self.resume = yes;
        self
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn canceller(&self) -> Canceller {
        self.cancel.clone()
    }

    pub fn store(&self) -> CheckpointStore {
        CheckpointStore::new(&self.cfg.workdir)
    }

    fn injected_roles(&self) -> Vec<Role> {
        self.injected.keys().copied().collect()
    }

    fn backend_identity(&self, role: Role) -> Value {
        if self.injected.contains_key(&role) {
            return json!("injected");
        }
        self.cfg
            .backends
            .get(&role)
            .map(BackendSpec::fingerprint)
            .unwrap_or(Value::Null)
    }

    fn endpoint_label(&self, role: Role) -> String {
        let target = if self.injected.contains_key(&role) {
            "injected".to_string()
        } else {
            match self.cfg.backends.get(&role) {
                Some(s) => match (s.kind, &s.fixtures) {
                    (BackendKind::Scripted, Some(d)) => format!("scripted {}", d.display()),
                    _ => s.gateway.endpoint.clone(),
                },
                None => "unconfigured".into(),
            }
        };
        format!("{}: {target}", role.as_str())
    }

    /// Build a gateway for one stage. Each stage gets fresh backends, so a
    /// stage's output depends only on its input and config.
    pub fn gateway(&self, role: Role) -> Result<Arc<Gateway>, PipelineError> {
        let (backend, mut gcfg): (Arc<dyn Backend>, _) = match self.injected.get(&role) {
            Some(b) => (
                b.clone(),
                self.cfg.backends.get(&role).map(|s| s.gateway.clone()).unwrap_or_default(),
            ),
            None => {
                let spec = self.cfg.backend(role)?;
                let ctx = |m: String| ConfigError(format!("backends.{}: {m}", role.as_str()));
                let backend: Arc<dyn Backend> = match spec.kind {
                    BackendKind::Scripted => {
                        let dir = spec.fixtures.as_deref().ok_or_else(|| ctx("no fixtures".into()))?;
                        Arc::new(ScriptedBackend::from_dir(dir).map_err(|e| ctx(e.to_string()))?)
                    }
                    BackendKind::Http => Arc::new(
                        HttpBackend::new(
                            &spec.gateway.endpoint,
                            spec.model.as_deref().unwrap_or_default(),
                            spec.api_key_env.as_deref(),
                            spec.gateway.delimiters.clone(),
                        )
                        .map_err(ctx)?,
                    ),
                };
                (backend, spec.gateway.clone())
            }
        };
        if gcfg.endpoint.is_empty() {
            gcfg.endpoint = self.endpoint_label(role);
        }
        let gw = Gateway::new(backend, gcfg)
            .map_err(|e| ConfigError(format!("backends.{}: {e}", role.as_str())))?
            .with_exemplars(self.templates.exemplars().to_vec());
        let gw = Arc::new(gw);
        self.cancel.register(&gw);
        Ok(gw)
    }

    /// Digest of everything `stage`'s output depends on.
    pub fn fingerprint(&self, stage: Stage, upstream_sha: Option<&str>) -> String {
        let cfg = &self.cfg;
        let stage_cfg = match stage {
            Stage::Ingest => json!({
                "sources": cfg.sources.iter().map(|s| json!({
                    "descriptor": s,
                    "digest": file_digest(&s.path),
                })).collect::<Vec<_>>(),
                "testsets": cfg.decontamination.testsets.iter().map(|t| file_digest(t)).collect::<Vec<_>>(),
                "ngram": cfg.decontamination.ngram,
                "threshold": cfg.decontamination.threshold,
            }),
            Stage::Mke => json!(cfg.mke),
            Stage::Sample => json!(cfg.sampler),
            Stage::Scr => json!(cfg.scr),
            Stage::Annotate => Value::Null,
            Stage::Gate => json!({ "admission_quality": ADMISSION_QUALITY }),
            Stage::Emit => json!({ "dataset": cfg.output.dataset }),
        };
        let backends: BTreeMap<&str, Value> = Config::roles_for(stage)
            .iter()
            .map(|r| (r.as_str(), self.backend_identity(*r)))
            .collect();
        let v = json!({
            "stage": stage,
            "config": stage_cfg,
            "backends": backends,
            "templates": self.templates_digest,
            "upstream": upstream_sha,
            "seed": cfg.seed,
        });
        sha256_hex(&serde_json::to_vec(&v).expect("fingerprint serializes"))
    }

    fn data_path(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Emit => self.cfg.output.dataset.clone(),
            s => self.store().data_path(s),
        }
    }

    fn load(&self, stage: Stage) -> Result<(Data, String), PipelineError> {
        let store = self.store();
        Ok(match stage {
            Stage::Ingest | Stage::Mke => {
                let (d, m) = store.load(stage)?;
                (Data::Pairs(d), m.sha256)
            }
            Stage::Sample => {
                let (d, m) = store.load(stage)?;
                (Data::Outcomes(d), m.sha256)
            }
            Stage::Scr => {
                let (d, m) = store.load(stage)?;
                (Data::Unannotated(d), m.sha256)
            }
            Stage::Annotate | Stage::Gate => {
                let (d, m) = store.load(stage)?;
                (Data::Samples(d), m.sha256)
            }
            Stage::Emit => {
                let m = store.manifest(stage)?.ok_or(PipelineError::MissingCheckpoint(stage))?;
                (Data::Nothing, m.sha256)
            }
        })
    }

    /// What `run` would do, after validating the config.
    pub fn plan(&self, stages: &[Stage]) -> Result<Vec<PlanStep>, PipelineError> {
        self.cfg.validate(stages, &self.injected_roles())?;
        let store = self.store();
        let Some(last) = stages.iter().max().copied() else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        // Known output hash of the previous stage, when it will not change.
        let mut upstream: Option<String> = None;
        for stage in Stage::ALL.into_iter().take_while(|s| *s <= last) {
            let backends = Config::roles_for(stage)
                .iter()
                .map(|r| self.endpoint_label(*r))
                .collect();
            if stages.contains(&stage) {
                let needs_upstream = stage.upstream().is_some();
                let reusable = match (&upstream, needs_upstream, self.resume) {
                    (_, _, false) | (None, true, _) => None,
                    (up, _, true) => {
                        let fp = self.fingerprint(stage, up.as_deref());
                        store.reusable(stage, &fp, &self.data_path(stage))?
                    }
                };
                let action = if reusable.is_some() { PlanAction::Resume } else { PlanAction::Run };
                upstream = reusable.map(|m| m.sha256);
                out.push(PlanStep { stage, action, backends });
            } else {
                let feeds_next = Stage::ALL
                    .iter()
                    .any(|s| s.upstream() == Some(stage) && stages.contains(s));
                upstream = store.manifest(stage)?.map(|m| m.sha256);
                if feeds_next {
                    let action = if upstream.is_some() {
                        PlanAction::LoadCheckpoint
                    } else {
                        PlanAction::MissingCheckpoint
                    };
                    out.push(PlanStep {
                        stage,
                        action,
                        backends: Vec::new(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Run the selected stages in pipeline order. Unselected upstream
    /// stages are read from their checkpoints.
    pub async fn run(&self, stages: &[Stage]) -> Result<RunReport, PipelineError> {
        let mut stages = stages.to_vec();
        stages.sort();
        stages.dedup();
        self.cfg.validate(&stages, &self.injected_roles())?;
        let last = *stages.last().ok_or_else(|| ConfigError("no stages selected".into()))?;
        let workdir = &self.cfg.workdir;
        std::fs::create_dir_all(workdir)
            .map_err(|e| ConfigError(format!("cannot create {}: {e}", workdir.display())))?;
        let store = self.store();
        let mut report = RunReport {
            seed: self.cfg.seed,
            ..RunReport::default()
        };

        let mut carried: Option<(Stage, Data, String)> = None;
        for stage in Stage::ALL.into_iter().take_while(|s| *s <= last) {
            if !stages.contains(&stage) {
                carried = None;
                continue;
            }
            let (input, upstream_sha) = match stage.upstream() {
                None => (Data::Nothing, None),
                Some(up) => match carried.take() {
                    Some((s, d, sha)) if s == up => (d, Some(sha)),
                    _ => {
                        let (d, sha) = self.load(up)?;
                        (d, Some(sha))
                    }
                },
            };
            let fp = self.fingerprint(stage, upstream_sha.as_deref());
            let started = Instant::now();

            if self.resume {
                if let Some(m) = store.reusable(stage, &fp, &self.data_path(stage))? {
                    tracing::info!(stage = stage.as_str(), "checkpoint matches, skipping");
                    let data = match stage {
                        Stage::Emit => Data::Nothing,
                        s => self.load(s)?.0,
                    };
                    if stage == Stage::Emit {
                        report.dataset = Some(self.cfg.output.dataset.clone());
                        report.manifest = Some(Manifest {
                            count: m.count,
                            sha256: m.sha256.clone(),
                        });
                    }
                    report.stages.push(StageReport {
                        stage,
                        status: StageStatus::Resumed,
                        counts: m.counts,
                        elapsed_ms: started.elapsed().as_millis() as u64,
                    });
                    carried = Some((stage, data, m.sha256));
                    continue;
                }
            }

            if self.cancel.is_cancelled() {
                return Err(PipelineError::Cancelled(stage));
            }
            tracing::info!(stage = stage.as_str(), "running");
            let run = self.run_stage(stage, input).await?;
            if self.cancel.is_cancelled() {
                return Err(PipelineError::Cancelled(stage));
            }
            debug_assert!(run.counts.balanced(), "{stage}: {:?}", run.counts);

            let err = stage_err(stage);
            write_jsonl(&workdir.join("audit").join(format!("{stage}.jsonl")), &run.audit)
                .map_err(|e| err(&e))?;
            for (rel, records) in &run.extra {
                write_jsonl(&workdir.join(rel), records).map_err(|e| err(&e))?;
            }
            let manifest = match &run.data {
                Data::Nothing => return Err(err(&"stage produced no data")),
                Data::Pairs(d) => store.save(stage, &fp, d, run.counts)?,
                Data::Outcomes(d) => store.save(stage, &fp, d, run.counts)?,
                Data::Unannotated(d) => store.save(stage, &fp, d, run.counts)?,
                Data::Samples(d) if stage == Stage::Emit => {
                    let m = self.emit(d)?;
                    report.dataset = Some(self.cfg.output.dataset.clone());
                    report.manifest = Some(m.clone());
                    store.record(stage, &fp, m.count, m.sha256, run.counts)?
                }
                Data::Samples(d) => store.save(stage, &fp, d, run.counts)?,
            };
            report.stages.push(StageReport {
                stage,
                status: StageStatus::Ran,
                counts: run.counts,
                elapsed_ms: started.elapsed().as_millis() as u64,
            });
            carried = Some((stage, run.data, manifest.sha256));
        }

        let json = serde_json::to_vec_pretty(&report).expect("run report serializes");
        write_atomic(&workdir.join("run_report.json"), &json).map_err(|e| stage_err(last)(&e))?;
        Ok(report)
    }

    fn emit(&self, samples: &[Sample]) -> Result<Manifest, PipelineError> {
        let err = stage_err(Stage::Emit);
        let m = write_dataset(samples, &self.cfg.output.dataset).map_err(|e| err(&e))?;
        match report(samples, &char_len) {
            Ok(r) => {
                let dir = &self.cfg.workdir;
                let json = serde_json::to_vec_pretty(&r).expect("report serializes");
                write_atomic(&dir.join("report.json"), &json).map_err(|e| err(&e))?;
                write_atomic(&dir.join("report.txt"), render_report(&r).as_bytes()).map_err(|e| err(&e))?;
            }
            Err(e) => tracing::warn!("no report written: {e}"),
        }
        Ok(m)
    }

    async fn run_stage(&self, stage: Stage, input: Data) -> Result<StageRun, PipelineError> {
        let wrong = || PipelineError::Stage {
            stage,
            message: "unexpected upstream data".into(),
        };
        match (stage, input) {
            (Stage::Ingest, _) => self.ingest_stage(),
            (Stage::Mke, Data::Pairs(p)) => self.mke_stage(p).await,
            (Stage::Sample, Data::Pairs(p)) => self.sample_stage(p).await,
            (Stage::Scr, Data::Outcomes(o)) => self.scr_stage(o).await,
            (Stage::Annotate, Data::Unannotated(u)) => self.annotate_stage(u).await,
            (Stage::Gate, Data::Samples(s)) => Ok(gate_stage(s)),
            (Stage::Emit, Data::Samples(s)) => {
                let n = s.len();
                let counts = StageCounts {
                    input: n,
                    output: n,
                    ..StageCounts::default()
                };
                Ok(StageRun::new(Data::Samples(s), counts))
            }
            _ => Err(wrong()),
        }
    }

    fn ingest_stage(&self) -> Result<StageRun, PipelineError> {
        let err = stage_err(Stage::Ingest);
        let mut audit = Vec::new();
        let mut pairs = Vec::new();
        let mut counts = StageCounts::default();
        for src in &self.cfg.sources {
            let out = ingest(src).map_err(|e| err(&e))?;
            counts.input += out.rows_read();
            for d in out.dropped {
                audit.push(AuditRecord::new(
                    "ingest",
                    format!("{}#row{}", d.source, d.row),
                    "row_dropped",
                    d.reason,
                ));
                counts.dropped += 1;
            }
            pairs.extend(out.pairs);
        }
        let d = dedupe(pairs);
        for p in &d.dropped {
            audit.push(AuditRecord::new("ingest", &p.id, "duplicate", "question seen earlier"));
        }
        counts.dropped += d.dropped.len();
        let mut kept = d.kept;

        let testsets = &self.cfg.decontamination.testsets;
        if !testsets.is_empty() {
            let mut questions = Vec::new();
            for t in testsets {
                questions.extend(load_testset(t).map_err(|e| err(&e))?);
            }
            let out = decontaminate(kept, &questions, &self.cfg.decontamination.params())
                .map_err(|e| err(&e))?;
            for c in &out.removed {
                audit.push(
                    AuditRecord::new("ingest", &c.pair.id, "contaminated", "overlaps a benchmark question")
                        .with_detail(json!({ "test_index": c.test_index, "overlap": c.overlap })),
                );
            }
            counts.dropped += out.removed.len();
            kept = out.kept;
        }
        counts.output = kept.len();
        let mut run = StageRun::new(Data::Pairs(kept), counts);
        run.audit = audit;
        Ok(run)
    }

    async fn mke_stage(&self, pairs: Vec<QaPair>) -> Result<StageRun, PipelineError> {
        let generator = self.gateway(Role::Generator)?;
        let matcher = self.gateway(Role::Matcher)?;
        let input = pairs.len();
        let out = run_mke(
            pairs,
            &self.cfg.mke,
            self.cfg.concurrency,
            &generator,
            &matcher,
            &self.templates,
        )
        .await;
        let counts = StageCounts {
            input,
            generated: out.counts.a2q + out.counts.t2q,
            output: out.pairs.len(),
            dropped: out.dropped.len(),
            errored: 0,
        };
        let mut audit = out.audit;
        for (p, reason) in &out.dropped {
            audit.push(AuditRecord::new("mke", &p.id, "dropped", reason.as_str()));
        }
        let mut run = StageRun::new(Data::Pairs(out.pairs), counts);
        run.audit = audit;
        run.extra.push((
            "audit/mke_counts.jsonl",
            vec![serde_json::to_value(out.counts).expect("counts serialize")],
        ));
        Ok(run)
    }

    async fn sample_stage(&self, pairs: Vec<QaPair>) -> Result<StageRun, PipelineError> {
        let generator = self.gateway(Role::Generator)?;
        let matcher = self.gateway(Role::Matcher)?;
        let cfg = &self.cfg;
        let results: Vec<(SampleOutcome, Vec<AuditRecord>)> = stream::iter(pairs.iter())
            .map(|qa| sample_item(qa, &cfg.sampler, cfg.seed, &generator, &matcher, &self.templates))
            .buffered(cfg.concurrency)
            .collect()
            .await;
        let mut counts = StageCounts {
            input: pairs.len(),
            ..StageCounts::default()
        };
        let mut audit = Vec::new();
        let mut outcomes = Vec::with_capacity(results.len());
        for (o, a) in results {
            audit.extend(a);
            if let SampleOutcome::Errored { qa, cause } = &o {
                audit.push(AuditRecord::new("sample", &qa.id, "errored", cause.as_str()));
                counts.errored += 1;
            } else {
                counts.output += 1;
            }
            outcomes.push(o);
        }
        let mut run = StageRun::new(Data::Outcomes(outcomes), counts);
        run.audit = audit;
        Ok(run)
    }

    async fn scr_stage(&self, outcomes: Vec<SampleOutcome>) -> Result<StageRun, PipelineError> {
        enum Fate {
            Kept(UnannotatedSample),
            Dropped,
            Errored,
        }
        let live: Vec<SampleOutcome> = outcomes
            .into_iter()
            .filter(|o| !matches!(o, SampleOutcome::Errored { .. }))
            .collect();
        let needs_models = self.cfg.scr.enabled
            && live.iter().any(|o| matches!(o, SampleOutcome::NoCorrectCandidate { .. }));
        let gateways = if needs_models {
            Some((self.gateway(Role::Generator)?, self.gateway(Role::Matcher)?))
        } else {
            None
        };
        let cfg = &self.cfg.scr;
        let results: Vec<(Fate, Option<Value>, Vec<AuditRecord>)> = stream::iter(live.iter())
            .map(|o| {
                let gateways = &gateways;
                async move {
                    match o {
                        SampleOutcome::Selected { qa, solution } => (
                            Fate::Kept(UnannotatedSample {
                                qa: qa.clone(),
                                solution: solution.clone(),
                            }),
                            None,
                            Vec::new(),
                        ),
                        SampleOutcome::NoCorrectCandidate { qa, base } => {
                            let Some((generator, matcher)) = gateways else {
                                let a = AuditRecord::new("scr", &qa.id, "scr_disabled", "no verified candidate");
                                return (Fate::Dropped, None, vec![a]);
                            };
                            match run_scr(qa, base.trace.clone(), &base.answer, cfg, generator, matcher, &self.templates)
                                .await
                            {
                                Ok(out) => {
                                    let state = serde_json::to_value(&out.state).ok();
                                    match (out.sample, &out.state.cause) {
                                        (Some(s), _) => (Fate::Kept(s), state, Vec::new()),
                                        (None, Some(cause)) => {
                                            let a = AuditRecord::new("scr", &qa.id, "scr_failed", cause.as_str());
                                            (Fate::Errored, state, vec![a])
                                        }
                                        (None, None) => {
                                            let a = AuditRecord::new(
                                                "scr",
                                                &qa.id,
                                                "scr_exhausted",
                                                format!("no verified rewrite in {} round(s)", out.state.iterations.len()),
                                            );
                                            (Fate::Dropped, state, vec![a])
                                        }
                                    }
                                }
                                Err(e) => (
                                    Fate::Errored,
                                    None,
                                    vec![AuditRecord::new("scr", &qa.id, "scr_failed", e.to_string())],
                                ),
                            }
                        }
                        SampleOutcome::Errored { .. } => unreachable!("filtered above"),
                    }
                }
            })
            .buffered(self.cfg.concurrency)
            .collect()
            .await;

        let mut counts = StageCounts {
            input: live.len(),
            ..StageCounts::default()
        };
        let mut kept = Vec::new();
        let mut states = Vec::new();
        let mut audit = Vec::new();
        for (fate, state, a) in results {
            match fate {
                Fate::Kept(s) => {
                    counts.output += 1;
                    kept.push(s);
                }
                Fate::Dropped => counts.dropped += 1,
                Fate::Errored => counts.errored += 1,
            }
            states.extend(state);
            audit.extend(a);
        }
        let mut run = StageRun::new(Data::Unannotated(kept), counts);
        run.audit = audit;
        run.extra.push(("audit/scr_states.jsonl", states));
        Ok(run)
    }

    async fn annotate_stage(&self, samples: Vec<UnannotatedSample>) -> Result<StageRun, PipelineError> {
        let annotator = self.gateway(Role::Annotator)?;
        let results: Vec<_> = stream::iter(samples.iter())
            .map(|s| {
                let annotator = &annotator;
                async move { (s, annotate(s, annotator, &self.templates).await) }
            })
            .buffered(self.cfg.concurrency)
            .collect()
            .await;
        let mut counts = StageCounts {
            input: samples.len(),
            ..StageCounts::default()
        };
        let mut audit = Vec::new();
        let mut quarantine = Vec::new();
        let mut out = Vec::new();
        for (s, r) in results {
            match r {
                Ok(meta) => {
                    audit.extend(language_flag(s, &meta));
                    out.push(s.clone().annotate(meta));
                    counts.output += 1;
                }
                Err(e) => {
                    audit.push(AuditRecord::new("annotate", &s.qa.id, "quarantined", e.to_string()));
                    quarantine.push(json!({ "id": s.qa.id, "cause": e.to_string(), "sample": s }));
                    counts.errored += 1;
                }
            }
        }
        let mut run = StageRun::new(Data::Samples(out), counts);
        run.audit = audit;
        run.extra.push(("quarantine/annotate.jsonl", quarantine));
        Ok(run)
    }

    /// Grade a benchmark with the `candidate` and `judge` backends, when
    /// configured.
    pub async fn evaluate(
        &self,
        items: &[BenchmarkItem],
    ) -> Result<(Vec<ItemResult>, EvalSummary), PipelineError> {
        let err = |e: &dyn fmt::Display| ConfigError(format!("eval: {e}"));
        let optional = |role: Role| -> Result<Option<Arc<Gateway>>, PipelineError> {
            if self.injected.contains_key(&role) || self.cfg.backends.contains_key(&role) {
                if !self.injected.contains_key(&role) {
                    self.cfg.check_backend(role)?;
                }
                self.gateway(role).map(Some)
            } else {
                Ok(None)
            }
        };
        let candidate = optional(Role::Candidate)?;
        let judge = optional(Role::Judge)?;
        self.cfg.eval.sampling.check().map_err(|e| err(&e))?;
        run_benchmark(
            items,
            &self.cfg.eval,
            candidate.as_deref(),
            judge.as_deref(),
            &self.templates,
            &char_len,
            self.cfg.concurrency,
        )
        .await
        .map_err(|e| PipelineError::Config(err(&e)))
    }

    /// Per-task train and held-out files under `out_dir/<task>/`.
    pub fn split_by_task(
        &self,
        samples: &[Sample],
        out_dir: &Path,
    ) -> Result<BTreeMap<String, (usize, usize)>, PipelineError> {
        let err = |e: &dyn fmt::Display| ConfigError(format!("split: {e}"));
        let groups = split_task(samples, self.cfg.eval.held_out_fraction, self.cfg.seed);
        let mut sizes = BTreeMap::new();
        for (label, g) in groups {
            let slug: String = label
                .chars()
                .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
                .collect();
            let dir = out_dir.join(if slug.is_empty() { "unlabeled".into() } else { slug });
            write_dataset(&g.train, &dir.join("train.jsonl")).map_err(|e| err(&e))?;
            write_dataset(&g.held_out, &dir.join("held_out.jsonl")).map_err(|e| err(&e))?;
            sizes.insert(label, (g.train.len(), g.held_out.len()));
        }
        Ok(sizes)
    }

    /// Label pairs simple or hard with one generation each, then draw
    /// `n_samples` from each side.
    pub async fn split_by_difficulty(
        &self,
        pairs: &[QaPair],
        n_samples: usize,
        out_dir: &Path,
    ) -> Result<(usize, usize, usize), PipelineError> {
        let err = |e: &dyn fmt::Display| ConfigError(format!("split: {e}"));
        let generator = self.gateway(Role::Generator)?;
        let matcher = self.gateway(Role::Matcher)?;
        let labeler = ModelLabeler {
            generator: &generator,
            matcher: &matcher,
            templates: &self.templates,
        };
        let split = split_difficulty(pairs, &labeler, n_samples, self.cfg.seed)
            .await
            .map_err(|e| err(&e))?;
        for (name, items) in [("simple", &split.simple), ("hard", &split.hard), ("unlabeled", &split.unlabeled)] {
            let bytes = encode_lines(items).map_err(|e| err(&e))?;
            write_atomic(&out_dir.join(format!("{name}.jsonl")), &bytes).map_err(|e| err(&e))?;
        }
        Ok((split.simple.len(), split.hard.len(), split.unlabeled.len()))
    }
}

fn gate_stage(samples: Vec<Sample>) -> StageRun {
    let input = samples.len();
    let g = quality_gate(samples);
    let audit = g
        .excluded
        .iter()
        .map(|s| {
            AuditRecord::new(
                "gate",
                &s.qa.id,
                "below_quality",
                format!("quality {} < {ADMISSION_QUALITY}", s.metadata.quality),
            )
        })
        .collect();
    let counts = StageCounts {
        input,
        output: g.admitted.len(),
        dropped: g.excluded.len(),
        ..StageCounts::default()
    };
    let mut run = StageRun::new(Data::Samples(g.admitted), counts);
    run.audit = audit;
    run
}

/// Read benchmark items, one JSON object per line.
pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ConfigError(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests;
