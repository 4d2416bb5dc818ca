use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;

use super::*;
use crate::gateway::scripted::Reply;
use crate::gateway::{BackendError, WireRequest};

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

fn demo_config(workdir: &Path) -> Config {
    let mut cfg = Config::load(&demo_dir().join("cotpipe.toml")).unwrap();
    cfg.workdir = workdir.to_path_buf();
    cfg.output.dataset = workdir.join("dataset.jsonl");
    cfg
}

/// Delegates to the demo fixtures and cancels the run on the n-th call.
struct CancelAfter {
    inner: ScriptedBackend,
    calls: AtomicUsize,
    limit: usize,
    cancel: Canceller,
}

#[async_trait]
impl Backend for CancelAfter {
    async fn send(&self, req: &WireRequest) -> Result<String, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) + 1 == self.limit {
            self.cancel.cancel();
        }
        self.inner.send(req).await
    }
}

#[test]
fn stage_lists() {
    assert_eq!(parse_stages("all").unwrap(), Stage::ALL.to_vec());
    assert_eq!(
        parse_stages("emit, ingest,gate").unwrap(),
        vec![Stage::Ingest, Stage::Gate, Stage::Emit]
    );
    assert!(parse_stages("ingest,bogus").is_err());
    assert!(parse_stages(" , ").is_err());
    assert_eq!(Stage::Ingest.upstream(), None);
    assert_eq!(Stage::Emit.upstream(), Some(Stage::Gate));
}

#[tokio::test]
async fn demo_run_balances_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(demo_config(dir.path())).unwrap();
    let report = p.run(&Stage::ALL).await.unwrap();
    assert_eq!(report.exit_code(), 0, "{}", report.render());
    for s in &report.stages {
        assert!(s.counts.balanced(), "{}: {:?}", s.stage, s.counts);
        assert_eq!(s.status, StageStatus::Ran);
    }

    let ingest = report.stage(Stage::Ingest).unwrap().counts;
    // 50 + 6 rows; one empty answer, two duplicates, two benchmark overlaps.
    assert_eq!((ingest.input, ingest.dropped, ingest.output), (56, 5, 51));
    let mke = report.stage(Stage::Mke).unwrap().counts;
    assert!(mke.generated > 0);
    let scr = report.stage(Stage::Scr).unwrap().counts;
    assert!(scr.dropped >= 4, "unsolvable items are dropped: {scr:?}");
    let gate = report.stage(Stage::Gate).unwrap().counts;
    assert_eq!(gate.dropped, 5, "low-quality items are excluded");

    let manifest = report.manifest.clone().unwrap();
    let dataset = std::fs::read(dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(sha256_hex(&dataset), manifest.sha256);
    assert_eq!(manifest.count, report.stage(Stage::Emit).unwrap().counts.output);
    assert!(dir.path().join("report.txt").exists());
    assert!(dir.path().join("run_report.json").exists());
    let states = std::fs::read_to_string(dir.path().join("audit/scr_states.jsonl")).unwrap();
    assert!(states.contains("SUCCEEDED") && states.contains("EXHAUSTED"));

    let again = Pipeline::new(demo_config(dir.path())).unwrap().resume(true);
    let r2 = again.run(&Stage::ALL).await.unwrap();
    assert!(r2.stages.iter().all(|s| s.status == StageStatus::Resumed));
    assert_eq!(r2.manifest, Some(manifest));
    let plan = again.plan(&Stage::ALL).unwrap();
    assert!(plan.iter().all(|s| s.action == PlanAction::Resume));

    // A sampler change invalidates sampling and everything after it.
    let mut cfg = demo_config(dir.path());
    cfg.sampler.candidates = 3;
    let changed = Pipeline::new(cfg).unwrap().resume(true);
    let plan = changed.plan(&Stage::ALL).unwrap();
    let actions: Vec<PlanAction> = plan.iter().map(|s| s.action).collect();
    assert_eq!(
        actions,
        vec![
            PlanAction::Resume,
            PlanAction::Resume,
            PlanAction::Run,
            PlanAction::Run,
            PlanAction::Run,
            PlanAction::Run,
            PlanAction::Run
        ]
    );
    let r3 = changed.run(&Stage::ALL).await.unwrap();
    let statuses: Vec<StageStatus> = r3.stages.iter().map(|s| s.status).collect();
    assert_eq!(&statuses[..3], &[StageStatus::Resumed, StageStatus::Resumed, StageStatus::Ran]);
}

#[tokio::test]
async fn identical_runs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = demo_config(b.path());
    cfg.concurrency = 3;
    Pipeline::new(demo_config(a.path())).unwrap().run(&Stage::ALL).await.unwrap();
    Pipeline::new(cfg).unwrap().run(&Stage::ALL).await.unwrap();
    let da = std::fs::read(a.path().join("dataset.jsonl")).unwrap();
    let db = std::fs::read(b.path().join("dataset.jsonl")).unwrap();
    assert!(!da.is_empty());
    assert_eq!(da, db);
}

#[tokio::test]
async fn cancelled_stage_writes_no_checkpoint_and_resume_matches() {
    let clean = tempfile::tempdir().unwrap();
    Pipeline::new(demo_config(clean.path())).unwrap().run(&Stage::ALL).await.unwrap();

    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(demo_config(dir.path())).unwrap();
    let fixtures = demo_dir().join("fixtures/annotator");
    let backend = CancelAfter {
        inner: ScriptedBackend::from_dir(&fixtures).unwrap(),
        calls: AtomicUsize::new(0),
        limit: 10,
        cancel: p.canceller(),
    };
    let p = p.with_backend(Role::Annotator, Arc::new(backend));
    let err = p.run(&Stage::ALL).await.unwrap_err();
    assert!(matches!(err, PipelineError::Cancelled(Stage::Annotate)), "{err}");
    assert_eq!(err.code(), "CANCELLED");
    let store = CheckpointStore::new(dir.path());
    assert!(store.manifest(Stage::Scr).unwrap().is_some());
    assert!(store.manifest(Stage::Annotate).unwrap().is_none());
    assert!(!dir.path().join("dataset.jsonl").exists());

    let r = Pipeline::new(demo_config(dir.path()))
        .unwrap()
        .resume(true)
        .run(&Stage::ALL)
        .await
        .unwrap();
    assert_eq!(r.stage(Stage::Scr).unwrap().status, StageStatus::Resumed);
    assert_eq!(r.stage(Stage::Annotate).unwrap().status, StageStatus::Ran);
    assert_eq!(
        std::fs::read(dir.path().join("dataset.jsonl")).unwrap(),
        std::fs::read(clean.path().join("dataset.jsonl")).unwrap()
    );
}

#[tokio::test]
async fn annotation_failures_are_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = demo_dir().join("fixtures/annotator");
    let inner = ScriptedBackend::from_dir(&fixtures).unwrap();
    let garbled = ScriptedBackend::new(move |req, _| {
        if req.user.contains("Revenue moved from") {
            Reply::Text("no idea".into())
        } else {
            futures::executor::block_on(inner.send(req))
                .map(Reply::Text)
                .unwrap_or_else(|e| Reply::Reject(e.to_string()))
        }
    });
    let p = Pipeline::new(demo_config(dir.path()))
        .unwrap()
        .with_backend(Role::Annotator, Arc::new(garbled));
    let r = p.run(&Stage::ALL).await.unwrap();
    let ann = r.stage(Stage::Annotate).unwrap().counts;
    assert!(ann.errored > 0 && ann.balanced());
    assert_eq!(r.exit_code(), 1);
    let q = std::fs::read_to_string(dir.path().join("quarantine/annotate.jsonl")).unwrap();
    assert_eq!(q.lines().count(), ann.errored);
    assert!(q.contains("malformed annotation"));
}

#[tokio::test]
async fn single_stage_needs_upstream_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(demo_config(dir.path())).unwrap();
    let err = p.run(&[Stage::Annotate]).await.unwrap_err();
    assert!(matches!(err, PipelineError::MissingCheckpoint(Stage::Scr)));
    let plan = p.plan(&[Stage::Annotate]).unwrap();
    assert_eq!(plan[0].action, PlanAction::MissingCheckpoint);

    p.run(&[Stage::Ingest]).await.unwrap();
    let r = p.run(&[Stage::Mke]).await.unwrap();
    assert_eq!(r.stages.len(), 1);
    assert_eq!(r.stages[0].counts.input, 51);
}

#[tokio::test]
async fn invalid_config_fails_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = demo_config(dir.path());
    cfg.backends.remove(&Role::Annotator);
    let p = Pipeline::new(cfg).unwrap();
    let err = p.run(&Stage::ALL).await.unwrap_err();
    assert_eq!(err.code(), "CONFIG_INVALID");
    assert!(!dir.path().join("checkpoints").exists());
}

#[tokio::test]
async fn benchmark_grading_with_the_demo_judge() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(demo_config(dir.path())).unwrap();
    let items = load_benchmark(&demo_dir().join("benchmark.jsonl")).unwrap();
    let (results, summary) = p.evaluate(&items).await.unwrap();
    assert_eq!(results.len(), 6);
    assert_eq!(summary.items, 6);
    // Correct: MC #1, TF #1, open #1.
    assert!((summary.pass_at_1 - 0.5).abs() < 1e-12, "{summary:?}");
}
