use std::path::Path;
use std::process::{Command, Output};

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_name() == "work" {
            continue;
        }
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), &target).unwrap();
        }
    }
}

/// A private copy of the demo project.
fn demo() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo"), dir.path());
    dir
}

fn cotpipe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotpipe"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_run_then_resume_report_and_split() {
    let dir = demo();
    let d = dir.path();

    let plan = cotpipe(d, &["run", "--dry-run"]);
    assert!(plan.status.success());
    assert!(stdout(&plan).contains("annotate  run"));
    assert!(!d.join("work").exists(), "dry run touches nothing");

    let run = cotpipe(d, &["run"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout(&run).contains("emit"));
    let dataset = std::fs::read(d.join("work/dataset.jsonl")).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("work/run_report.json")).unwrap()).unwrap();
    assert_eq!(report["stages"].as_array().unwrap().len(), 7);

    let resumed = cotpipe(d, &["run", "--resume"]);
    assert_eq!(resumed.status.code(), Some(0));
    assert_eq!(stdout(&resumed).matches("resumed").count(), 7);
    assert_eq!(std::fs::read(d.join("work/dataset.jsonl")).unwrap(), dataset);

    let rep = cotpipe(d, &["report", "--json"]);
    assert!(rep.status.success());
    let r: serde_json::Value = serde_json::from_slice(&rep.stdout).unwrap();
    assert_eq!(r["total"].as_u64().unwrap() as usize, dataset.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count());

    let split = cotpipe(d, &["split", "--by", "task"]);
    assert!(split.status.success(), "{}", String::from_utf8_lossy(&split.stderr));
    assert!(d.join("work/splits/task/knowledge_qa/held_out.jsonl").exists());
}

#[test]
fn single_stages_chain_through_checkpoints() {
    let dir = demo();
    let d = dir.path();
    let early = cotpipe(d, &["annotate"]);
    assert_eq!(early.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&early.stderr).contains("CHECKPOINT_MISSING"));

    for stage in ["ingest", "mke", "sample", "scr", "annotate", "emit"] {
        let o = cotpipe(d, &[stage, "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(d.join("work/dataset.jsonl").exists());
}

#[test]
fn eval_grades_the_demo_benchmark() {
    let dir = demo();
    let o = cotpipe(dir.path(), &["eval", "--benchmark", "benchmark.jsonl"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("pass@1 0.5000"));
    assert!(dir.path().join("work/eval/results.jsonl").exists());
}

#[test]
fn bad_config_exits_2_with_code() {
    let dir = demo();
    std::fs::write(dir.path().join("broken.toml"), "seed = \"x\"").unwrap();
    let o = cotpipe(dir.path(), &["--config", "broken.toml", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CONFIG_INVALID"));

    let o = cotpipe(dir.path(), &["run", "--stages", "ingest,nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown stage"));
}
