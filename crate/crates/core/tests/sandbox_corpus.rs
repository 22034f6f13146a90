mod common;

use std::time::Instant;

use dstc::sandbox::{execute, ExecutionLimits, ExecutionStatus, SandboxCommand};

use common::{fixture, python_available};

fn expected_status(name: &str) -> ExecutionStatus {
    match name.split('_').next().unwrap() {
        "pass" => ExecutionStatus::Pass,
        "assert" => ExecutionStatus::AssertionFailed,
        "runtime" => ExecutionStatus::RuntimeError,
        "timeout" => ExecutionStatus::Timeout,
        other => panic!("unexpected fixture prefix {other}"),
    }
}

#[test]
fn corpus_statuses_are_exact() {
    if !python_available() {
        eprintln!("python3 not found; skipping");
        return;
    }
    let limits = ExecutionLimits {
        timeout_seconds: 1.0,
        ..ExecutionLimits::default()
    };
    let command = SandboxCommand::default();
    let mut entries: Vec<_> = std::fs::read_dir(fixture("sandbox"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    assert_eq!(entries.len(), 20);
    for path in entries {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let script = std::fs::read_to_string(&path).unwrap();
        let start = Instant::now();
        let res = execute(&script, &limits, &command).unwrap();
        assert_eq!(res.status, expected_status(&name), "{name}: {}", res.stderr_excerpt);
        if res.status == ExecutionStatus::Timeout {
            assert!(start.elapsed().as_secs_f64() < limits.timeout_seconds + 2.0);
        }
    }
}
