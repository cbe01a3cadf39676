//! Wire-protocol tests against real child processes.

use cbo::evaluator::{EvalFailure, EvalRequest, Evaluator, Fidelity, SubprocessEvaluator};
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

fn python(script: &str) -> Vec<String> {
    vec!["python3".into(), "-c".into(), script.into()]
}

fn request(id: u64) -> EvalRequest {
    let mut config = BTreeMap::new();
    config.insert("w1".to_string(), 2.5);
    config.insert("nf1".to_string(), 4.0);
    EvalRequest {
        id,
        fidelity: Fidelity::Post,
        config,
    }
}

#[test]
fn happy_path_round_trip() {
    // child echoes the id and derives a metric from the config
    let ev = SubprocessEvaluator::new(python(
        r#"
import json, sys
req = json.loads(sys.stdin.readline())
out = {"id": req["id"], "metrics": {"gain_db": req["config"]["w1"] * 10.0}}
print(json.dumps(out))
"#,
    ));
    let metrics = ev.evaluate(&request(7)).unwrap();
    assert_eq!(metrics.get("gain_db"), Some(25.0));
}

#[test]
fn slow_child_times_out_and_is_killed() {
    let mut ev = SubprocessEvaluator::new(python(
        "import time, sys; sys.stdin.readline(); time.sleep(30)",
    ));
    ev.timeout_post = Duration::from_millis(200);
    let start = Instant::now();
    let err = ev.evaluate(&request(1)).unwrap_err();
    assert!(matches!(err, EvalFailure::Timeout));
    // the kill happened promptly rather than waiting out the sleep
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn non_numeric_metric_names_the_field() {
    let ev = SubprocessEvaluator::new(python(
        r#"
import json, sys
req = json.loads(sys.stdin.readline())
print(json.dumps({"id": req["id"], "metrics": {"pm_deg": "NaN"}}))
"#,
    ));
    let err = ev.evaluate(&request(2)).unwrap_err();
    match err {
        EvalFailure::Error(msg) => assert!(msg.contains("pm_deg"), "message: {msg}"),
        other => panic!("expected Error, got {other:?}"),
    }
}

#[test]
fn mismatched_id_is_rejected() {
    let ev = SubprocessEvaluator::new(python(
        r#"
import json, sys
sys.stdin.readline()
print(json.dumps({"id": 999, "metrics": {"gain_db": 1.0}}))
"#,
    ));
    let err = ev.evaluate(&request(3)).unwrap_err();
    match err {
        EvalFailure::Error(msg) => assert!(msg.contains("id"), "message: {msg}"),
        other => panic!("expected Error, got {other:?}"),
    }
}

#[test]
fn crashing_child_surfaces_stderr() {
    let ev = SubprocessEvaluator::new(python(
        "import sys; sys.stdin.readline(); sys.stderr.write('spice deck exploded'); sys.exit(3)",
    ));
    let err = ev.evaluate(&request(4)).unwrap_err();
    match err {
        EvalFailure::Error(msg) => {
            assert!(msg.contains("spice deck exploded"), "message: {msg}")
        }
        other => panic!("expected Error, got {other:?}"),
    }
}

#[test]
fn garbage_output_is_an_error_not_a_panic() {
    let ev = SubprocessEvaluator::new(python(
        "import sys; sys.stdin.readline(); print('!!! not json !!!')",
    ));
    assert!(matches!(
        ev.evaluate(&request(5)),
        Err(EvalFailure::Error(_))
    ));
}

#[test]
fn missing_command_is_an_error() {
    let ev = SubprocessEvaluator::new(vec!["/nonexistent/simulator".into()]);
    assert!(matches!(
        ev.evaluate(&request(6)),
        Err(EvalFailure::Error(_))
    ));
}

#[test]
fn request_wire_format_is_stable() {
    let line = serde_json::to_string(&request(7)).unwrap();
    assert_eq!(
        line,
        r#"{"id":7,"fidelity":"post","config":{"nf1":4.0,"w1":2.5}}"#
    );
}
