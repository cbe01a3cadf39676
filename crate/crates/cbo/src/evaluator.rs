//! Black-box evaluation at two fidelities: builtin synthetic benchmarks with
//! a deliberate cheap/expensive gap, and an external-process protocol with
//! newline-delimited JSON requests and wall-clock timeouts.

use crate::objective::{FomConstraint, FomSpec, FomTerm, MetricSet, Transform};
use crate::space::{ParameterSpace, ParameterSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::sync::OnceLock;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    /// Cheap fidelity (schematic-level in the circuit benchmarks).
    Pre,
    /// Expensive fidelity (extracted/post-layout in the circuit benchmarks).
    Post,
}

impl std::fmt::Display for Fidelity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fidelity::Pre => write!(f, "pre"),
            Fidelity::Post => write!(f, "post"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: u64,
    pub fidelity: Fidelity,
    pub config: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResponse {
    pub id: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalFailure {
    Timeout,
    Error(String),
}

impl std::fmt::Display for EvalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalFailure::Timeout => write!(f, "evaluation timed out"),
            EvalFailure::Error(msg) => write!(f, "evaluation failed: {msg}"),
        }
    }
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, request: &EvalRequest) -> Result<MetricSet, EvalFailure>;
}

/// A synthetic two-fidelity benchmark with closed-form metrics at both
/// fidelities. The cheap surface is smoother and systematically optimistic;
/// the expensive surface carries the ripple and loading terms.
pub struct BenchmarkDef {
    pub name: &'static str,
    pub space: ParameterSpace,
    pub fom: FomSpec,
    pub pre: fn(&[f64]) -> MetricSet,
    pub post: fn(&[f64]) -> MetricSet,
    /// (configuration values, expensive-fidelity FOM) when known analytically.
    pub known_post_optimum: Option<(Vec<f64>, f64)>,
}

fn metrics(pairs: &[(&str, f64)]) -> MetricSet {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect()
}

fn bowl_post(v: &[f64]) -> MetricSet {
    let bowl: f64 = v[..4].iter().map(|x| (x - 0.5) * (x - 0.5)).sum();
    let ints = 0.2 * ((v[4] - 3.0).powi(2) + (v[5] - 5.0).powi(2));
    metrics(&[("score", 10.0 - bowl - ints)])
}

fn bowl_pre(v: &[f64]) -> MetricSet {
    let post = bowl_post(v).get("score").unwrap();
    metrics(&[("score", post + 1.5 + 0.3 * v[0] + 0.5 * (3.0 * v[1]).sin())])
}

fn ota_stage_sizes(v: &[f64]) -> [f64; 5] {
    [
        v[0] * v[5],
        v[1] * v[6],
        v[2] * v[7],
        v[3] * v[8],
        v[4] * v[9],
    ]
}

fn ota_pre(v: &[f64]) -> MetricSet {
    let s = ota_stage_sizes(v);
    let s_target = [4.0_f64, 6.0, 8.0, 3.0, 5.0];
    let gain = 26.0
        - 0.5
            * s.iter()
                .zip(s_target)
                .map(|(si, ti)| (si.ln() - ti.ln()).powi(2))
                .sum::<f64>();
    let ugb = 1.2e7 * s[0] / (s[0] + 0.4 * (s[1] + s[2] + s[3] + s[4]));
    let pm = 62.0 + 8.0 * ((s[3] - s[4]) / 4.0).tanh();
    metrics(&[("gain_db", gain), ("ugb_hz", ugb), ("pm_deg", pm)])
}

fn ota_post(v: &[f64]) -> MetricSet {
    let s = ota_stage_sizes(v);
    let c = 0.02 * s.iter().sum::<f64>();
    let pre = ota_pre(v);
    let gain = pre.get("gain_db").unwrap() - 1.2 * c - 0.4 * (7.0 * v[0]).sin() * (5.0 * v[1]).cos();
    let ugb = pre.get("ugb_hz").unwrap() / (1.0 + 0.15 * c);
    let pm = pre.get("pm_deg").unwrap() - 6.0 * c / (1.0 + c) + 2.0 * (9.0 * v[2]).sin();
    metrics(&[("gain_db", gain), ("ugb_hz", ugb), ("pm_deg", pm)])
}

fn ldo_pre(v: &[f64]) -> MetricSet {
    let t = [3.0, 2.2, 2.6, 3.4];
    let gain = 75.0
        - 0.4
            * (0..4)
                .map(|i| ((v[i] * v[8 + i]).ln() - t[i]).powi(2))
                .sum::<f64>();
    let vou = 0.3 + 1.2 / (1.0 + 0.1 * v[4] * v[5]);
    let pm = 72.0 + 6.0 * ((v[6] - v[7]) / 5.0).tanh();
    metrics(&[("gain_db", gain), ("vou_v", vou), ("pm_deg", pm)])
}

fn ldo_post(v: &[f64]) -> MetricSet {
    let sized: f64 = (0..4).map(|i| v[i] * v[8 + i]).sum();
    let c = 0.01 * (sized + v[4] + v[5] + v[6] + v[7]);
    let pre = ldo_pre(v);
    let gain = pre.get("gain_db").unwrap() - 0.8 * c;
    let vou = pre.get("vou_v").unwrap() * (1.0 + 0.3 * c / (1.0 + c)) + 0.05 * (6.0 * v[4]).sin();
    let pm = pre.get("pm_deg").unwrap() - 8.0 * c / (1.0 + c);
    metrics(&[("gain_db", gain), ("vou_v", vou), ("pm_deg", pm)])
}

fn registry() -> &'static Vec<BenchmarkDef> {
    static REGISTRY: OnceLock<Vec<BenchmarkDef>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        vec![
            BenchmarkDef {
                name: "two_fidelity_bowl",
                space: ParameterSpace::new(vec![
                    ParameterSpec::continuous("x1", -2.0, 2.0),
                    ParameterSpec::continuous("x2", -2.0, 2.0),
                    ParameterSpec::continuous("x3", -2.0, 2.0),
                    ParameterSpec::continuous("x4", -2.0, 2.0),
                    ParameterSpec::integer("n1", 1.0, 8.0),
                    ParameterSpec::integer("n2", 1.0, 8.0),
                ])
                .unwrap(),
                fom: FomSpec {
                    terms: vec![FomTerm {
                        metric: "score".into(),
                        coef: 1.0,
                        transform: Transform::Identity,
                    }],
                    constraints: vec![],
                },
                pre: bowl_pre,
                post: bowl_post,
                known_post_optimum: Some((vec![0.5, 0.5, 0.5, 0.5, 3.0, 5.0], 10.0)),
            },
            BenchmarkDef {
                name: "synthetic_ota",
                space: ParameterSpace::new(
                    (1..=5)
                        .map(|i| ParameterSpec {
                            units: "um".into(),
                            ..ParameterSpec::continuous(&format!("w{i}"), 0.4, 8.0)
                        })
                        .chain((1..=5).map(|i| ParameterSpec {
                            units: "fingers".into(),
                            ..ParameterSpec::integer(&format!("nf{i}"), 1.0, 16.0)
                        }))
                        .collect(),
                )
                .unwrap(),
                fom: FomSpec {
                    terms: vec![
                        FomTerm {
                            metric: "gain_db".into(),
                            coef: 1.0,
                            transform: Transform::Identity,
                        },
                        FomTerm {
                            metric: "ugb_hz".into(),
                            coef: 1.0,
                            transform: Transform::Log10,
                        },
                    ],
                    constraints: vec![FomConstraint {
                        metric: "pm_deg".into(),
                        lo: 45.0,
                        hi: 80.0,
                        weight: 1.0,
                    }],
                },
                pre: ota_pre,
                post: ota_post,
                known_post_optimum: None,
            },
            BenchmarkDef {
                name: "synthetic_ldo",
                space: ParameterSpace::new(
                    (1..=8)
                        .map(|i| ParameterSpec {
                            units: "um".into(),
                            ..ParameterSpec::continuous(&format!("w{i}"), 0.4, 12.0)
                        })
                        .chain((1..=4).map(|i| ParameterSpec {
                            units: "fingers".into(),
                            ..ParameterSpec::integer(&format!("nf{i}"), 1.0, 32.0)
                        }))
                        .collect(),
                )
                .unwrap(),
                fom: FomSpec {
                    terms: vec![
                        FomTerm {
                            metric: "gain_db".into(),
                            coef: 0.1,
                            transform: Transform::Identity,
                        },
                        FomTerm {
                            metric: "vou_v".into(),
                            coef: -10.0,
                            transform: Transform::Identity,
                        },
                    ],
                    constraints: vec![FomConstraint {
                        metric: "pm_deg".into(),
                        lo: 60.0,
                        hi: 90.0,
                        weight: 1.0,
                    }],
                },
                pre: ldo_pre,
                post: ldo_post,
                known_post_optimum: None,
            },
        ]
    })
}

pub fn builtin(name: &str) -> Option<&'static BenchmarkDef> {
    registry().iter().find(|b| b.name == name)
}

pub fn builtin_names() -> Vec<&'static str> {
    registry().iter().map(|b| b.name).collect()
}

pub fn evaluate_builtin(
    name: &str,
    values: &[f64],
    fidelity: Fidelity,
) -> Result<MetricSet, EvalFailure> {
    let def = builtin(name).ok_or_else(|| EvalFailure::Error(format!("unknown benchmark `{name}`")))?;
    Ok(match fidelity {
        Fidelity::Pre => (def.pre)(values),
        Fidelity::Post => (def.post)(values),
    })
}

/// Optional per-fidelity latency injection: fixed seconds plus a uniform
/// jitter, all scaled by `speed_factor` (0 disables delays entirely).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    #[serde(default)]
    pub pre_fixed_s: f64,
    #[serde(default)]
    pub pre_jitter_s: f64,
    #[serde(default)]
    pub post_fixed_s: f64,
    #[serde(default)]
    pub post_jitter_s: f64,
    #[serde(default)]
    pub speed_factor: f64,
}

impl LatencyModel {
    pub fn delay_for(&self, request: &EvalRequest) -> Duration {
        if self.speed_factor <= 0.0 {
            return Duration::ZERO;
        }
        let (fixed, jitter) = match request.fidelity {
            Fidelity::Pre => (self.pre_fixed_s, self.pre_jitter_s),
            Fidelity::Post => (self.post_fixed_s, self.post_jitter_s),
        };
        // jitter is deterministic per request id
        let mut rng = ChaCha8Rng::seed_from_u64(request.id ^ 0x9e37_79b9_7f4a_7c15);
        let u: f64 = rng.random_range(-1.0..1.0);
        let secs = (fixed + jitter * u).max(0.0) * self.speed_factor;
        Duration::from_secs_f64(secs)
    }
}

pub struct BuiltinEvaluator {
    def: &'static BenchmarkDef,
    latency: LatencyModel,
}

impl BuiltinEvaluator {
    pub fn new(name: &str) -> Result<Self, EvalFailure> {
        let def = builtin(name)
            .ok_or_else(|| EvalFailure::Error(format!("unknown benchmark `{name}`")))?;
        Ok(Self {
            def,
            latency: LatencyModel::default(),
        })
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency = latency;
        self
    }

    pub fn def(&self) -> &'static BenchmarkDef {
        self.def
    }
}

impl Evaluator for BuiltinEvaluator {
    fn evaluate(&self, request: &EvalRequest) -> Result<MetricSet, EvalFailure> {
        let delay = self.latency.delay_for(request);
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        let values: Vec<f64> = self
            .def
            .space
            .specs()
            .iter()
            .map(|s| {
                request
                    .config
                    .get(&s.name)
                    .copied()
                    .ok_or_else(|| EvalFailure::Error(format!("missing parameter `{}`", s.name)))
            })
            .collect::<Result<_, _>>()?;
        evaluate_builtin(self.def.name, &values, request.fidelity)
    }
}

/// Runs one external process per request, exchanging one JSON line each way.
pub struct SubprocessEvaluator {
    pub command: Vec<String>,
    pub timeout_pre: Duration,
    pub timeout_post: Duration,
}

impl SubprocessEvaluator {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            timeout_pre: Duration::from_secs(60),
            timeout_post: Duration::from_secs(240),
        }
    }
}

#[derive(Deserialize)]
struct RawResponse {
    id: u64,
    metrics: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    #[allow(dead_code)]
    diagnostic: Option<String>,
}

impl Evaluator for SubprocessEvaluator {
    fn evaluate(&self, request: &EvalRequest) -> Result<MetricSet, EvalFailure> {
        if self.command.is_empty() {
            return Err(EvalFailure::Error("empty evaluator command".into()));
        }
        let timeout = match request.fidelity {
            Fidelity::Pre => self.timeout_pre,
            Fidelity::Post => self.timeout_post,
        };
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| EvalFailure::Error(format!("spawn failed: {e}")))?;

        let line = serde_json::to_string(request)
            .map_err(|e| EvalFailure::Error(format!("request encoding failed: {e}")))?;
        {
            let mut stdin = child.stdin.take().expect("stdin piped");
            // a dead child surfaces as EOF on stdout, not as a write error
            let _ = writeln!(stdin, "{line}");
            let _ = stdin.flush();
        }

        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let mut r = BufReader::new(stdout);
            let got = r.read_line(&mut buf).map(|_| buf);
            let _ = tx.send(got);
        });

        let outcome = rx.recv_timeout(timeout);
        let result = match outcome {
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                reader.join().ok();
                return Err(EvalFailure::Timeout);
            }
            Ok(Err(e)) => Err(EvalFailure::Error(format!("read failed: {e}"))),
            Ok(Ok(line)) => parse_response(&line, request.id),
        };
        reader.join().ok();

        // reap the child; a lingering one gets killed
        let status = wait_bounded(&mut child, Duration::from_secs(5));
        match (result, status) {
            (Ok(m), Some(s)) if s.success() => Ok(m),
            (Ok(_), Some(s)) => {
                let mut diag = String::new();
                if let Some(mut err) = child.stderr.take() {
                    let _ = err.read_to_string(&mut diag);
                }
                Err(EvalFailure::Error(format!(
                    "child exited with {s}: {}",
                    diag.trim()
                )))
            }
            (Ok(_), None) => Err(EvalFailure::Error("child did not exit".into())),
            (Err(mut e), status) => {
                if let EvalFailure::Error(msg) = &mut e {
                    let mut diag = String::new();
                    if let Some(mut err) = child.stderr.take() {
                        let _ = err.read_to_string(&mut diag);
                    }
                    if !diag.trim().is_empty() {
                        msg.push_str(&format!(" (stderr: {})", diag.trim()));
                    }
                    let _ = status;
                }
                Err(e)
            }
        }
    }
}

fn wait_bounded(child: &mut std::process::Child, limit: Duration) -> Option<std::process::ExitStatus> {
    let start = std::time::Instant::now();
    loop {
        if let Ok(Some(s)) = child.try_wait() {
            return Some(s);
        }
        if start.elapsed() > limit {
            let _ = child.kill();
            let _ = child.wait();
            return None;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn parse_response(line: &str, expected_id: u64) -> Result<MetricSet, EvalFailure> {
    if line.trim().is_empty() {
        return Err(EvalFailure::Error("no response line".into()));
    }
    let raw: RawResponse = serde_json::from_str(line)
        .map_err(|e| EvalFailure::Error(format!("malformed response: {e}")))?;
    if raw.id != expected_id {
        return Err(EvalFailure::Error(format!(
            "response id {} does not echo request id {expected_id}",
            raw.id
        )));
    }
    let mut out = MetricSet::new();
    for (name, v) in raw.metrics {
        let num = v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| EvalFailure::Error(format!("metric `{name}` is not a finite number")))?;
        out.insert(&name, num)
            .map_err(|e| EvalFailure::Error(e.to_string()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::effective_fom;
    use rand::SeedableRng;

    #[test]
    fn bowl_known_optimum() {
        let v = [0.5, 0.5, 0.5, 0.5, 3.0, 5.0];
        let post = evaluate_builtin("two_fidelity_bowl", &v, Fidelity::Post).unwrap();
        assert_eq!(post.get("score").unwrap(), 10.0);
        let pre = evaluate_builtin("two_fidelity_bowl", &v, Fidelity::Pre).unwrap();
        let want = 10.0 + 1.5 + 0.3 * 0.5 + 0.5 * (1.5f64).sin();
        assert!((pre.get("score").unwrap() - want).abs() < 1e-12);
        assert!((pre.get("score").unwrap() - 12.1487).abs() < 1e-4);
    }

    #[test]
    fn unknown_benchmark_errors() {
        assert!(evaluate_builtin("nope", &[0.0], Fidelity::Pre).is_err());
    }

    #[test]
    fn builtin_is_pure() {
        let def = builtin("synthetic_ota").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c = def.space.sample_uniform(&mut rng);
            let a = (def.post)(&c.values);
            let b = (def.post)(&c.values);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pre_is_optimistic_on_circuit_benchmarks() {
        for (name, metric) in [("synthetic_ota", "gain_db"), ("synthetic_ldo", "gain_db")] {
            let def = builtin(name).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut gap = 0.0;
            for _ in 0..1000 {
                let c = def.space.sample_uniform(&mut rng);
                gap += (def.pre)(&c.values).get(metric).unwrap()
                    - (def.post)(&c.values).get(metric).unwrap();
            }
            assert!(gap / 1000.0 > 0.0, "{name}: pre not optimistic on {metric}");
        }
    }

    #[test]
    fn ota_gain_post_below_pre_pointwise() {
        let def = builtin("synthetic_ota").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let c = def.space.sample_uniform(&mut rng);
            let pre = (def.pre)(&c.values).get("gain_db").unwrap();
            let post = (def.post)(&c.values).get("gain_db").unwrap();
            // ripple term is bounded by 0.4; the loading term exceeds it
            // everywhere since C >= 0.02 * 5 * 0.4
            assert!(post < pre, "post {post} >= pre {pre}");
        }
    }

    #[test]
    fn post_surface_has_more_total_variation() {
        // sweep w1 with everything else fixed; the post ripple shows up as
        // larger total variation along the axis
        let def = builtin("synthetic_ota").unwrap();
        let base: Vec<f64> = vec![2.0, 2.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0, 4.0, 4.0];
        let tv = |f: fn(&[f64]) -> MetricSet| {
            let mut prev = None;
            let mut total = 0.0;
            for i in 0..100 {
                let mut v = base.clone();
                v[0] = 0.4 + 7.6 * i as f64 / 99.0;
                let g = f(&v).get("gain_db").unwrap();
                if let Some(p) = prev {
                    total += (g - p as f64).abs();
                }
                prev = Some(g);
            }
            total
        };
        assert!(tv(def.post) > tv(def.pre));
    }

    #[test]
    fn fom_specs_validate_and_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for name in builtin_names() {
            let def = builtin(name).unwrap();
            def.fom.validate().unwrap();
            let c = def.space.sample_uniform(&mut rng);
            let m = (def.post)(&c.values);
            effective_fom(&m, &def.fom).unwrap();
        }
    }

    #[test]
    fn builtin_evaluator_roundtrip() {
        let ev = BuiltinEvaluator::new("two_fidelity_bowl").unwrap();
        let def = ev.def();
        let mut config = BTreeMap::new();
        for (s, v) in def.space.specs().iter().zip([0.5, 0.5, 0.5, 0.5, 3.0, 5.0]) {
            config.insert(s.name.clone(), v);
        }
        let m = ev
            .evaluate(&EvalRequest {
                id: 1,
                fidelity: Fidelity::Post,
                config,
            })
            .unwrap();
        assert_eq!(m.get("score").unwrap(), 10.0);
    }

    #[test]
    fn builtin_evaluator_missing_parameter() {
        let ev = BuiltinEvaluator::new("two_fidelity_bowl").unwrap();
        let err = ev
            .evaluate(&EvalRequest {
                id: 1,
                fidelity: Fidelity::Pre,
                config: BTreeMap::new(),
            })
            .unwrap_err();
        assert!(matches!(err, EvalFailure::Error(_)));
    }

    #[test]
    fn zero_speed_factor_means_no_delay() {
        let lat = LatencyModel {
            pre_fixed_s: 100.0,
            ..Default::default()
        };
        let req = EvalRequest {
            id: 9,
            fidelity: Fidelity::Pre,
            config: BTreeMap::new(),
        };
        assert_eq!(lat.delay_for(&req), Duration::ZERO);
    }

    #[test]
    fn request_wire_format() {
        let mut config = BTreeMap::new();
        config.insert("w1".to_string(), 2.5);
        config.insert("nf1".to_string(), 4.0);
        let req = EvalRequest {
            id: 7,
            fidelity: Fidelity::Post,
            config,
        };
        let line = serde_json::to_string(&req).unwrap();
        assert_eq!(line, r#"{"id":7,"fidelity":"post","config":{"nf1":4.0,"w1":2.5}}"#);
    }

    #[test]
    fn response_parse_rejects_non_numeric_metric() {
        let err = parse_response(r#"{"id":1,"metrics":{"gain_db":"oops"}}"#, 1).unwrap_err();
        match err {
            EvalFailure::Error(msg) => assert!(msg.contains("gain_db")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn response_parse_rejects_id_mismatch() {
        assert!(parse_response(r#"{"id":2,"metrics":{}}"#, 1).is_err());
    }
}
