mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;

use serde_json::json;

use common::{assert_valid, run_with, schema_validator};
use tabletop_core::backends::{Backend, OracleBackend};
use tabletop_core::detection::{
    detect, detect_all, DetectionProvider, DetectionQuery, FailingProvider, ImageRef,
    ProviderConfig, QueryError, RemoteDetectRequest, RemoteProvider, SimProvider,
};
use tabletop_core::runner::RunConfig;
use tabletop_core::simulator::{mask_bbox, DetectorNoise, Environment, Scenario, Simulator};

fn labels(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn frame() -> (Scenario, tabletop_core::simulator::Observation) {
    let s = Scenario::shipped("stack_blocks").unwrap();
    let obs = Simulator::new(s.clone(), 0).unwrap().observe();
    (s, obs)
}

fn query(ls: &[&str], source: &str) -> DetectionQuery {
    DetectionQuery::new(
        &labels(ls),
        ImageRef {
            episode_seed: 0,
            step_index: 0,
        },
        source,
        0,
    )
    .unwrap()
}

#[test]
fn noiseless_provider_reports_exact_mask_bounds() {
    let (_, obs) = frame();
    let p = SimProvider::with_noise("sim", DetectorNoise::default(), 1);
    let wanted = ["red block", "blue block", "green block", "wooden block"];
    let (dets, fault) = detect(&query(&wanted, "sim"), &p, &obs);
    assert!(fault.is_none());
    assert_eq!(dets.len(), 4);
    for d in &dets {
        let o = obs.object_by_label(&d.label).unwrap();
        assert_eq!(d.bbox, mask_bbox(&obs.masks[&o.id]).unwrap());
        assert_eq!(d.confidence, DetectorNoise::default().conf_range[1]);
        assert_eq!(d.source, "sim");
    }
}

#[test]
fn certain_miss_reports_nothing() {
    let (_, obs) = frame();
    let noise = DetectorNoise {
        miss_rate: 1.0,
        ..DetectorNoise::default()
    };
    let p = SimProvider::with_noise("sim", noise, 1);
    let (dets, fault) = detect(&query(&["red block", "blue block"], "sim"), &p, &obs);
    assert!(dets.is_empty() && fault.is_none());
}

#[test]
fn unknown_labels_are_not_reported() {
    let (_, obs) = frame();
    let p = SimProvider::with_noise("sim", DetectorNoise::default(), 1);
    let (dets, _) = detect(&query(&["purple prism"], "sim"), &p, &obs);
    assert!(dets.is_empty());
}

#[test]
fn query_labels_are_trimmed_and_deduplicated() {
    let q = query(&[" red block", "Red Block", "blue block", ""], "x");
    assert_eq!(q.labels(), ["red block", "blue block"]);
    let r = ImageRef {
        episode_seed: 0,
        step_index: 0,
    };
    assert_eq!(
        DetectionQuery::new(&labels(&["  "]), r, "x", 0).unwrap_err(),
        QueryError::NoLabels
    );
}

#[test]
fn failing_provider_yields_empty_list_and_fault() {
    let (_, obs) = frame();
    let providers: Vec<Box<dyn DetectionProvider>> = vec![
        Box::new(SimProvider::with_noise("good", DetectorNoise::default(), 1)),
        Box::new(FailingProvider::new("broken")),
    ];
    let (lists, faults) = detect_all(&providers, &labels(&["red block"]), &obs, 0).unwrap();
    assert_eq!(lists.len(), 2);
    assert_eq!(lists[0].len(), 1);
    assert!(lists[1].is_empty());
    assert_eq!(faults.len(), 1);
    assert_eq!(faults[0].source_id, "broken");
}

#[test]
fn run_continues_on_the_remaining_provider() {
    let scenario = Scenario::shipped("stack_blocks").unwrap();
    let cfg = RunConfig {
        providers: Some(vec![
            ProviderConfig::Sim {
                source_id: "good".into(),
                noise: DetectorNoise::default(),
                seed: 1,
            },
            ProviderConfig::Failing {
                source_id: "broken".into(),
            },
        ]),
        ..RunConfig::default()
    };
    let backend: Arc<dyn Backend> = Arc::new(OracleBackend::new(scenario.clone()));
    let (report, events) = run_with(&scenario, &cfg, backend);
    assert!(report.is_success(), "{report:?}");
    let grounds: Vec<_> = events.iter().filter(|e| e.stage == "ground").collect();
    assert!(!grounds.is_empty());
    for g in grounds {
        assert_eq!(g.payload["faults"][0]["source_id"], "broken");
    }
}

/// Serves one canned detector reply per connection and hands back the
/// request bodies it saw.
fn canned_detector(
    reply: serde_json::Value,
    requests: usize,
) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/detect", listener.local_addr().unwrap());
    let body = reply.to_string();
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen.push(String::from_utf8(buf).unwrap());
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

#[test]
fn remote_provider_round_trip() {
    let (_, obs) = frame();
    let reply = json!({"detections": [
        {"label": "red block", "bbox": [-5.0, 10.0, 30.0, 40.0], "confidence": 0.8},
        {"label": "teapot", "bbox": [1.0, 1.0, 5.0, 5.0], "confidence": 0.9}
    ]});
    let v = schema_validator("remote_detector.schema.json", Some("response"));
    assert_valid(&v, &reply, "remote response");
    let (url, server) = canned_detector(reply.clone(), 1);
    let p = RemoteProvider::new("remote", url, 5.0);
    let (dets, fault) = detect(&query(&["red block"], "remote"), &p, &obs);
    assert!(fault.is_none(), "{fault:?}");
    assert_eq!(dets.len(), 1);
    // Pixel centres are integers, so the image edge sits at -0.5.
    assert_eq!(dets[0].bbox.as_array(), [-0.5, 10.0, 30.0, 40.0]);
    assert_eq!(dets[0].source, "remote");

    let seen = server.join().unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen[0]).unwrap();
    let v = schema_validator("remote_detector.schema.json", Some("request"));
    assert_valid(&v, &body, "remote request");
    let req: RemoteDetectRequest = serde_json::from_str(&seen[0]).unwrap();
    assert_eq!(req.labels, ["red block"]);
    assert_eq!((req.width, req.height), (obs.width(), obs.height()));
    assert!(!req.image_png.is_empty());
}

#[test]
fn unreachable_remote_provider_is_a_fault() {
    let (_, obs) = frame();
    // Bind then drop to get a port nobody listens on.
    let addr = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap();
    let p = RemoteProvider::new("remote", format!("http://{addr}/detect"), 1.0);
    let (dets, fault) = detect(&query(&["red block"], "remote"), &p, &obs);
    assert!(dets.is_empty());
    assert_eq!(fault.unwrap().source_id, "remote");
}

#[test]
fn jittered_sources_depend_on_seed_and_nonce() {
    let (_, obs) = frame();
    let noise = DetectorNoise {
        bbox_jitter: 2.0,
        ..DetectorNoise::default()
    };
    let p = SimProvider::with_noise("a", noise, 7);
    let q0 = query(&["red block"], "a");
    let (d1, _) = detect(&q0, &p, &obs);
    let (d2, _) = detect(&q0, &p, &obs);
    assert_eq!(d1, d2);
    let mut q1 = q0.clone();
    q1.nonce = 1;
    let (d3, _) = detect(&q1, &p, &obs);
    assert_ne!(d1, d3);
}
