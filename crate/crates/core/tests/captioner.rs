use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use mmchange::data::{generate_dataset, load_dataset};
use mmchange::encoders::captioner::{caption_pairs, describe_via_captioner, CaptionerConfig};
use mmchange::encoders::captions::load_captions;
use mmchange::Error;
use serde_json::Value;

/// Minimal HTTP server: answers every request with `respond(body)` and
/// records the parsed JSON bodies.
fn stub(respond: impl Fn(&Value) -> (u16, String) + Send + Sync + 'static) -> (String, Arc<Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let respond = Arc::new(respond);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let respond = Arc::clone(&respond);
            let log = Arc::clone(&log);
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line.trim().is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let json: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                assert!(request_line.starts_with("POST /describe "), "{request_line}");
                let (status, text) = respond(&json);
                log.lock().unwrap().push(json);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            });
        }
    });
    (addr, seen)
}

fn quick(endpoint: &str) -> CaptionerConfig {
    CaptionerConfig {
        timeout: Duration::from_secs(10),
        retry_delay: Duration::from_millis(10),
        ..CaptionerConfig::new(endpoint)
    }
}

#[test]
fn fixed_caption_is_stored_under_each_sample_id() {
    let (endpoint, seen) = stub(|_| (200, r#"{"caption": "two buildings beside a road"}"#.into()));
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(1, 3, 32, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let pairs: Vec<_> = ds
        .samples
        .iter()
        .map(|s| {
            (
                s.id.clone(),
                dir.path().join("A").join(format!("{}.png", s.id)),
                dir.path().join("B").join(format!("{}.png", s.id)),
            )
        })
        .collect();
    let out = dir.path().join("vlm_captions.jsonl");
    caption_pairs(&pairs, &quick(&endpoint), &out).unwrap();
    let map = load_captions(&out).unwrap();
    assert_eq!(map.len(), 3);
    for s in &ds.samples {
        let p = &map[&s.id];
        assert_eq!(p.t1, "two buildings beside a road");
        assert_eq!(p.t2, "two buildings beside a road");
    }
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 6);
    for req in seen.iter() {
        assert_eq!(req["prompt"], "What are the components in this picture?");
        assert_eq!(req["temperature"], 0.2);
        assert_eq!(req["top_p"], 0.9);
        assert!(req["image_b64"].as_str().unwrap().starts_with("iVBOR"), "PNG bytes, base64");
    }
}

#[test]
fn non_200_surfaces_status_and_body() {
    let (endpoint, _) = stub(|_| (503, "model loading".into()));
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    std::fs::write(&img, b"not really a png").unwrap();
    match describe_via_captioner(&img, &quick(&endpoint)) {
        Err(Error::CaptionerStatus { status, body }) => {
            assert_eq!(status, 503);
            assert_eq!(body, "model loading");
        }
        other => panic!("expected a status error, got {other:?}"),
    }
}

#[test]
fn malformed_response_is_rejected() {
    let (endpoint, _) = stub(|_| (200, r#"{"text": "wrong key"}"#.into()));
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    std::fs::write(&img, b"abc").unwrap();
    assert!(matches!(
        describe_via_captioner(&img, &quick(&endpoint)),
        Err(Error::CaptionerResponse(_))
    ));
}

#[test]
fn unreachable_endpoint_is_retriable() {
    // Bind then drop to get a port nothing listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.png");
    std::fs::write(&img, b"abc").unwrap();
    let cfg = CaptionerConfig {
        attempts: 2,
        ..quick(&format!("http://127.0.0.1:{port}"))
    };
    match describe_via_captioner(&img, &cfg) {
        Err(Error::CaptionerRetriable { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("expected a retriable error, got {other:?}"),
    }
}
