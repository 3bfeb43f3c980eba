//! HTTP oracle against a local one-shot-per-connection server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use oraclefuse::dataset::Instance;
use oraclefuse::oracle::{HttpOracle, HttpOracleConfig, OracleCache, OracleProvider};
use oraclefuse::Error;

struct Seen {
    bodies: Vec<serde_json::Value>,
    auth: Vec<Option<String>>,
}

/// Serves completions that answer with the instance's number divided by 10,
/// failing the first request for `flaky` with a 500.
fn serve(flaky: &'static str) -> (String, Arc<Mutex<Seen>>, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Seen {
        bodies: Vec::new(),
        auth: Vec::new(),
    }));
    let hits = Arc::new(AtomicUsize::new(0));
    let (seen2, hits2) = (seen.clone(), hits.clone());
    std::thread::spawn(move || {
        let mut failed_once = false;
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            hits2.fetch_add(1, Ordering::SeqCst);
            let json: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let prompt = json["prompt"].as_str().unwrap().to_string();
            {
                let mut s = seen2.lock().unwrap();
                s.bodies.push(json);
                s.auth.push(auth);
            }
            let (status, reply) = if prompt.contains(flaky) && !failed_once {
                failed_once = true;
                ("500 Internal Server Error", "{}".to_string())
            } else if prompt.contains("garbled") {
                (
                    "200 OK",
                    serde_json::json!({"choices": [{"text": "unsure"}]}).to_string(),
                )
            } else {
                let k: f64 = prompt.rsplit('-').next().unwrap().parse().unwrap();
                let text = format!("The score is {}", k / 10.0);
                (
                    "200 OK",
                    serde_json::json!({"choices": [{"text": text}]}).to_string(),
                )
            };
            let response = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (url, seen, hits)
}

fn instances(ids: &[&str]) -> Vec<Instance> {
    ids.iter().map(|id| Instance::new(*id, vec![0.0])).collect()
}

#[test]
fn scores_retries_and_caches() {
    let (url, seen, hits) = serve("item-3");
    let dir = tempfile::tempdir().unwrap();
    let cache_path = dir.path().join("scores.csv");
    std::env::set_var("ORACLEFUSE_TEST_TOKEN", "secret");
    let mut cfg = HttpOracleConfig::new(url, "tiny", "Rate {id}");
    cfg.token_env = Some("ORACLEFUSE_TEST_TOKEN".into());
    cfg.cache_path = Some(cache_path.clone());
    cfg.backoff_ms = 1;
    let mut oracle = HttpOracle::new(cfg.clone()).unwrap();
    let batch = instances(&["item-5", "item-3", "item-9"]);
    let scores = oracle.score_batch(&batch).unwrap();
    assert_eq!(
        scores,
        vec![
            ("item-3".to_string(), 0.3),
            ("item-5".to_string(), 0.5),
            ("item-9".to_string(), 0.9)
        ]
    );
    assert_eq!(hits.load(Ordering::SeqCst), 4);
    {
        let s = seen.lock().unwrap();
        assert!(s.auth.iter().all(|a| a.as_deref() == Some("Bearer secret")));
        assert!(s.bodies.iter().all(|b| b["model"] == "tiny"));
    }
    let persisted = OracleCache::load(&cache_path).unwrap();
    assert_eq!(persisted.get("item-9"), Some(0.9));

    // a fresh provider over the same cache file makes no requests for known ids
    let mut again = HttpOracle::new(cfg).unwrap();
    assert_eq!(again.score_batch(&batch).unwrap(), scores);
    assert_eq!(hits.load(Ordering::SeqCst), 4);
    assert_eq!(again.remote_calls(), 0);
}

#[test]
fn unparseable_replies_are_reported_per_id() {
    let (url, _, hits) = serve("never");
    let mut cfg = HttpOracleConfig::new(url, "tiny", "Rate {id}");
    cfg.max_retries = 1;
    cfg.backoff_ms = 1;
    let mut oracle = HttpOracle::new(cfg).unwrap();
    let err = oracle
        .score_batch(&instances(&["garbled-1", "ok-2"]))
        .unwrap_err();
    match err {
        Error::OracleFailures { failures } => {
            assert_eq!(failures.len(), 1);
            assert_eq!(failures[0].0, "garbled-1");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(oracle.cache().get("ok-2"), Some(0.2));
}
