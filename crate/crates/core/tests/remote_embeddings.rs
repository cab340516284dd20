#![cfg(feature = "remote")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use spice_core::similarity::{EmbeddingCache, EmbeddingClient, SimilarityError};

#[derive(Clone, Copy)]
enum Reply {
    Ok,
    Status(u16),
    Dim(usize),
}

struct FakeService {
    url: String,
    requests: Arc<AtomicUsize>,
    batches: Arc<Mutex<Vec<usize>>>,
}

/// Serves `POST /embed`. The n-th request gets `script[n]`, or the last
/// entry once the script runs out. Vectors are 3-d and derived from the text.
fn serve(script: Vec<Reply>) -> FakeService {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let batches = Arc::new(Mutex::new(Vec::new()));
    let (req, bat) = (requests.clone(), batches.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                if line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let n = req.fetch_add(1, Ordering::SeqCst);
            let texts: Vec<String> = serde_json::from_slice::<serde_json::Value>(&body).unwrap()["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| t.as_str().unwrap().to_string())
                .collect();
            bat.lock().unwrap().push(texts.len());
            let (status, payload) = match script[n.min(script.len() - 1)] {
                Reply::Status(code) => (code, "{}".to_string()),
                Reply::Ok | Reply::Dim(_) => {
                    let dim = match script[n.min(script.len() - 1)] {
                        Reply::Dim(d) => d,
                        _ => 3,
                    };
                    let vecs: Vec<Vec<f64>> = texts
                        .iter()
                        .map(|t| (0..dim).map(|i| (t.len() + i + 1) as f64).collect())
                        .collect();
                    (200, serde_json::json!({ "embeddings": vecs }).to_string())
                }
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    FakeService { url, requests, batches }
}

fn phrases(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("phrase {i}")).collect()
}

fn client(svc: &FakeService) -> EmbeddingClient {
    EmbeddingClient::new(&svc.url, "fake-model").with_backoff(Duration::from_millis(1))
}

#[test]
fn empty_input_sends_nothing() {
    let svc = serve(vec![Reply::Ok]);
    let table = client(&svc).fetch(&[]).unwrap();
    assert!(table.is_empty());
    assert_eq!(svc.requests.load(Ordering::SeqCst), 0);
}

#[test]
fn batches_are_capped_and_cache_is_reused() {
    let svc = serve(vec![Reply::Ok]);
    let dir = tempfile::tempdir().unwrap();
    let c = client(&svc).with_cache(EmbeddingCache::new(dir.path()).unwrap());
    let table = c.fetch(&phrases(300)).unwrap();
    assert_eq!(table.len(), 300);
    assert_eq!(table.dim(), 3);
    assert_eq!(*svc.batches.lock().unwrap(), vec![256, 44]);

    let again = c.fetch(&phrases(300)).unwrap();
    assert_eq!(svc.requests.load(Ordering::SeqCst), 2);
    assert_eq!(again.get("phrase 7"), table.get("phrase 7"));

    // Only the new phrase goes over the wire.
    let mut more = phrases(10);
    more.push("brand new".into());
    c.fetch(&more).unwrap();
    assert_eq!(svc.requests.load(Ordering::SeqCst), 3);
    assert_eq!(svc.batches.lock().unwrap()[2], 1);
}

#[test]
fn retries_server_errors() {
    let svc = serve(vec![Reply::Status(503), Reply::Status(500), Reply::Ok]);
    let table = client(&svc).fetch(&phrases(4)).unwrap();
    assert_eq!(table.len(), 4);
    assert_eq!(svc.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_three_attempts() {
    let svc = serve(vec![Reply::Status(502)]);
    let err = client(&svc).fetch(&phrases(2)).unwrap_err();
    assert!(
        matches!(err, SimilarityError::ServiceUnavailable { attempts: 3, .. }),
        "{err:?}"
    );
    assert_eq!(svc.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let svc = serve(vec![Reply::Status(400)]);
    let err = client(&svc).fetch(&phrases(2)).unwrap_err();
    assert!(matches!(err, SimilarityError::Protocol(_)), "{err:?}");
    assert_eq!(svc.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn dimension_change_between_batches_is_rejected() {
    let svc = serve(vec![Reply::Dim(3), Reply::Dim(4)]);
    let err = client(&svc).with_batch_size(2).fetch(&phrases(3)).unwrap_err();
    assert!(matches!(err, SimilarityError::Protocol(_)), "{err:?}");
}

#[test]
fn dimension_change_against_cache_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let first = serve(vec![Reply::Dim(3)]);
    client(&first)
        .with_cache(EmbeddingCache::new(dir.path()).unwrap())
        .fetch(&phrases(2))
        .unwrap();
    let second = serve(vec![Reply::Dim(5)]);
    let err = client(&second)
        .with_cache(EmbeddingCache::new(dir.path()).unwrap())
        .fetch(&["something else".to_string()])
        .unwrap_err();
    assert!(matches!(err, SimilarityError::Protocol(_)), "{err:?}");
}

#[test]
fn unreachable_service_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = EmbeddingClient::new(format!("http://127.0.0.1:{port}"), "m").with_backoff(Duration::from_millis(1));
    let err = c.fetch(&phrases(1)).unwrap_err();
    assert!(matches!(err, SimilarityError::ServiceUnavailable { .. }), "{err:?}");
}
