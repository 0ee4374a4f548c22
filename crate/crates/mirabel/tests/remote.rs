//! Integration tests for the remote embedding client against a minimal
//! in-process HTTP server.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use mirabel::corpus::{EmbeddingProvider, RemoteEmbedder};
use mirabel::error::Error;

/// Serve `responses` (status line + body), one per connection, then stop.
/// Returns the endpoint and a counter of requests actually received.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let counter = Arc::new(AtomicUsize::new(0));
    let seen = counter.clone();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = match listener.accept() {
                Ok(s) => s,
                Err(_) => return,
            };
            seen.fetch_add(1, Ordering::SeqCst);
            // read the request until the end of headers plus declared body
            let mut buf = Vec::new();
            let mut tmp = [0u8; 1024];
            loop {
                let n = stream.read(&mut tmp).unwrap_or(0);
                if n == 0 {
                    break;
                }
                buf.extend_from_slice(&tmp[..n]);
                if let Some(pos) = find(&buf, b"\r\n\r\n") {
                    let headers = String::from_utf8_lossy(&buf[..pos]).to_lowercase();
                    let len = headers
                        .lines()
                        .find_map(|l| l.strip_prefix("content-length:"))
                        .and_then(|v| v.trim().parse::<usize>().ok())
                        .unwrap_or(0);
                    if buf.len() >= pos + 4 + len {
                        break;
                    }
                }
            }
            let reason = if status == 200 { "OK" } else { "ERR" };
            let resp = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    (format!("http://{addr}"), counter)
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn ok_body(dim: usize, count: usize) -> String {
    let v: Vec<Vec<f32>> = (0..count)
        .map(|i| {
            let mut row = vec![0.0f32; dim];
            row[i % dim] = 2.0; // unnormalized on purpose
            row
        })
        .collect();
    serde_json::json!({ "dim": dim, "vectors": v }).to_string()
}

#[test]
fn embeds_and_normalizes() {
    let (endpoint, seen) = serve(vec![(200, ok_body(4, 2))]);
    let e = RemoteEmbedder::new(endpoint, 4, Duration::from_secs(2), 0).unwrap();
    let m = e.embed(&["a", "b"]).unwrap();
    assert_eq!(m.count(), 2);
    assert!(m.is_normalized());
    assert!((f64::from(m.row(0)[0]) - 1.0).abs() < 1e-6);
    assert_eq!(seen.load(Ordering::SeqCst), 1);
}

#[test]
fn retries_on_server_error_then_succeeds() {
    let (endpoint, seen) = serve(vec![
        (500, "{}".to_string()),
        (503, "{}".to_string()),
        (200, ok_body(4, 1)),
    ]);
    let e = RemoteEmbedder::new(endpoint, 4, Duration::from_secs(2), 2).unwrap();
    let m = e.embed(&["a"]).unwrap();
    assert_eq!(m.count(), 1);
    assert_eq!(seen.load(Ordering::SeqCst), 3, "two retries then success");
}

#[test]
fn server_error_exhausts_retries() {
    let (endpoint, seen) = serve(vec![(500, "{}".to_string()), (500, "{}".to_string())]);
    let e = RemoteEmbedder::new(endpoint, 4, Duration::from_secs(2), 1).unwrap();
    match e.embed(&["a"]) {
        Err(Error::HttpStatus { status: 500 }) => {}
        other => panic!("expected HTTP 500 error, got {other:?}"),
    }
    assert_eq!(seen.load(Ordering::SeqCst), 2);
}

#[test]
fn client_error_fails_fast_without_retry() {
    let (endpoint, seen) = serve(vec![(400, "{}".to_string()), (400, "{}".to_string())]);
    let e = RemoteEmbedder::new(endpoint, 4, Duration::from_secs(2), 3).unwrap();
    match e.embed(&["a"]) {
        Err(Error::HttpStatus { status: 400 }) => {}
        other => panic!("expected HTTP 400 error, got {other:?}"),
    }
    assert_eq!(seen.load(Ordering::SeqCst), 1, "4xx must not be retried");
}

#[test]
fn wrong_vector_count_rejected() {
    let (endpoint, _) = serve(vec![(200, ok_body(4, 1))]);
    let e = RemoteEmbedder::new(endpoint, 4, Duration::from_secs(2), 0).unwrap();
    match e.embed(&["a", "b"]) {
        Err(Error::VectorCountMismatch { sent: 2, got: 1 }) => {}
        other => panic!("expected count mismatch, got {other:?}"),
    }
}

#[test]
fn wrong_dim_rejected() {
    let (endpoint, _) = serve(vec![(200, ok_body(8, 1))]);
    let e = RemoteEmbedder::new(endpoint, 4, Duration::from_secs(2), 0).unwrap();
    match e.embed(&["a"]) {
        Err(Error::DimMismatch { expected: 4, got: 8 }) => {}
        other => panic!("expected dim mismatch, got {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_reports_attempts() {
    let e = RemoteEmbedder::new("http://127.0.0.1:9", 4, Duration::from_millis(300), 1).unwrap();
    match e.embed(&["a"]) {
        Err(Error::Network { attempts: 2, .. }) => {}
        other => panic!("expected network error after 2 attempts, got {other:?}"),
    }
}
