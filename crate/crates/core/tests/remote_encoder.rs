#![cfg(feature = "remote")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use objseek_core::embedding::cosine_similarity;
use objseek_core::encoder::{
    EmbeddingKey, Encoder, ImageContent, ImageRequest, RemoteConfig, RemoteEncoder, ToyEncoder,
};
use objseek_core::preprocess::PixelBuffer;
use objseek_core::Error;

struct Reply {
    status: u16,
    headers: Vec<(&'static str, String)>,
    body: String,
}

type Script = dyn Fn(usize, &serde_json::Value) -> Reply + Send + Sync;

/// One-request-per-connection HTTP server driven by `script`, which sees the
/// zero-based request number and the parsed JSON body.
fn serve(script: Arc<Script>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let count = Arc::new(AtomicUsize::new(0));
    let seen = count.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut body = vec![0u8; len];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
            let n = seen.fetch_add(1, Ordering::SeqCst);
            let reply = script(n, &json);
            let mut head = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                reply.status,
                reply.body.len()
            );
            for (k, v) in &reply.headers {
                head.push_str(&format!("{k}: {v}\r\n"));
            }
            head.push_str("\r\n");
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(reply.body.as_bytes());
        }
    });
    (format!("http://{addr}"), count)
}

fn toy_reply(dim: usize, body: &serde_json::Value) -> Reply {
    let toy = ToyEncoder::new(dim).unwrap();
    let payload = body["payload"].as_str().unwrap_or("x");
    let text = if body["modality"] == "image" { "image" } else { payload };
    let v = toy.encode_text(text).unwrap();
    let values: Vec<f64> = v.values().iter().map(|&x| x as f64).collect();
    Reply {
        status: 200,
        headers: vec![],
        body: serde_json::json!({ "embedding": values }).to_string(),
    }
}

fn status(code: u16) -> Reply {
    Reply {
        status: code,
        headers: vec![],
        body: "{}".into(),
    }
}

fn fast() -> RemoteConfig {
    RemoteConfig {
        backoff: Duration::from_millis(1),
        timeout: Duration::from_secs(5),
        ..RemoteConfig::default()
    }
}

#[test]
fn encodes_text_through_http() {
    let (url, _) = serve(Arc::new(|_, b| toy_reply(32, b)));
    let enc = RemoteEncoder::connect(&url, 32, fast()).unwrap();
    assert_eq!(enc.descriptor().dim, 32);
    assert!(enc.descriptor().encoder_id.starts_with("remote:"));
    let got = enc.encode_text("police officer").unwrap();
    let want = ToyEncoder::new(32).unwrap().encode_text("police officer").unwrap();
    assert!(cosine_similarity(&got, &want).unwrap() > 0.999_999);
}

#[test]
fn retries_server_errors() {
    // requests 0 and 1 are the canary
    let (url, count) = serve(Arc::new(|n, b| if n == 2 || n == 3 { status(503) } else { toy_reply(16, b) }));
    let enc = RemoteEncoder::connect(&url, 16, fast()).unwrap();
    enc.encode_text("bus").unwrap();
    assert_eq!(count.load(Ordering::SeqCst), 5);
}

#[test]
fn honours_retry_after() {
    let (url, count) = serve(Arc::new(|n, b| {
        if n == 2 {
            Reply {
                status: 429,
                headers: vec![("Retry-After", "0".into())],
                body: "{}".into(),
            }
        } else {
            toy_reply(16, b)
        }
    }));
    let enc = RemoteEncoder::connect(&url, 16, fast()).unwrap();
    enc.encode_text("bus").unwrap();
    assert_eq!(count.load(Ordering::SeqCst), 4);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, count) = serve(Arc::new(|n, b| if n >= 2 { status(503) } else { toy_reply(16, b) }));
    let enc = RemoteEncoder::connect(&url, 16, fast()).unwrap();
    match enc.encode_text("bus") {
        Err(Error::Transport {
            attempts, retryable, ..
        }) => {
            assert_eq!(attempts, 3);
            assert!(retryable);
        }
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(count.load(Ordering::SeqCst), 5);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, count) = serve(Arc::new(|n, b| if n >= 2 { status(400) } else { toy_reply(16, b) }));
    let enc = RemoteEncoder::connect(&url, 16, fast()).unwrap();
    assert!(matches!(enc.encode_text("bus"), Err(Error::Transport { retryable: false, .. })));
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn nondeterministic_encoder_is_rejected() {
    let (url, _) = serve(Arc::new(|n, _| {
        let mut v = vec![0.0f64; 8];
        v[n % 8] = 1.0;
        Reply {
            status: 200,
            headers: vec![],
            body: serde_json::json!({ "embedding": v }).to_string(),
        }
    }));
    assert!(matches!(RemoteEncoder::connect(&url, 8, fast()), Err(Error::Configuration(_))));
}

#[test]
fn wrong_dimension_is_rejected() {
    let (url, _) = serve(Arc::new(|_, b| toy_reply(8, b)));
    assert!(matches!(RemoteEncoder::connect(&url, 16, fast()), Err(Error::Configuration(_))));
}

#[test]
fn non_square_crop_is_rejected_locally() {
    let (url, count) = serve(Arc::new(|_, b| toy_reply(16, b)));
    let enc = RemoteEncoder::connect(&url, 16, fast()).unwrap();
    let crop = PixelBuffer::black(3, 2).unwrap();
    let req = ImageRequest {
        key: EmbeddingKey::Object {
            image_id: "a".into(),
            object_index: 0,
        },
        content: ImageContent::Pixels(&crop),
    };
    assert!(matches!(enc.encode_image(&req), Err(Error::InvalidInput(_))));
    assert_eq!(count.load(Ordering::SeqCst), 2);
    let square = PixelBuffer::black(2, 2).unwrap();
    let req = ImageRequest {
        content: ImageContent::Pixels(&square),
        ..req
    };
    enc.encode_image(&req).unwrap();
}

#[test]
fn unreachable_server_is_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    assert!(matches!(RemoteEncoder::connect(&url, 16, fast()), Err(Error::Transport { .. })));
}
