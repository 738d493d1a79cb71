//! Wire-level checks of the HTTP clients against a canned local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use gaterag::embed::{Embedder, HttpEmbedder};
use gaterag::generate::{FinishReason, GenerationRequest, Generator, HttpGenerator, WireApi};
use gaterag::http::{HttpClient, HttpSettings};
use serde_json::{json, Value};

struct Canned {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
}

/// Serves `replies` in order, one per connection, recording request bodies.
fn serve(replies: Vec<(u16, String)>) -> Canned {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen.lock().unwrap().push(serde_json::from_slice(&buf).unwrap_or(Value::Null));
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    Canned { url, requests }
}

fn client(url: &str, retries: u32) -> HttpClient {
    HttpClient::new(HttpSettings {
        url: url.to_string(),
        api_key: Some("k".into()),
        timeout: Duration::from_secs(5),
        max_retries: retries,
        backoff: Duration::from_millis(1),
    })
}

#[test]
fn completions_logprobs_survive_the_wire() {
    let body = json!({
        "choices": [{
            "text": " Paris",
            "finish_reason": "stop",
            "logprobs": {"tokens": [" Par", "is"], "token_logprobs": [-0.5, -1.5]}
        }]
    });
    let srv = serve(vec![(200, body.to_string())]);
    let gen = HttpGenerator::new(client(&srv.url, 0), "m", WireApi::Completions);
    let out = gen.complete(&GenerationRequest::new("Q?", 8)).unwrap();
    assert_eq!(out.text, " Paris");
    assert_eq!(out.logprobs().collect::<Vec<_>>(), [-0.5, -1.5]);
    assert_eq!(out.finish_reason, FinishReason::Stop);

    let req = &srv.requests.lock().unwrap()[0];
    assert_eq!(req["prompt"], "Q?");
    assert_eq!(req["max_tokens"], 8);
    assert_eq!(req["temperature"], 0.0);
    assert_eq!(req["logprobs"], 1);
}

#[test]
fn chat_logprobs_and_trailing_eos() {
    let body = json!({
        "choices": [{
            "message": {"role": "assistant", "content": "Paris"},
            "finish_reason": "length",
            "logprobs": {"content": [
                {"token": "Paris", "logprob": -0.5},
                {"token": "<|im_end|>", "logprob": -0.01}
            ]}
        }]
    });
    let srv = serve(vec![(200, body.to_string())]);
    let gen = HttpGenerator::new(client(&srv.url, 0), "m", WireApi::Chat);
    let out = gen.complete(&GenerationRequest::new("Q?", 8)).unwrap();
    assert_eq!(out.logprobs().collect::<Vec<_>>(), [-0.5]);
    assert_eq!(out.finish_reason, FinishReason::Length);
    let req = &srv.requests.lock().unwrap()[0];
    assert_eq!(req["messages"][0]["content"], "Q?");
    assert_eq!(req["logprobs"], true);
}

#[test]
fn base10_logprobs_are_converted() {
    let body = json!({"choices": [{"text": "x", "finish_reason": "stop",
        "logprobs": {"tokens": ["x"], "token_logprobs": [-1.0]}}]});
    let srv = serve(vec![(200, body.to_string())]);
    let gen = HttpGenerator::new(client(&srv.url, 0), "m", WireApi::Completions).with_base10_logprobs();
    let out = gen.complete(&GenerationRequest::new("Q?", 8)).unwrap();
    assert!((out.token_logprobs[0].logprob + std::f64::consts::LN_10).abs() < 1e-12);
}

#[test]
fn server_errors_are_retried() {
    let ok = json!({"choices": [{"text": "x", "finish_reason": "stop", "logprobs": null}]});
    let srv = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, ok.to_string()),
    ]);
    let gen = HttpGenerator::new(client(&srv.url, 3), "m", WireApi::Completions);
    let out = gen.complete(&GenerationRequest::new("Q?", 8)).unwrap();
    assert_eq!(out.text, "x");
    assert!(out.token_logprobs.is_empty());
    assert_eq!(srv.requests.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_fail_fast() {
    let srv = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
    let gen = HttpGenerator::new(client(&srv.url, 3), "m", WireApi::Completions);
    let err = gen.complete(&GenerationRequest::new("Q?", 8)).unwrap_err();
    assert_eq!(err.category().as_str(), "backend");
    assert!(err.to_string().contains("400"));
}

#[test]
fn embeddings_are_reordered_by_index() {
    let body = json!({"data": [
        {"index": 1, "embedding": [0.0, 2.0]},
        {"index": 0, "embedding": [3.0, 4.0]}
    ]});
    let srv = serve(vec![(200, body.to_string())]);
    let emb = HttpEmbedder::new(client(&srv.url, 0), "e");
    let out = emb.embed_batch(&["a".into(), "b".into()]).unwrap();
    assert_eq!(out, vec![vec![3.0, 4.0], vec![0.0, 2.0]]);
    let req = &srv.requests.lock().unwrap()[0];
    assert_eq!(req["input"], json!(["a", "b"]));
    assert_eq!(req["model"], "e");
}
