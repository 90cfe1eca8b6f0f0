//! HTTP backend behavior against a scripted local server: bearer credential
//! propagation, retry-with-backoff on throttling, and non-retryable
//! rejection. No external network involved.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::{Duration, Instant};

use pskit_core::gateway::{
    BackendConfig, ChatRequest, Gateway, GatewayError, ModelParams, API_KEY_ENV,
};

/// One recorded request: the authorization header and when it arrived.
struct Seen {
    authorization: Option<String>,
    at: Instant,
}

/// Serve `replies` verbatim (status line + optional JSON body), one per
/// connection, recording each request. Returns the endpoint and the
/// join handle yielding the observations.
fn scripted_server(
    replies: Vec<(u16, Option<String>)>,
) -> (String, std::thread::JoinHandle<Vec<Seen>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);

            let mut authorization = None;
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((key, value)) = line.split_once(':') {
                    match key.to_ascii_lowercase().as_str() {
                        "authorization" => authorization = Some(value.trim().to_string()),
                        "content-length" => content_length = value.trim().parse().unwrap(),
                        _ => {}
                    }
                }
            }
            let mut request_body = vec![0u8; content_length];
            reader.read_exact(&mut request_body).unwrap();
            seen.push(Seen { authorization, at: Instant::now() });

            let reason = match status {
                200 => "OK",
                429 => "Too Many Requests",
                _ => "Bad Request",
            };
            let body = body.unwrap_or_default();
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nconnection: close\r\n\
                 content-type: application/json\r\ncontent-length: {}\r\n\r\n{body}",
                body.len()
            );
            reader.into_inner().write_all(response.as_bytes()).unwrap();
        }
        seen
    });
    (endpoint, handle)
}

fn completion_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 5, "completion_tokens": 7},
    })
    .to_string()
}

#[test]
fn http_backend_auth_retry_and_rejection() {
    // Both sections construct gateways after this point; the backend reads
    // the credential at construction.
    std::env::set_var(API_KEY_ENV, "test-key-123");
    let params = ModelParams::named("remote-model");
    let req = ChatRequest::single_user(&params, "ping");

    // Two throttles, then success: three attempts, geometric backoff,
    // credential on every attempt.
    let (endpoint, server) = scripted_server(vec![
        (429, None),
        (429, None),
        (200, Some(completion_body("<think>pong</think>ok"))),
    ]);
    let mut cfg = BackendConfig::http(&endpoint);
    cfg.max_retries = 2;
    cfg.backoff_base_ms = 60;
    let gateway = Gateway::new(&cfg).unwrap();

    let response = gateway.complete_chat(&req).unwrap();
    assert_eq!(response.content, "<think>pong</think>ok");
    assert_eq!(response.usage.prompt_tokens, 5);
    assert_eq!(response.usage.completion_tokens, 7);

    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 3, "two retries after the initial attempt");
    for s in &seen {
        assert_eq!(s.authorization.as_deref(), Some("Bearer test-key-123"));
    }
    // Backoff doubles per retry: >= base before attempt 2, >= 2x base
    // before attempt 3. Only lower bounds are asserted; a loaded host can
    // stretch the gaps but never shrink them.
    let gap1 = seen[1].at - seen[0].at;
    let gap2 = seen[2].at - seen[1].at;
    assert!(gap1 >= Duration::from_millis(60), "first backoff too short: {gap1:?}");
    assert!(gap2 >= Duration::from_millis(120), "second backoff too short: {gap2:?}");

    // A 4xx other than 429 is rejected outright: one attempt, no retries.
    let (endpoint, server) = scripted_server(vec![(400, None)]);
    let mut cfg = BackendConfig::http(&endpoint);
    cfg.max_retries = 2;
    cfg.backoff_base_ms = 60;
    let gateway = Gateway::new(&cfg).unwrap();

    match gateway.complete_chat(&req) {
        Err(GatewayError::Rejected(message)) => assert!(message.contains("400"), "{message}"),
        other => panic!("expected rejection, got {other:?}"),
    }
    assert_eq!(server.join().unwrap().len(), 1, "rejections must not retry");
}
