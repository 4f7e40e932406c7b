use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use macfair_core::gateway::{GatewayError, HttpBackend, RequestContext};
use macfair_core::{AnswerKey, Benchmark, CompletionBackend, CompletionRequest, ModelEndpoint, PromptVariant, QuestionInstance};
use serde_json::{json, Value};

#[derive(Default)]
struct Stub {
    calls: AtomicUsize,
    /// Number of leading calls answered with 429.
    throttle_first: usize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    delay_ms: u64,
}

async fn completions(State(stub): State<Arc<Stub>>, Json(body): Json<Value>) -> Response {
    let n = stub.calls.fetch_add(1, Ordering::SeqCst);
    if n < stub.throttle_first {
        return (StatusCode::TOO_MANY_REQUESTS, "slow down").into_response();
    }
    let now = stub.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stub.peak.fetch_max(now, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(stub.delay_ms)).await;
    stub.in_flight.fetch_sub(1, Ordering::SeqCst);
    let user = body["messages"][1]["content"].as_str().unwrap_or_default().to_string();
    let model = body["model"].as_str().unwrap_or_default();
    Json(json!({"choices": [{"message": {"role": "assistant", "content": format!("{model}::{user}")}}]})).into_response()
}

async fn serve(stub: Arc<Stub>) -> String {
    let app = Router::new().route("/v1/chat/completions", post(completions)).with_state(stub);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

fn endpoint(url: &str) -> ModelEndpoint {
    let mut e = ModelEndpoint::new("stub", url, "org/stub-model");
    e.backoff_base_ms = 1;
    e.api_key_env = None;
    e
}

fn request(user: &str) -> CompletionRequest {
    let question = Arc::new(QuestionInstance {
        id: "q".into(),
        benchmark: Benchmark::Bbq,
        subcategory: "Age".into(),
        context: String::new(),
        question: "Who?".into(),
        choices: vec!["a".into(), "b".into()],
        key: AnswerKey::default(),
    });
    CompletionRequest {
        system: "You are an AI assistant.".into(),
        user: user.into(),
        context: RequestContext {
            key: user.into(),
            question,
            variant: PromptVariant::CONVERSATION_DEFAULT,
            round: 0,
            agent_index: 0,
            previous_answers: Vec::new(),
            condition: None,
            attempt: 1,
        },
    }
}

#[tokio::test]
async fn echo_round_trip() {
    let url = serve(Arc::new(Stub::default())).await;
    let backend = HttpBackend::new(endpoint(&url)).unwrap();
    assert_eq!(backend.model(), "stub");
    let out = backend.complete(&request("hello")).await.unwrap();
    assert_eq!(out, "org/stub-model::hello");
    assert_eq!(backend.attempts(), 1);
}

#[tokio::test]
async fn throttled_twice_then_ok_takes_three_attempts() {
    let stub = Arc::new(Stub { throttle_first: 2, ..Stub::default() });
    let url = serve(stub.clone()).await;
    let backend = HttpBackend::new(endpoint(&url)).unwrap();
    let out = backend.complete(&request("retry me")).await.unwrap();
    assert_eq!(out, "org/stub-model::retry me");
    assert_eq!(backend.attempts(), 3);
    assert_eq!(stub.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn throttling_beyond_the_retry_budget_surfaces_the_status() {
    let stub = Arc::new(Stub { throttle_first: 10, ..Stub::default() });
    let url = serve(stub).await;
    let mut e = endpoint(&url);
    e.max_retries = 1;
    let backend = HttpBackend::new(e).unwrap();
    assert_eq!(backend.complete(&request("x")).await, Err(GatewayError::HttpStatus(429)));
    assert_eq!(backend.attempts(), 2);
}

#[tokio::test]
async fn unreachable_host_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let mut e = endpoint(&format!("http://127.0.0.1:{port}"));
    e.max_retries = 1;
    let backend = HttpBackend::new(e).unwrap();
    let err = backend.complete(&request("x")).await.unwrap_err();
    assert!(matches!(err, GatewayError::Transport(_)), "{err:?}");
    assert_eq!(backend.attempts(), 2);
}

#[tokio::test]
async fn in_flight_requests_respect_the_endpoint_limit_without_cross_talk() {
    let stub = Arc::new(Stub { delay_ms: 30, ..Stub::default() });
    let url = serve(stub.clone()).await;
    let mut e = endpoint(&url);
    e.max_concurrency = 3;
    let backend = Arc::new(HttpBackend::new(e).unwrap());
    let tasks: Vec<_> = (0..24)
        .map(|i| {
            let b = backend.clone();
            tokio::spawn(async move { (i, b.complete(&request(&format!("msg-{i}"))).await) })
        })
        .collect();
    for t in tasks {
        let (i, out) = t.await.unwrap();
        assert_eq!(out.unwrap(), format!("org/stub-model::msg-{i}"));
    }
    let peak = stub.peak.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak {peak}");
    assert!(peak >= 2, "requests never overlapped");
}

#[test]
fn bad_endpoints_are_rejected_before_any_request() {
    assert!(HttpBackend::new(endpoint("ftp://host")).is_err());
    assert!(HttpBackend::new(endpoint("not a url")).is_err());
    let mut e = endpoint("http://h");
    e.temperature = 3.0;
    assert!(matches!(HttpBackend::new(e), Err(GatewayError::InvalidEndpoint(_))));
    assert_eq!(endpoint("http://h/v1/").completions_url(), "http://h/v1/chat/completions");
    assert_eq!(endpoint("http://h").completions_url(), "http://h/v1/chat/completions");
}
