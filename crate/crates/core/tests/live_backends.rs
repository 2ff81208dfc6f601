//! HTTP clients against an in-process fake of each service.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use keyfield::backends::live::{MaskRle, SegmenterResponse};
use keyfield::backends::{
    BackendConfig, BackendError, BackendHealth, BackendMode, Backends, ChatMessage, RetryPolicy,
};
use keyfield::{Bbox, Mask};
use serde_json::{json, Value};

type Handler = Arc<dyn Fn(usize, &HeaderMap, &Bytes) -> Response + Send + Sync>;

#[derive(Clone)]
struct Fake {
    calls: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<(HeaderMap, Bytes)>>>,
    handler: Handler,
}

async fn handle(State(f): State<Fake>, headers: HeaderMap, body: Bytes) -> Response {
    let n = f.calls.fetch_add(1, Ordering::SeqCst);
    let resp = (f.handler)(n, &headers, &body);
    f.seen.lock().unwrap().push((headers, body));
    resp
}

async fn serve(handler: Handler) -> (String, Fake) {
    let fake = Fake {
        calls: Arc::new(AtomicUsize::new(0)),
        seen: Arc::new(Mutex::new(Vec::new())),
        handler,
    };
    let app = Router::new()
        .route("/", post(handle).get(|| async { StatusCode::METHOD_NOT_ALLOWED }))
        .with_state(fake.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/"), fake)
}

fn config() -> BackendConfig {
    BackendConfig {
        mode: BackendMode::Live,
        retry: RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(1),
        },
        request_timeout: Duration::from_secs(5),
        health_timeout: Duration::from_millis(500),
        ..BackendConfig::default()
    }
}

fn with_chat(url: &str) -> Backends {
    let mut c = config();
    c.chat_endpoint = Some(url.into());
    c.chat_api_key = Some("sk-test".into());
    Backends::from_config(&c).unwrap()
}

fn completion(text: &str) -> Response {
    Json(json!({"choices": [{"message": {"role": "assistant", "content": text}}]})).into_response()
}

fn png(w: u32, h: u32) -> Vec<u8> {
    let img = image::RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

#[tokio::test]
async fn chat_retries_server_errors_then_succeeds() {
    let (url, fake) = serve(Arc::new(|n, _, _| match n {
        0 => StatusCode::SERVICE_UNAVAILABLE.into_response(),
        1 => StatusCode::TOO_MANY_REQUESTS.into_response(),
        _ => completion("{\"Answer\":\"Yes\"}"),
    }))
    .await;
    let b = with_chat(&url);
    let msgs = [ChatMessage::system("s"), ChatMessage::user("q")];
    let ex = b.chat.complete(&msgs).await.unwrap();
    assert_eq!(ex.reply, "{\"Answer\":\"Yes\"}");
    assert_eq!(ex.meta.retries, 2);
    assert_eq!(fake.calls.load(Ordering::SeqCst), 3);

    let seen = fake.seen.lock().unwrap();
    let (headers, body) = &seen[2];
    assert_eq!(headers["authorization"], "Bearer sk-test");
    let body: Value = serde_json::from_slice(body).unwrap();
    assert_eq!(body["model"], "gpt-4");
    assert_eq!(body["messages"][0], json!({"role": "system", "content": "s"}));
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "q"}));
}

#[tokio::test]
async fn chat_gives_up_after_retry_budget() {
    let (url, fake) = serve(Arc::new(|_, _, _| StatusCode::BAD_GATEWAY.into_response())).await;
    let err = with_chat(&url)
        .chat
        .complete(&[ChatMessage::user("q")])
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::Transport { backend: "chat", retries: 2, .. }));
    assert!(err.is_unavailable());
    assert_eq!(fake.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn chat_client_errors_are_not_retried() {
    let (url, fake) = serve(Arc::new(|_, _, _| {
        (StatusCode::BAD_REQUEST, "bad model").into_response()
    }))
    .await;
    let err = with_chat(&url)
        .chat
        .complete(&[ChatMessage::user("q")])
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::Protocol { backend: "chat", .. }));
    assert_eq!(fake.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn chat_reply_without_content_is_a_protocol_error() {
    let (url, _) = serve(Arc::new(|_, _, _| Json(json!({"choices": []})).into_response())).await;
    let err = with_chat(&url).chat.complete(&[ChatMessage::user("q")]).await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol { .. }));
}

#[tokio::test]
async fn segmenter_decodes_run_lengths() {
    let a = Mask::from_fn(6, 4, |x, y| x < 3 && y < 2);
    let b = Mask::from_fn(6, 4, |x, y| (x + y) % 2 == 0);
    let body = SegmenterResponse {
        width: 6,
        height: 4,
        masks: vec![MaskRle::encode(&a), MaskRle { counts: vec![24] }, MaskRle::encode(&b)],
    };
    let payload = serde_json::to_value(&body).unwrap();
    let (url, fake) = serve(Arc::new(move |_, _, _| Json(payload.clone()).into_response())).await;
    let mut c = config();
    c.segmenter_endpoint = Some(url);
    let backends = Backends::from_config(&c).unwrap();
    let image = png(6, 4);
    let segs = backends.segmenter.segment(&image).await.unwrap();
    // the all-empty mask is dropped and ids stay dense
    assert_eq!(segs.len(), 2);
    assert_eq!((segs[0].id(), segs[0].mask()), (1, &a));
    assert_eq!((segs[1].id(), segs[1].mask()), (2, &b));
    assert_eq!(&fake.seen.lock().unwrap()[0].1[..], &image[..]);
}

#[tokio::test]
async fn segmenter_rejects_wrong_dimensions() {
    let (url, _) = serve(Arc::new(|_, _, _| {
        Json(json!({"width": 5, "height": 4, "masks": []})).into_response()
    }))
    .await;
    let mut c = config();
    c.segmenter_endpoint = Some(url);
    let err = Backends::from_config(&c)
        .unwrap()
        .segmenter
        .segment(&png(6, 4))
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::Protocol { backend: "segmenter", .. }));
}

#[tokio::test]
async fn captioner_crops_and_retries_empty_caption() {
    let (url, fake) = serve(Arc::new(|n, _, _| {
        let text = if n == 0 { "  " } else { "a door\nwith a handle" };
        Json(json!({"captionResult": {"text": text, "confidence": 0.8}})).into_response()
    }))
    .await;
    let mut c = config();
    c.caption_endpoint = Some(url);
    c.caption_api_key = Some("cap-key".into());
    let b = Backends::from_config(&c).unwrap();
    let cap = b
        .captioner
        .caption(&png(40, 30), Some(Bbox::new(5, 6, 14, 25)))
        .await
        .unwrap();
    assert_eq!(cap.text, "a door with a handle");
    assert_eq!(fake.calls.load(Ordering::SeqCst), 2);
    let seen = fake.seen.lock().unwrap();
    assert_eq!(seen[0].0["ocp-apim-subscription-key"], "cap-key");
    let crop = image::load_from_memory(&seen[0].1).unwrap();
    assert_eq!((crop.width(), crop.height()), (10, 20));
}

#[tokio::test]
async fn captioner_empty_twice_is_an_error() {
    let (url, _) = serve(Arc::new(|_, _, _| {
        Json(json!({"description": {"captions": []}})).into_response()
    }))
    .await;
    let mut c = config();
    c.caption_endpoint = Some(url);
    let err = Backends::from_config(&c)
        .unwrap()
        .captioner
        .caption(&png(4, 4), None)
        .await
        .unwrap_err();
    assert_eq!(err, BackendError::EmptyCaption);
}

#[tokio::test]
async fn unconfigured_backends_say_so() {
    let b = Backends::from_config(&config()).unwrap();
    assert_eq!(b.chat.health().await, BackendHealth::Unconfigured);
    assert_eq!(b.segmenter.health().await, BackendHealth::Unconfigured);
    assert_eq!(b.captioner.health().await, BackendHealth::Unconfigured);
    assert!(matches!(
        b.segmenter.segment(&png(2, 2)).await,
        Err(BackendError::Unconfigured { backend: "segmenter" })
    ));
}

#[tokio::test]
async fn health_reports_up_and_down() {
    let (url, _) = serve(Arc::new(|_, _, _| completion("x"))).await;
    assert_eq!(with_chat(&url).chat.health().await, BackendHealth::Ok);

    // a port nobody listens on
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dead = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let b = with_chat(&dead);
    assert_eq!(b.chat.health().await, BackendHealth::Down);
    let err = b.chat.complete(&[ChatMessage::user("q")]).await.unwrap_err();
    assert!(matches!(err, BackendError::Transport { retries: 2, .. }));
}
