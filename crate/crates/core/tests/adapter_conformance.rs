mod common;

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::Value;
use vlngen_core::grounding::{ActionClient, ClientError, HttpActionClient, HttpLabelClient, ImageInput, LabelClient};
use vlngen_core::RoomLexicon;

use common::{FakeServer, Reply};

#[derive(Debug, Deserialize)]
struct Case {
    name: String,
    request: Option<Value>,
    client_request: bool,
    response: Response,
    expect: Value,
}

#[derive(Debug, Deserialize, Clone)]
struct Response {
    status: u16,
    body: Option<Value>,
    raw: Option<String>,
}

impl Response {
    fn reply(&self) -> Reply {
        match (&self.body, &self.raw) {
            (Some(b), _) => Reply::json(self.status, b.clone()),
            (None, Some(r)) => Reply::raw(self.status, r.clone()),
            (None, None) => Reply::raw(self.status, ""),
        }
    }
}

fn load(name: &str) -> Vec<Case> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/adapter").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn server_for(case: &Case) -> FakeServer {
    let resp = case.response.clone();
    FakeServer::start(move |_, _| resp.reply())
}

fn error_name(e: &ClientError) -> &'static str {
    match e {
        ClientError::Unavailable(_) => "unavailable",
        ClientError::BadResponse(_) => "bad_response",
    }
}

fn decode(v: Option<&Value>) -> Vec<u8> {
    v.and_then(Value::as_str)
        .and_then(|s| base64::engine::general_purpose::STANDARD.decode(s).ok())
        .unwrap_or_default()
}

const TIMEOUT: Duration = Duration::from_secs(5);

#[test]
fn corpus_sizes() {
    for (file, min) in [("label.json", 20), ("action.json", 20), ("health.json", 20)] {
        let cases = load(file);
        assert!(cases.len() >= min, "{file}: {} cases", cases.len());
        let mut names: Vec<_> = cases.iter().map(|c| c.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), cases.len(), "{file}: duplicate names");
    }
}

#[test]
fn label_fixtures() {
    let lex = RoomLexicon::builtin();
    for case in load("label.json") {
        let server = server_for(&case);
        let client = HttpLabelClient::new(&server.url, TIMEOUT, lex.clone());
        let req = case.request.as_ref().unwrap();
        let key = req.get("key").and_then(Value::as_str).unwrap_or("video9/f999").to_string();
        let bytes = decode(req.get("image"));
        let got = client.label(ImageInput { key: &key, bytes: &bytes });

        let sent = &server.recorded()[0];
        assert_eq!((sent.method.as_str(), sent.path.as_str()), ("POST", "/label"), "{}", case.name);
        if case.client_request {
            assert_eq!(&sent.json(), req, "{}: request body", case.name);
        }
        match (&got, case.expect.get("ok"), case.expect.get("error")) {
            (Ok(label), Some(ok), None) => {
                assert_eq!(label.room_type.as_str(), ok["room_type"], "{}", case.name);
                assert_eq!(serde_json::to_value(&label.objects).unwrap(), ok["objects"], "{}", case.name);
                assert_eq!(label.room_confidence, ok["room_confidence"].as_f64().unwrap(), "{}", case.name);
            }
            (Err(e), None, Some(err)) => assert_eq!(error_name(e), err, "{}: {e}", case.name),
            other => panic!("{}: unexpected outcome {other:?}", case.name),
        }
    }
}

#[test]
fn action_fixtures() {
    for case in load("action.json") {
        let server = server_for(&case);
        let client = HttpActionClient::new(&server.url, TIMEOUT);
        let req = case.request.as_ref().unwrap();
        let key = |k: &str| req.get(k).and_then(Value::as_str).unwrap_or("video9/f999").to_string();
        let (ka, kb) = (key("key_a"), key("key_b"));
        let (ba, bb) = (decode(req.get("image_a")), decode(req.get("image_b")));
        let got = client.infer(ImageInput { key: &ka, bytes: &ba }, ImageInput { key: &kb, bytes: &bb });

        let sent = &server.recorded()[0];
        assert_eq!((sent.method.as_str(), sent.path.as_str()), ("POST", "/action"), "{}", case.name);
        if case.client_request {
            assert_eq!(&sent.json(), req, "{}: request body", case.name);
        }
        match (&got, case.expect.get("ok"), case.expect.get("error")) {
            (Ok(action), Some(ok), None) => assert_eq!(action.to_string(), ok["action"], "{}", case.name),
            (Err(e), None, Some(err)) => assert_eq!(error_name(e), err, "{}: {e}", case.name),
            other => panic!("{}: unexpected outcome {other:?}", case.name),
        }
    }
}

#[test]
fn health_fixtures() {
    for case in load("health.json") {
        assert!(case.request.is_none());
        let server = server_for(&case);
        let via_label = HttpLabelClient::new(&server.url, TIMEOUT, RoomLexicon::builtin()).health();
        let via_action = HttpActionClient::new(&server.url, TIMEOUT).health();
        for (got, sent) in [via_label, via_action].iter().zip(server.recorded()) {
            assert_eq!((sent.method.as_str(), sent.path.as_str()), ("GET", "/health"), "{}", case.name);
            match (got, case.expect.get("ok"), case.expect.get("error")) {
                (Ok(h), Some(ok), None) => assert_eq!(&serde_json::to_value(h).unwrap(), ok, "{}", case.name),
                (Err(e), None, Some(err)) => assert_eq!(error_name(e), err, "{}: {e}", case.name),
                other => panic!("{}: unexpected outcome {other:?}", case.name),
            }
        }
    }
}

#[test]
fn unreachable_service_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = HttpLabelClient::new(&url, TIMEOUT, RoomLexicon::builtin())
        .label(ImageInput { key: "v/f000", bytes: b"x" })
        .unwrap_err();
    assert_eq!(error_name(&err), "unavailable");
}
