#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlngen_core::frames::NoImages;
use vlngen_core::gateway::{Gateway, GatewayConfig};
use vlngen_core::*;

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Recorded {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).expect("request body is JSON")
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

pub struct Reply {
    pub status: u16,
    pub body: String,
    /// Sleep before answering.
    pub delay: Duration,
}

impl Reply {
    pub fn json(status: u16, body: serde_json::Value) -> Self {
        Self::raw(status, body.to_string())
    }

    pub fn raw(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }
}

type Handler = dyn Fn(usize, &Recorded) -> Reply + Send + Sync;

/// Minimal HTTP/1.1 server on a loopback port. Each connection carries one
/// request; the handler sees the request index and the parsed request.
pub struct FakeServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    _thread: JoinHandle<()>,
}

fn read_request(stream: &mut TcpStream) -> Option<Recorded> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Recorded {
        method,
        path,
        headers,
        body,
    })
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

impl FakeServer {
    pub fn start(handler: impl Fn(usize, &Recorded) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        let thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let log = log.clone();
                let handler = handler.clone();
                std::thread::spawn(move || {
                    let Some(req) = read_request(&mut stream) else { return };
                    let index = {
                        let mut l = log.lock().unwrap();
                        l.push(req.clone());
                        l.len() - 1
                    };
                    let reply = handler(index, &req);
                    std::thread::sleep(reply.delay);
                    let head = format!(
                        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                        reply.status,
                        reason(reply.status),
                        reply.body.len()
                    );
                    let _ = stream.write_all(head.as_bytes());
                    let _ = stream.write_all(reply.body.as_bytes());
                });
            }
        });
        Self {
            url,
            requests,
            _thread: thread,
        }
    }

    pub fn recorded(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

/// Object names that never collide with the room or action lexicons.
pub const OBJECTS: &[&str] = &[
    "sofa", "television", "stove", "sink", "bed", "lamp", "desk", "chair", "bathtub", "mirror", "rug", "bookshelf",
    "painting", "plant", "fridge", "oven", "dresser", "piano", "washer", "shelves",
];

/// Grounded trajectory with `k` room nodes, consecutive rooms distinct and
/// zero to two transition nodes between rooms.
pub fn random_trajectory(rng: &mut ChaCha8Rng, id: &str, k: usize) -> Trajectory {
    let lex = RoomLexicon::builtin();
    let rooms = lex.rooms();
    let mut nodes = Vec::new();
    let mut frame = 0u32;
    let mut prev: Option<&RoomType> = None;
    for i in 0..k {
        let room = loop {
            let r = rooms.choose(rng).unwrap();
            if Some(r) != prev {
                break r;
            }
        };
        prev = Some(room);
        let n_obj = rng.random_range(0..=2);
        let objects: Vec<String> = OBJECTS.choose_multiple(rng, n_obj).map(|s| s.to_string()).collect();
        let mut node = TrajectoryNode::room(FrameRef::new("vid", frame, frame as f64 * 0.5));
        node.label = Some(RoomLabel::new(room.clone(), objects, rng.random_range(0.6..=1.0)).unwrap());
        node.action = Some(if i + 1 == k {
            Action::Stop
        } else {
            *Action::MOVES.choose(rng).unwrap()
        });
        nodes.push(node);
        frame += 1;
        if i + 1 < k {
            for _ in 0..rng.random_range(0..=2) {
                nodes.push(TrajectoryNode::transition(FrameRef::new("vid", frame, frame as f64 * 0.5)));
                frame += 1;
            }
        }
    }
    Trajectory::new(id, "vid", nodes, 0, RoomBounds::default()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gateway(cfg: GatewayConfig) -> Gateway {
    let cfg = GatewayConfig {
        retry_base_delay_ms: 0,
        ..cfg
    };
    Gateway::new(&cfg, &Vocabulary::builtin(), Arc::new(NoImages)).unwrap()
}

pub fn pick_granularity(rng: &mut ChaCha8Rng) -> Granularity {
    *Granularity::ALL.choose(rng).unwrap()
}
