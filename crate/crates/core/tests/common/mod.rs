#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[derive(Debug, Clone)]
pub struct Seen {
    pub body: Value,
    pub authorization: Option<String>,
    pub at: Instant,
}

type Handler = dyn Fn(&Value, usize) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering POSTs through a handler; one request per connection.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Seen>>>,
    pub max_concurrent: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
}

impl StubServer {
    pub fn start(handler: impl Fn(&Value, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        Self::start_with_delay(Duration::ZERO, handler)
    }

    pub fn start_with_delay(
        delay: Duration,
        handler: impl Fn(&Value, usize) -> (u16, String) + Send + Sync + 'static,
    ) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let max_concurrent = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        {
            let (requests, stop, max_concurrent) = (requests.clone(), stop.clone(), max_concurrent.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (requests, handler, active, max_concurrent) =
                        (requests.clone(), handler.clone(), active.clone(), max_concurrent.clone());
                    thread::spawn(move || {
                        let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                        max_concurrent.fetch_max(now, Ordering::SeqCst);
                        serve(stream, &requests, handler.as_ref(), delay);
                        active.fetch_sub(1, Ordering::SeqCst);
                    });
                }
            });
        }
        StubServer {
            url: format!("http://{addr}/v1/chat/completions"),
            requests,
            max_concurrent,
            stop,
            addr,
        }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn seen(&self) -> Vec<Seen> {
        self.requests.lock().unwrap().clone()
    }

    pub fn count_stage(&self, stage: Stage) -> usize {
        self.seen().iter().filter(|s| stage_of(&s.body) == stage).count()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

fn serve(stream: TcpStream, requests: &Mutex<Vec<Seen>>, handler: &Handler, delay: Duration) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = None;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap_or(0),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let index = {
        let mut r = requests.lock().unwrap();
        r.push(Seen {
            body: body.clone(),
            authorization: auth,
            at: Instant::now(),
        });
        r.len() - 1
    };
    if !delay.is_zero() {
        thread::sleep(delay);
    }
    let (status, text) = handler(&body, index);
    let reason = if status < 400 { "OK" } else { "Error" };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.flush();
}

pub fn completion(content: &str) -> String {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Caption,
    Reasoning,
    Meta,
    Reminder,
    Validation,
    Unknown,
}

fn last_user_text(body: &Value) -> (String, bool) {
    let msgs = body["messages"].as_array().cloned().unwrap_or_default();
    let last = msgs.iter().rev().find(|m| m["role"] == "user");
    match last.map(|m| &m["content"]) {
        Some(Value::String(s)) => (s.clone(), false),
        Some(Value::Array(parts)) => (
            parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
            true,
        ),
        _ => (String::new(), false),
    }
}

pub fn stage_of(body: &Value) -> Stage {
    let (text, image) = last_user_text(body);
    if image {
        Stage::Caption
    } else if text.contains("could not be parsed") {
        Stage::Reminder
    } else if text.contains("Reply with a single JSON object") {
        Stage::Meta
    } else if text.contains("Explain step by step") {
        Stage::Reasoning
    } else if text.contains("Reply with ACCEPT") {
        Stage::Validation
    } else {
        Stage::Unknown
    }
}

pub fn field(text: &str, label: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(label))
        .unwrap_or("")
        .trim()
        .to_string()
}

/// Well-behaved agents: captions and reasoning echo the question, the meta
/// agent writes three distinct variants and the validator accepts everything
/// except levels listed in `reject`.
pub fn agents_handler(reject: &'static [&'static str]) -> impl Fn(&Value, usize) -> (u16, String) + Send + Sync {
    move |body, _| {
        let (text, _) = last_user_text(body);
        let reply = match stage_of(body) {
            Stage::Caption => format!("Axial image. Context: {}", field(&text, "Question asked about the image (for context only):")),
            Stage::Reasoning => format!("The finding answers `{}`.", field(&text, "Question:")),
            Stage::Meta | Stage::Reminder => {
                let q = field(&text, "Original question:");
                let a = field(&text, "Answer:");
                json!({
                    "word": {"question": format!("{q} (word)"), "answer": a},
                    "sentence": {"question": format!("Tell me: {q}"), "answer": a},
                    "semantic": {"question": format!("Regarding the image, {q}"), "answer": a},
                })
                .to_string()
            }
            Stage::Validation => {
                let level = text
                    .lines()
                    .find_map(|l| l.strip_prefix("Reworded (").and_then(|r| r.split_once(')')).map(|(lv, _)| lv.to_string()))
                    .unwrap_or_default();
                if reject.contains(&level.as_str()) {
                    "REJECT: needs outside knowledge".to_string()
                } else {
                    "ACCEPT".to_string()
                }
            }
            Stage::Unknown => return (400, "{}".into()),
        };
        (200, completion(&reply))
    }
}

/// Agents file pointing all three roles at `url`.
pub fn agents_toml(url: &str, extra_pipeline: &str, agent_extra: &str) -> String {
    let mut s = format!("[pipeline]\n{extra_pipeline}\n");
    for role in ["caption", "reasoning", "meta"] {
        s.push_str(&format!(
            "\n[agents.{role}]\nendpoint = \"{url}\"\nmodel = \"stub-{role}\"\nrate_limit = 1000.0\nbackoff_ms = 0\n{agent_extra}\n"
        ));
    }
    s
}

/// Copies the 20-item fixture next to tiny placeholder images.
pub fn items_with_images(dir: &Path, n: usize) -> PathBuf {
    let text = std::fs::read_to_string(fixture("items20.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().take(n).collect();
    std::fs::create_dir_all(dir.join("images")).unwrap();
    for l in &lines {
        let v: Value = serde_json::from_str(l).unwrap();
        let img = v["image_ref"].as_str().unwrap();
        std::fs::write(dir.join(img), [0x89, b'P', b'N', b'G', 0, 1, 2]).unwrap();
    }
    let path = dir.join("items.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}
