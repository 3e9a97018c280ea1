//! Static HTTP server for traces, web assets and the human-study guess log.

use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use covert_leader::evalkit::TraceIndex;
use covert_leader::Error;
use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, StatusCode};

/// One human guess, as posted by the web client.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guess {
    pub trace_id: String,
    pub guess_index: usize,
    pub guess_time_step: usize,
    pub elapsed_ms: f64,
    pub session_id: String,
}

pub struct Server {
    http: tiny_http::Server,
    traces: PathBuf,
    static_dir: Option<PathBuf>,
    guesses: PathBuf,
    /// Serializes appends so concurrent posts never interleave lines.
    log_lock: Mutex<()>,
}

impl Server {
    pub fn bind(port: u16, traces: PathBuf, static_dir: Option<PathBuf>, guesses: PathBuf) -> covert_leader::Result<Self> {
        if !traces.is_dir() {
            return Err(Error::Argument(format!("trace directory {} does not exist", traces.display())));
        }
        let http = tiny_http::Server::http(("0.0.0.0", port))
            .map_err(|e| Error::Argument(format!("cannot listen on port {port}: {e}")))?;
        Ok(Self {
            http,
            traces,
            static_dir,
            guesses,
            log_lock: Mutex::new(()),
        })
    }

    pub fn addr(&self) -> String {
        self.http.server_addr().to_string()
    }

    /// Blocks forever, handling requests on `threads` workers.
    pub fn run(self, threads: usize) {
        let me = Arc::new(self);
        let workers: Vec<_> = (0..threads)
            .map(|_| {
                let me = Arc::clone(&me);
                std::thread::spawn(move || {
                    for req in me.http.incoming_requests() {
                        me.handle(req);
                    }
                })
            })
            .collect();
        for w in workers {
            let _ = w.join();
        }
    }

    fn handle(&self, mut req: Request) {
        let url = req.url().split('?').next().unwrap_or("/").to_string();
        let response = match (req.method(), url.as_str()) {
            (Method::Post, "/guesses") => self.post_guess(&mut req),
            (Method::Get, "/traces/index.json") => match TraceIndex::load_or_default(&self.traces) {
                Ok(index) => json(&index),
                Err(e) => text(500, &e.to_string()),
            },
            (Method::Get, path) if path.starts_with("/traces/") => self.file(&self.traces, &path["/traces/".len()..]),
            (Method::Get, path) => match &self.static_dir {
                Some(dir) => {
                    let rel = path.trim_start_matches('/');
                    self.file(dir, if rel.is_empty() { "index.html" } else { rel })
                }
                None => text(404, "not found"),
            },
            _ => text(405, "method not allowed"),
        };
        if let Err(e) = req.respond(response) {
            log::warn!("failed to send response: {e}");
        }
    }

    fn post_guess(&self, req: &mut Request) -> Response<std::io::Cursor<Vec<u8>>> {
        let mut body = Vec::new();
        if req.as_reader().take(64 * 1024).read_to_end(&mut body).is_err() {
            return text(400, "unreadable body");
        }
        let guess: Guess = match serde_json::from_slice(&body) {
            Ok(g) => g,
            Err(e) => return text(400, &format!("bad guess record: {e}")),
        };
        match self.append(&guess) {
            Ok(()) => Response::from_data(Vec::new()).with_status_code(204),
            Err(e) => text(500, &e.to_string()),
        }
    }

    fn append(&self, guess: &Guess) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(guess).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let _held = self.log_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(&self.guesses)?;
        f.write_all(&line)?;
        f.sync_data()
    }

    fn file(&self, root: &Path, rel: &str) -> Response<std::io::Cursor<Vec<u8>>> {
        let rel = Path::new(rel);
        if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return text(400, "bad path");
        }
        match std::fs::read(root.join(rel)) {
            Ok(bytes) => Response::from_data(bytes).with_header(content_type(rel)),
            Err(_) => text(404, "not found"),
        }
    }
}

fn content_type(path: &Path) -> Header {
    let ct = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => "application/json",
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("svg") => "image/svg+xml",
        Some("csv") => "text/csv",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    };
    Header::from_bytes("Content-Type", ct).expect("static header")
}

fn json<T: Serialize>(value: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    match serde_json::to_vec(value) {
        Ok(bytes) => Response::from_data(bytes).with_header(content_type(Path::new("x.json"))),
        Err(e) => text(500, &e.to_string()),
    }
}

fn text(code: u16, msg: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(msg).with_status_code(StatusCode(code))
}
