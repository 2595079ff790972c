//! Minimal threaded HTTP server implementing the scoring wire protocol,
//! with fault-injection modes for error-path tests.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use promptpress::backend::surrogate::{tokenize_text, SurrogateModel};
use promptpress::backend::{PplBackend, ScoreRequest};

/// What the server does with score requests.
pub enum MockMode {
    /// Score with a real surrogate model.
    Model(SurrogateModel),
    /// Return one score fewer than requested.
    ShortScores,
    /// Answer with these scores, cycled to the target length.
    FixedScores(Vec<f64>),
    /// Sleep before answering.
    DelayMs(u64),
    /// Answer every request with this HTTP status.
    Status(u16),
}

pub struct MockServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(mode: MockMode) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        listener
            .set_nonblocking(true)
            .expect("nonblocking listener");
        let addr = listener.local_addr().expect("local addr");
        let shutdown = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let flag = shutdown.clone();
        let counter = requests.clone();
        let handle = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        counter.fetch_add(1, Ordering::Relaxed);
                        let _ = stream.set_nonblocking(false);
                        let _ = handle_connection(stream, &mode);
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
        });
        MockServer {
            url: format!("http://{addr}"),
            requests,
            shutdown,
            handle: Some(handle),
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, mode: &MockMode) -> std::io::Result<()> {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let (path, body) = read_request(&mut stream)?;

    match mode {
        MockMode::Status(code) => {
            return respond(&mut stream, *code, "{}");
        }
        MockMode::DelayMs(ms) => {
            std::thread::sleep(Duration::from_millis(*ms));
            return respond(&mut stream, 200, "{\"nll\": []}");
        }
        _ => {}
    }

    if path == "/tokenize" {
        #[derive(serde::Deserialize)]
        struct TokenizeBody {
            text: String,
        }
        let parsed: TokenizeBody = match serde_json::from_slice(&body) {
            Ok(p) => p,
            Err(_) => return respond(&mut stream, 400, "{\"error\":\"bad json\"}"),
        };
        let tokens = tokenize_text(&parsed.text);
        let rendered = serde_json::json!({ "tokens": tokens }).to_string();
        return respond(&mut stream, 200, &rendered);
    }

    if path == "/score" {
        #[derive(serde::Deserialize)]
        struct ScoreBody {
            #[serde(default)]
            prefix: Vec<String>,
            target: Vec<String>,
        }
        let parsed: ScoreBody = match serde_json::from_slice(&body) {
            Ok(p) => p,
            Err(_) => return respond(&mut stream, 400, "{\"error\":\"bad json\"}"),
        };
        let mut nll: Vec<f64> = match mode {
            MockMode::Model(model) => {
                match model.score(&ScoreRequest::new(parsed.prefix, parsed.target)) {
                    Ok(scored) => scored.iter().map(|t| t.nll).collect(),
                    Err(_) => return respond(&mut stream, 400, "{\"error\":\"score failed\"}"),
                }
            }
            MockMode::ShortScores => vec![1.0; parsed.target.len()],
            MockMode::FixedScores(scores) => (0..parsed.target.len())
                .map(|i| scores[i % scores.len()])
                .collect(),
            _ => unreachable!("handled above"),
        };
        if matches!(mode, MockMode::ShortScores) {
            nll.pop();
        }
        let rendered = serde_json::json!({ "nll": nll }).to_string();
        return respond(&mut stream, 200, &rendered);
    }

    respond(&mut stream, 404, "{\"error\":\"not found\"}")
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<(String, Vec<u8>)> {
    let mut buffer = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end;
    loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "connection closed mid-request",
            ));
        }
        buffer.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buffer) {
            header_end = pos;
            break;
        }
    }
    let header_text = String::from_utf8_lossy(&buffer[..header_end]).to_string();
    let path = header_text
        .lines()
        .next()
        .and_then(|line| line.split_whitespace().nth(1))
        .unwrap_or("/")
        .to_string();
    let content_length = header_text
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);

    let mut body = buffer[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    body.truncate(content_length);
    Ok((path, body))
}

fn find_header_end(buffer: &[u8]) -> Option<usize> {
    buffer.windows(4).position(|w| w == b"\r\n\r\n")
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())
}
