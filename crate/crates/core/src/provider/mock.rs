//! A small in-process OpenAI-compatible completions server for tests and
//! offline demos. Responses are a deterministic function of the prompt, and
//! faults (429/5xx) can be injected per prompt.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Split text into word-like tokens: each token is a run of leading
/// whitespace followed by a run of non-whitespace.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() && in_word {
            out.push(std::mem::take(&mut cur));
            in_word = false;
        }
        if !c.is_whitespace() {
            in_word = true;
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn unit(bytes: &[u8]) -> f64 {
    let d = Sha256::digest(bytes);
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
}

/// The synthetic model behind the mock: a token's logprob depends on the
/// token and the one before it, and tokens already seen earlier in the
/// prompt get a bonus, so prepended context changes target scores.
pub fn synthetic_logprobs(tokens: &[String]) -> Vec<Option<f64>> {
    let mut seen = std::collections::HashSet::new();
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let key = t.trim();
            let r = if i == 0 {
                None
            } else {
                let prev = tokens[i - 1].trim();
                let base = -0.05 - 6.0 * unit(format!("{prev}\u{1}{key}").as_bytes());
                let lp = if seen.contains(key) { base * 0.5 } else { base };
                // Quantize so values survive any JSON round trip exactly.
                Some((lp * 1024.0).round() / 1024.0)
            };
            seen.insert(key.to_string());
            r
        })
        .collect()
}

pub fn completion_body(prompt: &str) -> Value {
    let tokens = word_tokens(prompt);
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut pos = 0usize;
    for t in &tokens {
        offsets.push(pos);
        pos += t.chars().count();
    }
    json!({
        "id": "cmpl-mock",
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": prompt,
            "logprobs": {
                "tokens": tokens,
                "token_logprobs": synthetic_logprobs(&tokens),
                "text_offset": offsets,
            },
            "finish_reason": "length",
        }],
    })
}

#[derive(Debug, Clone, Default)]
pub struct MockOptions {
    /// Each distinct prompt fails this many times before succeeding,
    /// alternating 429 and 503.
    pub faults_per_prompt: usize,
    /// Canned response bodies by exact prompt.
    pub canned: HashMap<String, Value>,
    /// Reject requests whose bearer token differs from this value.
    pub required_token: Option<String>,
}

#[derive(Debug, Default)]
struct State {
    failures: HashMap<String, usize>,
    auth_headers: Vec<String>,
}

pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    state: Arc<Mutex<State>>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Serve on an ephemeral localhost port.
    pub fn start(options: MockOptions) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", options)
    }

    /// Serve on a fixed address, for runs whose reports must name a stable
    /// endpoint.
    pub fn bind(addr: impl std::net::ToSocketAddrs, options: MockOptions) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let state = Arc::new(Mutex::new(State::default()));
        let options = Arc::new(options);
        let handle = {
            let (stop, requests, state) = (stop.clone(), requests.clone(), state.clone());
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let (requests, state, options) =
                        (requests.clone(), state.clone(), options.clone());
                    std::thread::spawn(move || {
                        let _ = handle_conn(stream, &options, &requests, &state);
                    });
                }
            })
        };
        Ok(Self {
            addr,
            stop,
            requests,
            state,
            handle: Some(handle),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn auth_headers(&self) -> Vec<String> {
        self.state.lock().unwrap().auth_headers.clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_conn(
    stream: TcpStream,
    options: &MockOptions,
    requests: &AtomicUsize,
    state: &Mutex<State>,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    let mut auth = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            let v = v.trim();
            match k.to_ascii_lowercase().as_str() {
                "content-length" => content_length = v.parse().unwrap_or(0),
                "authorization" => auth = Some(v.to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    requests.fetch_add(1, Ordering::SeqCst);

    let (status, payload) = respond(&request_line, &body, auth, options, state);
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        429 => "Too Many Requests",
        _ => "Service Unavailable",
    };
    let text = payload.to_string();
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    )?;
    out.flush()
}

fn respond(
    request_line: &str,
    body: &[u8],
    auth: Option<String>,
    options: &MockOptions,
    state: &Mutex<State>,
) -> (u16, Value) {
    if !request_line.starts_with("POST /v1/completions") {
        return (404, json!({"error": "not found"}));
    }
    if let Some(a) = &auth {
        state.lock().unwrap().auth_headers.push(a.clone());
    }
    if let Some(tok) = &options.required_token {
        if auth.as_deref() != Some(&format!("Bearer {tok}")) {
            return (401, json!({"error": "unauthorized"}));
        }
    }
    let req: Value = match serde_json::from_slice(body) {
        Ok(v) => v,
        Err(e) => return (400, json!({"error": e.to_string()})),
    };
    let Some(prompt) = req.get("prompt").and_then(Value::as_str) else {
        return (400, json!({"error": "missing prompt"}));
    };
    if req.get("echo") != Some(&Value::Bool(true)) || req.get("max_tokens") != Some(&json!(0)) {
        return (400, json!({"error": "scoring requires echo=true, max_tokens=0"}));
    }
    {
        let mut st = state.lock().unwrap();
        let n = st.failures.entry(prompt.to_string()).or_insert(0);
        if *n < options.faults_per_prompt {
            *n += 1;
            let status = if *n % 2 == 1 { 429 } else { 503 };
            return (status, json!({"error": "injected fault"}));
        }
    }
    match options.canned.get(prompt) {
        Some(v) => (200, v.clone()),
        None => (200, completion_body(prompt)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_tokens_cover_text() {
        let t = "hello  world\n\nnext";
        let toks = word_tokens(t);
        assert_eq!(toks, vec!["hello", "  world", "\n\nnext"]);
        assert_eq!(toks.concat(), t);
        assert_eq!(word_tokens("  lead"), vec!["  lead"]);
    }

    #[test]
    fn synthetic_logprobs_deterministic_and_valid() {
        let toks = word_tokens("a b c a b c");
        let a = synthetic_logprobs(&toks);
        assert_eq!(a, synthetic_logprobs(&toks));
        assert!(a[0].is_none());
        assert!(a[1..].iter().all(|x| x.unwrap() < 0.0));
    }
}
