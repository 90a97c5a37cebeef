//! Minimal threaded HTTP server used by the mock federation and the
//! verifier service.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub method: String,
    /// Path without the query string, still percent-encoded.
    pub path: String,
    pub query: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn query_param(&self, name: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn json<T: serde::Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            content_type: "application/json",
            headers: vec![],
            body: serde_json::to_vec(value).expect("response serializes"),
        }
    }

    pub fn text(status: u16, content_type: &'static str, body: impl Into<Vec<u8>>) -> Self {
        Self {
            status,
            content_type,
            headers: vec![],
            body: body.into(),
        }
    }

    pub fn not_found() -> Self {
        Self::json(404, &serde_json::json!({"error": "not_found"}))
    }

    pub fn with_header(mut self, name: &str, value: String) -> Self {
        self.headers.push((name.to_string(), value));
        self
    }
}

pub type Handler = Arc<dyn Fn(HttpRequest) -> HttpResponse + Send + Sync>;

/// A running server. Stops and joins its workers on drop.
pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl HttpServer {
    pub fn spawn(bind: &str, workers: usize, handler: Handler) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(bind).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server bound to a non-IP address"))?;
        let server = Arc::new(server);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || {
                    while let Ok(mut req) = server.recv() {
                        let mut body = Vec::new();
                        let _ = req.as_reader().read_to_end(&mut body);
                        let url = req.url().to_string();
                        let (path, query) = url.split_once('?').unwrap_or((&url, ""));
                        let query = query
                            .split('&')
                            .filter(|kv| !kv.is_empty())
                            .map(|kv| {
                                let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
                                (decode(k), decode(v))
                            })
                            .collect();
                        let resp = handler(HttpRequest {
                            method: req.method().as_str().to_uppercase(),
                            path: path.to_string(),
                            query,
                            body,
                        });
                        let mut out = tiny_http::Response::from_data(resp.body)
                            .with_status_code(resp.status)
                            .with_header(
                                tiny_http::Header::from_bytes("Content-Type", resp.content_type)
                                    .expect("static header"),
                            );
                        for (k, v) in resp.headers {
                            if let Ok(h) = tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()) {
                                out = out.with_header(h);
                            }
                        }
                        let _ = req.respond(out);
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            addr,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block the calling thread until the server is stopped elsewhere.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

pub fn encode(s: &str) -> String {
    urlencoding::encode(s).into_owned()
}

pub fn decode(s: &str) -> String {
    urlencoding::decode(s).map(|c| c.into_owned()).unwrap_or_else(|_| s.to_string())
}

/// Blocking JSON-capable client with a fixed timeout. Non-2xx statuses are
/// returned, not raised.
pub fn agent(timeout: std::time::Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}
