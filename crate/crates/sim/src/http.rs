//! Loopback HTTP front end for [`MockGateway`].

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tiny_http::{Header, Method, Response, Server};

use gwaudit_core::client::ChatRequest;
use gwaudit_core::{Error, Result};

use crate::gateway::MockGateway;

/// How long a hung request is held before the server answers 504.
const HANG: Duration = Duration::from_secs(600);

pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    gateway: Arc<MockGateway>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn gateway(&self) -> &Arc<MockGateway> {
        &self.gateway
    }

    /// Stops accepting requests, waits for workers and writes the ledger.
    pub fn shutdown(mut self) -> Result<()> {
        self.stop_workers();
        if let Some(path) = self.gateway.ledger_path() {
            self.gateway.ledger().save(path)?;
        }
        Ok(())
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

fn bearer(req: &tiny_http::Request) -> String {
    req.headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .and_then(|h| h.value.as_str().strip_prefix("Bearer ").map(str::to_string))
        .unwrap_or_default()
}

fn handle(gateway: &MockGateway, mut req: tiny_http::Request) {
    let json = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let respond = |req: tiny_http::Request, status: u16, body: String| {
        let _ = req.respond(
            Response::from_string(body)
                .with_status_code(status)
                .with_header(json.clone()),
        );
    };
    if req.method() != &Method::Post || req.url().trim_end_matches('/') != "/v1/chat/completions" {
        return respond(
            req,
            404,
            r#"{"error":{"message":"not found","type":"invalid_request_error"}}"#.into(),
        );
    }
    let mut raw = String::new();
    if req.as_reader().read_to_string(&mut raw).is_err() {
        return respond(
            req,
            400,
            r#"{"error":{"message":"unreadable body","type":"invalid_request_error"}}"#.into(),
        );
    }
    let Ok(chat) = serde_json::from_str::<ChatRequest>(&raw) else {
        return respond(
            req,
            400,
            r#"{"error":{"message":"malformed request","type":"invalid_request_error"}}"#.into(),
        );
    };
    let _guard = gateway.enter();
    let p = gateway.prepare(&bearer(&req), &chat);
    gateway
        .clock()
        .sleep(if p.hang { HANG.max(p.delay) } else { p.delay });
    respond(req, p.reply.status, p.reply.body);
}

/// Serves the gateway on `addr` (use port 0 for an ephemeral port) with
/// `threads` concurrent handlers.
pub fn serve_http(gateway: Arc<MockGateway>, addr: &str, threads: usize) -> Result<ServerHandle> {
    let server = Server::http(addr)
        .map_err(|e| Error::InvalidArgument(format!("cannot bind {addr}: {e}")))?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::InvalidArgument("not an IP listener".into()))?;
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..threads.max(1))
        .map(|_| {
            let (server, stop, gateway) = (server.clone(), stop.clone(), gateway.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match server.recv() {
                        Ok(req) => handle(&gateway, req),
                        Err(_) => break,
                    }
                }
            })
        })
        .collect();
    Ok(ServerHandle {
        addr: bound,
        server,
        stop,
        workers,
        gateway,
    })
}
