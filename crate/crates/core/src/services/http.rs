//! XML-RPC over HTTP: one POST endpoint per service, served by a small pool
//! of worker threads.

use std::io::{self, Read};
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Method, Response, Server};

use super::{ServiceKind, Services};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: u64 = 64 << 20;

pub struct HttpServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl HttpServer {
    /// Binds `addr` (port 0 picks a free port) and starts `workers` threads.
    pub fn start(services: Arc<Services>, addr: &str, workers: usize) -> io::Result<Self> {
        let server = Server::http(addr).map_err(|e| io::Error::new(io::ErrorKind::AddrNotAvailable, e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = server.clone();
                let services = services.clone();
                std::thread::spawn(move || serve(&server, &services))
            })
            .collect();
        Ok(HttpServer { server, workers, addr })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL such as `http://127.0.0.1:4040`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
    }

    /// Blocks until the worker threads exit.
    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }
}

fn serve(server: &Server, services: &Services) {
    while let Ok(mut req) = server.recv() {
        let path = req.url().split('?').next().unwrap_or("").to_string();
        let Some(kind) = ServiceKind::from_path(&path) else {
            let _ = req.respond(Response::from_string("not found").with_status_code(404));
            continue;
        };
        if *req.method() != Method::Post {
            let _ = req.respond(Response::from_string("POST only").with_status_code(405));
            continue;
        }
        let mut body = Vec::new();
        let read = req.as_reader().take(MAX_BODY_BYTES + 1).read_to_end(&mut body);
        if read.is_err() || body.len() as u64 > MAX_BODY_BYTES {
            let _ = req.respond(Response::from_string("request too large").with_status_code(413));
            continue;
        }
        let reply = services.handle_bytes(kind, &body);
        let header = Header::from_bytes(&b"Content-Type"[..], &b"text/xml"[..]).expect("static header");
        let _ = req.respond(Response::from_data(reply).with_header(header));
    }
}
