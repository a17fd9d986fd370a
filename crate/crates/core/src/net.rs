//! Blocking TCP transport: client connections, a connection pool, and a
//! small threaded server loop shared by config, shard and router processes.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::wire::{encode, Envelope, FrameDecoder, Message};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

fn resolve(endpoint: &str) -> Result<SocketAddr> {
    endpoint
        .to_socket_addrs()
        .map_err(|e| Error::NodeDown(format!("{endpoint}: cannot resolve: {e}")))?
        .next()
        .ok_or_else(|| Error::NodeDown(format!("{endpoint}: no address")))
}

fn transport_error(endpoint: &str, e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout(endpoint.to_string()),
        _ => Error::NodeDown(format!("{endpoint}: {e}")),
    }
}

/// Errors after which a connection must not be reused.
fn poisons_connection(e: &Error) -> bool {
    matches!(
        e,
        Error::Timeout(_) | Error::NodeDown(_) | Error::Protocol(_) | Error::Io(_) | Error::UnknownType(_)
    )
}

/// One client connection. Requests on a `Connection` are issued one at a
/// time; concurrency comes from pooling several of them.
pub struct Connection {
    stream: TcpStream,
    decoder: FrameDecoder,
    endpoint: String,
    token: String,
    next_req: u64,
    read_buf: Vec<u8>,
}

impl Connection {
    pub fn connect(endpoint: &str, token: &str, timeout: Duration) -> Result<Self> {
        let addr = resolve(endpoint)?;
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| transport_error(endpoint, e))?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Connection {
            stream,
            decoder: FrameDecoder::new(),
            endpoint: endpoint.to_string(),
            token: token.to_string(),
            next_req: 1,
            read_buf: vec![0u8; 256 * 1024],
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn set_timeout(&self, timeout: Duration) -> Result<()> {
        self.stream.set_read_timeout(Some(timeout))?;
        self.stream.set_write_timeout(Some(timeout))?;
        Ok(())
    }

    pub fn send_envelope(&mut self, env: &Envelope) -> Result<()> {
        let bytes = encode(env)?;
        self.stream
            .write_all(&bytes)
            .map_err(|e| transport_error(&self.endpoint, e))
    }

    pub fn send(&mut self, message: Message) -> Result<u64> {
        let req_id = self.next_req;
        self.next_req += 1;
        let env = Envelope {
            req_id,
            cluster_token: self.token.clone(),
            message,
        };
        self.send_envelope(&env)?;
        Ok(req_id)
    }

    pub fn recv(&mut self) -> Result<Envelope> {
        loop {
            if let Some(env) = self.decoder.next_envelope()? {
                return Ok(env);
            }
            let n = self
                .stream
                .read(&mut self.read_buf)
                .map_err(|e| transport_error(&self.endpoint, e))?;
            if n == 0 {
                return Err(Error::NodeDown(format!("{}: connection closed", self.endpoint)));
            }
            self.decoder.feed(&self.read_buf[..n]);
        }
    }

    fn recv_for(&mut self, req_id: u64) -> Result<Message> {
        loop {
            let env = self.recv()?;
            if env.req_id == req_id {
                return Ok(env.message);
            }
            // req_id 0 carries connection-level errors (undecodable frames)
            if env.req_id == 0 {
                return env.message.into_result();
            }
            log::debug!("{}: dropping response for req {}", self.endpoint, env.req_id);
        }
    }

    /// Sends `message` and returns the single response; `error` responses become `Err`.
    pub fn call(&mut self, message: Message) -> Result<Message> {
        let req_id = self.send(message)?;
        self.recv_for(req_id)?.into_result()
    }

    /// Sends a streaming request, passing every `find_batch` to `on_page`
    /// until `end_of_results`. Returns the count announced by the server.
    pub fn call_stream<F>(&mut self, message: Message, mut on_page: F) -> Result<u64>
    where
        F: FnMut(Vec<crate::model::MetricDocument>) -> Result<()>,
    {
        let req_id = self.send(message)?;
        loop {
            match self.recv_for(req_id)?.into_result()? {
                Message::FindBatch { docs } => on_page(docs)?,
                Message::EndOfResults { count } => return Ok(count),
                Message::StaleVersion { collection, version } => {
                    return Err(Error::StaleVersion(format!("{collection} is at version {version}")))
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected {} in result stream",
                        other.type_name()
                    )))
                }
            }
        }
    }
}

/// Sends one envelope on a fresh connection and waits for its response.
pub fn request(endpoint: &str, env: Envelope, timeout: Duration) -> Result<Envelope> {
    let mut conn = Connection::connect(endpoint, &env.cluster_token, timeout)?;
    conn.send_envelope(&env)?;
    let resp = conn.recv_for(env.req_id)?;
    match resp {
        Message::Error { code, message } => Err(Error::from_remote(&code, &message)),
        message => Ok(Envelope {
            req_id: env.req_id,
            cluster_token: String::new(),
            message,
        }),
    }
}

/// Idle connections keyed by endpoint. Safe to share between threads.
pub struct Pool {
    token: String,
    timeout: Duration,
    idle: Mutex<HashMap<String, Vec<Connection>>>,
}

impl Pool {
    pub fn new(token: impl Into<String>, timeout: Duration) -> Self {
        Pool {
            token: token.into(),
            timeout,
            idle: Mutex::new(HashMap::new()),
        }
    }

    pub fn token(&self) -> &str {
        &self.token
    }

    fn checkout(&self, endpoint: &str) -> Result<(Connection, bool)> {
        if let Some(c) = self.idle.lock().unwrap().get_mut(endpoint).and_then(Vec::pop) {
            return Ok((c, true));
        }
        Ok((Connection::connect(endpoint, &self.token, self.timeout)?, false))
    }

    fn checkin(&self, conn: Connection) {
        let mut idle = self.idle.lock().unwrap();
        let v = idle.entry(conn.endpoint.clone()).or_default();
        if v.len() < 64 {
            v.push(conn);
        }
    }

    /// Drops every idle connection to `endpoint`.
    pub fn evict(&self, endpoint: &str) {
        self.idle.lock().unwrap().remove(endpoint);
    }

    fn with_conn<T>(&self, endpoint: &str, mut f: impl FnMut(&mut Connection) -> Result<T>) -> Result<T> {
        let (mut conn, reused) = self.checkout(endpoint)?;
        let mut res = f(&mut conn);
        // an idle connection may have been closed by a restarted peer
        if reused && matches!(res, Err(Error::NodeDown(_))) {
            self.evict(endpoint);
            conn = Connection::connect(endpoint, &self.token, self.timeout)?;
            res = f(&mut conn);
        }
        match &res {
            Err(e) if poisons_connection(e) => {}
            _ => self.checkin(conn),
        }
        res
    }

    pub fn call(&self, endpoint: &str, message: Message) -> Result<Message> {
        self.with_conn(endpoint, |c| c.call(message.clone()))
    }

    pub fn call_stream<F>(&self, endpoint: &str, message: Message, mut on_page: F) -> Result<u64>
    where
        F: FnMut(Vec<crate::model::MetricDocument>) -> Result<()>,
    {
        let mut delivered = false;
        self.with_conn(endpoint, |c| {
            if delivered {
                return Err(Error::NodeDown(format!("{endpoint}: stream interrupted")));
            }
            c.call_stream(message.clone(), |page| {
                delivered = true;
                on_page(page)
            })
        })
    }
}

/// One-shot latch used to ask a server process to stop.
#[derive(Default)]
pub struct ShutdownSignal {
    flag: Mutex<bool>,
    cv: Condvar,
}

impl ShutdownSignal {
    pub fn trigger(&self) {
        *self.flag.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn is_triggered(&self) -> bool {
        *self.flag.lock().unwrap()
    }

    pub fn wait(&self) {
        let mut g = self.flag.lock().unwrap();
        while !*g {
            g = self.cv.wait(g).unwrap();
        }
    }
}

pub struct Request {
    pub req_id: u64,
    pub cluster_token: String,
    pub message: Message,
}

/// Write half of a server connection, bound to one request id.
pub struct Responder {
    writer: Arc<Mutex<TcpStream>>,
    req_id: u64,
}

impl Responder {
    pub fn send(&self, message: Message) -> Result<()> {
        let bytes = encode(&Envelope::new(self.req_id, message))?;
        self.writer.lock().unwrap().write_all(&bytes)?;
        Ok(())
    }

    pub fn reply(&self, result: Result<Message>) {
        let message = result.unwrap_or_else(|e| Message::error(&e));
        if let Err(e) = self.send(message) {
            log::debug!("reply to req {} failed: {e}", self.req_id);
        }
    }
}

pub trait Service: Send + Sync + 'static {
    /// Handles one request. Must send exactly one terminal response.
    fn handle(&self, req: Request, out: &Responder);
}

struct ServerShared {
    stopping: AtomicBool,
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
    signal: Arc<ShutdownSignal>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<ServerShared>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn signal(&self) -> Arc<ShutdownSignal> {
        self.shared.signal.clone()
    }

    /// Stops accepting, closes live connections, joins the accept loop.
    pub fn stop(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for (_, s) in self.shared.conns.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `service` on `listener`. When `token` is set, every request must
/// carry it or is answered with an `unauthorized` error.
pub fn serve<S: Service>(
    listener: TcpListener,
    service: Arc<S>,
    token: Option<String>,
    signal: Arc<ShutdownSignal>,
) -> Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let shared = Arc::new(ServerShared {
        stopping: AtomicBool::new(false),
        conns: Mutex::new(HashMap::new()),
        next_conn: AtomicU64::new(0),
        signal,
    });
    let token = token.map(Arc::new);
    let sh = shared.clone();
    let accept = thread::Builder::new().name(format!("accept-{addr}")).spawn(move || {
        for stream in listener.incoming() {
            if sh.stopping.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let id = sh.next_conn.fetch_add(1, Ordering::Relaxed);
            if let Ok(clone) = stream.try_clone() {
                sh.conns.lock().unwrap().insert(id, clone);
            }
            let (svc, tok, sh2) = (service.clone(), token.clone(), sh.clone());
            let _ = thread::Builder::new().name(format!("conn-{id}")).spawn(move || {
                if let Err(e) = serve_connection(stream, svc, tok) {
                    log::debug!("connection {id} ended: {e}");
                }
                sh2.conns.lock().unwrap().remove(&id);
            });
        }
    })?;
    Ok(ServerHandle {
        addr,
        shared,
        accept: Some(accept),
    })
}

fn serve_connection<S: Service>(mut stream: TcpStream, service: Arc<S>, token: Option<Arc<String>>) -> Result<()> {
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 256 * 1024];
    loop {
        let n = stream.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        decoder.feed(&buf[..n]);
        loop {
            let env = match decoder.next_envelope() {
                Ok(Some(env)) => env,
                Ok(None) => break,
                Err(e) => {
                    // undecodable input: report once, then drop the connection
                    let out = Responder {
                        writer: writer.clone(),
                        req_id: 0,
                    };
                    out.reply(Err(e));
                    let _ = stream.shutdown(Shutdown::Both);
                    return Ok(());
                }
            };
            let out = Responder {
                writer: writer.clone(),
                req_id: env.req_id,
            };
            if let Some(t) = &token {
                if env.cluster_token != **t {
                    out.reply(Err(Error::Auth));
                    continue;
                }
            }
            let svc = service.clone();
            let req = Request {
                req_id: env.req_id,
                cluster_token: env.cluster_token,
                message: env.message,
            };
            thread::spawn(move || svc.handle(req, &out));
        }
    }
}
