//! TCP provider: one thread and one session per connection.

use std::io::{BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::message::Message;
use super::provider::{Provider, ProviderConnection};
use super::transcript::Transcript;
use crate::error::{Error, Result};

const POLL: Duration = Duration::from_millis(50);

/// Running provider. Dropping the handle shuts it down.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    provider: Arc<Provider>,
    shutdown: Arc<AtomicBool>,
    transcripts: Arc<Mutex<Vec<Transcript>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn provider(&self) -> &Arc<Provider> {
        &self.provider
    }

    /// Transcripts of connections that have ended, in completion order.
    pub fn transcripts(&self) -> Vec<Transcript> {
        self.transcripts.lock().expect("transcripts lock").clone()
    }

    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shutdown)
    }

    /// Stop accepting, let open connections wind down, and wait for them.
    pub fn shutdown(mut self) -> Vec<Transcript> {
        self.stop();
        self.transcripts()
    }

    /// Block until the shutdown flag is raised elsewhere (e.g. a signal).
    pub fn wait(mut self) -> Vec<Transcript> {
        while !self.shutdown.load(Ordering::SeqCst) {
            std::thread::sleep(POLL);
        }
        self.stop();
        self.transcripts()
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(acceptor) = self.acceptor.take() {
            // Wake the blocking accept.
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = acceptor.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn serve(addr: &str, provider: Arc<Provider>) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|source| Error::BindFailure { addr: addr.to_string(), source })?;
    let local = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let transcripts = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let provider = Arc::clone(&provider);
        let shutdown = Arc::clone(&shutdown);
        let transcripts = Arc::clone(&transcripts);
        std::thread::spawn(move || accept_loop(listener, provider, shutdown, transcripts))
    };
    Ok(ServerHandle { addr: local, provider, shutdown, transcripts, acceptor: Some(acceptor) })
}

fn accept_loop(
    listener: TcpListener,
    provider: Arc<Provider>,
    shutdown: Arc<AtomicBool>,
    transcripts: Arc<Mutex<Vec<Transcript>>>,
) {
    let mut workers = Vec::new();
    for stream in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let provider = Arc::clone(&provider);
        let shutdown = Arc::clone(&shutdown);
        let transcripts = Arc::clone(&transcripts);
        workers.push(std::thread::spawn(move || {
            let t = handle_connection(stream, provider, shutdown);
            transcripts.lock().expect("transcripts lock").push(t);
        }));
        workers.retain(|w| !w.is_finished());
    }
    for w in workers {
        let _ = w.join();
    }
}

/// Reader that rides out socket timeouts until shutdown is requested.
struct PatientReader<'a> {
    stream: &'a TcpStream,
    shutdown: &'a AtomicBool,
}

impl Read for PatientReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        loop {
            match (&*self.stream).read(buf) {
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    if self.shutdown.load(Ordering::SeqCst) {
                        return Err(e);
                    }
                }
                r => return r,
            }
        }
    }
}

fn handle_connection(stream: TcpStream, provider: Arc<Provider>, shutdown: Arc<AtomicBool>) -> Transcript {
    let mut conn = ProviderConnection::new(provider);
    if stream.set_read_timeout(Some(POLL)).is_err() {
        return conn.take_transcript();
    }
    let _ = stream.set_nodelay(true);
    let mut reader = PatientReader { stream: &stream, shutdown: &shutdown };
    let mut writer = BufWriter::new(&stream);
    loop {
        let reply = match Message::read_frame(&mut reader) {
            Ok(None) => break,
            Ok(Some(frame)) => match Message::decode(&frame) {
                Ok(msg) => conn.handle(msg),
                Err(e) => {
                    // Malformed frame: answer once, then hang up.
                    let reply = conn.reject(&e);
                    let _ = writer.write_all(&reply.encode()).and_then(|_| writer.flush());
                    break;
                }
            },
            Err(Error::Io(_)) => break,
            Err(e) => {
                let reply = conn.reject(&e);
                let _ = writer.write_all(&reply.encode()).and_then(|_| writer.flush());
                break;
            }
        };
        if writer.write_all(&reply.encode()).and_then(|_| writer.flush()).is_err() {
            break;
        }
    }
    conn.take_transcript()
}
