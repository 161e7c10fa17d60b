//! TCP ingestion server: one thread per connection, frames in, one reply
//! byte out. A batch is acknowledged only after it is durably stored.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::client::{ACK, NAK};
use crate::model::parse_batch;
use crate::store::{AppendOutcome, RawStore};

/// Frames larger than this are refused and the connection closed.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;
const POLL: Duration = Duration::from_millis(200);
const IDLE_LIMIT: Duration = Duration::from_secs(120);
const STOP_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Default)]
pub struct ServerCounters {
    pub frames: AtomicU64,
    pub appended: AtomicU64,
    pub duplicates: AtomicU64,
    pub rejected: AtomicU64,
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    counters: Arc<ServerCounters>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn counters(&self) -> &ServerCounters {
        &self.counters
    }

    /// Stop accepting, let in-flight frames finish, and join all threads.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let workers = std::mem::take(&mut *self.workers.lock().expect("worker list poisoned"));
        for w in workers {
            let _ = w.join();
        }
    }

    /// Block until the server stops (for the foreground CLI).
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_and_join();
        }
    }
}

/// Bind and serve in background threads.
pub fn serve(bind: &str, store: Arc<RawStore>) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let workers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let counters: Arc<ServerCounters> = Arc::default();
    info!("listening on {addr}");

    let acceptor = {
        let (stop, workers, counters) = (stop.clone(), workers.clone(), counters.clone());
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match conn {
                    Ok(s) => s,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                };
                let (store, stop, counters) = (store.clone(), stop.clone(), counters.clone());
                let handle = std::thread::spawn(move || {
                    let peer = stream.peer_addr().ok();
                    if let Err(e) = handle_connection(stream, &store, &stop, &counters) {
                        debug!("connection {peer:?} closed: {e}");
                    }
                });
                let mut list = workers.lock().expect("worker list poisoned");
                list.retain(|h| !h.is_finished());
                list.push(handle);
            }
        })
    };
    Ok(ServerHandle { addr, stop, acceptor: Some(acceptor), workers, counters })
}

/// Fill `buf`, tolerating read timeouts so the stop flag is honoured.
/// Returns `Ok(false)` on a clean end of stream before any byte.
fn read_full(stream: &mut TcpStream, buf: &mut [u8], stop: &AtomicBool) -> io::Result<bool> {
    let mut filled = 0;
    let mut last_progress = Instant::now();
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "frame cut short")),
            Ok(n) => {
                filled += n;
                last_progress = Instant::now();
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                // Between frames, stop promptly; mid-frame, give the peer
                // a short grace period to finish.
                let stopping = stop.load(Ordering::SeqCst);
                if stopping && filled == 0 {
                    return Ok(false);
                }
                let limit = if stopping { STOP_GRACE } else { IDLE_LIMIT };
                if last_progress.elapsed() > limit {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "peer idle"));
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn handle_connection(mut stream: TcpStream, store: &RawStore, stop: &AtomicBool, counters: &ServerCounters) -> io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    stream.set_nodelay(true).ok();
    loop {
        let mut len = [0u8; 4];
        if !read_full(&mut stream, &mut len, stop)? {
            return Ok(());
        }
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes refused")));
        }
        let mut payload = vec![0u8; len];
        if !read_full(&mut stream, &mut payload, stop)? && len > 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "frame cut short"));
        }
        counters.frames.fetch_add(1, Ordering::Relaxed);
        let reply = match parse_batch(&payload) {
            Ok(batch) => match store.append(&batch) {
                Ok(AppendOutcome::Appended(_)) => {
                    counters.appended.fetch_add(1, Ordering::Relaxed);
                    ACK
                }
                Ok(AppendOutcome::Duplicate) => {
                    counters.duplicates.fetch_add(1, Ordering::Relaxed);
                    ACK
                }
                // Not stored: close without a reply so the client retries.
                Err(e) => return Err(io::Error::other(e.to_string())),
            },
            Err(e) => {
                debug!("rejecting frame: {e}");
                counters.rejected.fetch_add(1, Ordering::Relaxed);
                NAK
            }
        };
        stream.write_all(&[reply])?;
    }
}
