//! TCP transport for the broker core.
//!
//! One reader thread per connection decodes frames and feeds them to the
//! shared [`Broker`] under a lock; deliveries are handed to a per-client
//! writer thread over a channel, which keeps per-subscriber FIFO order
//! without blocking the publisher on slow sockets.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::broker::Broker;
use super::frame::{decode_frame, encode_frame, BusEnvelope, Kind};

struct Shared {
    broker: Mutex<Broker>,
    writers: Mutex<HashMap<String, Sender<Vec<u8>>>>,
    streams: Mutex<Vec<TcpStream>>,
    stop: AtomicBool,
}

pub struct TcpBroker {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl TcpBroker {
    /// Bind and start accepting. Port 0 picks a free port.
    pub fn start(bind: impl ToSocketAddrs, max_clients: usize) -> io::Result<TcpBroker> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            broker: Mutex::new(Broker::new(max_clients)),
            writers: Mutex::new(HashMap::new()),
            streams: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
        });
        let sh = Arc::clone(&shared);
        let accept = thread::spawn(move || {
            for stream in listener.incoming() {
                if sh.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                if let Ok(s) = stream.try_clone() {
                    sh.streams.lock().unwrap().push(s);
                }
                let sh = Arc::clone(&sh);
                thread::spawn(move || serve(stream, sh));
            }
        });
        Ok(TcpBroker { addr, shared, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn client_count(&self) -> usize {
        self.shared.broker.lock().unwrap().client_count()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for s in self.shared.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.shared.writers.lock().unwrap().clear();
    }
}

impl Drop for TcpBroker {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(stream: TcpStream, sh: Arc<Shared>) {
    let Ok(mut reader) = stream.try_clone() else { return };
    let mut client: Option<String> = None;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    'conn: loop {
        let n = match reader.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        buf.extend_from_slice(&chunk[..n]);
        loop {
            let (env, used) = match decode_frame(&buf) {
                Ok(Some(x)) => x,
                Ok(None) => break,
                Err(_) => break 'conn,
            };
            buf.drain(..used);
            match &client {
                None => {
                    if env.kind != Kind::Connect || sh.broker.lock().unwrap().connect(&env.client_id).is_err() {
                        break 'conn;
                    }
                    let Ok(w) = stream.try_clone() else { break 'conn };
                    sh.writers.lock().unwrap().insert(env.client_id.clone(), spawn_writer(w));
                    client = Some(env.client_id);
                }
                Some(id) => {
                    // the connection's identity wins over whatever the frame claims
                    let env = BusEnvelope { client_id: id.clone(), ..env };
                    if env.kind == Kind::Connect {
                        break 'conn;
                    }
                    dispatch(&sh, &env);
                }
            }
        }
    }
    if let Some(id) = client {
        sh.broker.lock().unwrap().disconnect(&id);
        sh.writers.lock().unwrap().remove(&id);
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn dispatch(sh: &Shared, env: &BusEnvelope) {
    let mut broker = sh.broker.lock().unwrap();
    let reply = match broker.handle(env) {
        Ok(r) => r,
        // QoS 0: errors are not reported back to the sender
        Err(_) => return,
    };
    let writers = sh.writers.lock().unwrap();
    if let Some(reply) = reply {
        send(&writers, &env.client_id, &reply);
    }
    if env.kind == Kind::Pub {
        let ids: Vec<String> = writers.keys().cloned().collect();
        for id in ids {
            for msg in broker.drain(&id) {
                send(&writers, &id, &msg);
            }
        }
    }
}

fn send(writers: &HashMap<String, Sender<Vec<u8>>>, id: &str, env: &BusEnvelope) {
    if let (Some(tx), Ok(frame)) = (writers.get(id), encode_frame(env)) {
        let _ = tx.send(frame);
    }
}

fn spawn_writer(mut stream: TcpStream) -> Sender<Vec<u8>> {
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    thread::spawn(move || {
        for frame in rx {
            if stream.write_all(&frame).is_err() {
                break;
            }
        }
    });
    tx
}

/// Blocking client for the TCP broker.
pub struct TcpBusClient {
    client_id: String,
    stream: TcpStream,
    inbox: Receiver<BusEnvelope>,
    acks: Receiver<BusEnvelope>,
}

impl TcpBusClient {
    pub fn connect(addr: SocketAddr, client_id: &str) -> io::Result<TcpBusClient> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.write_all(&encode_frame(&BusEnvelope::connect(client_id, 0)).map_err(invalid)?)?;
        let mut reader = stream.try_clone()?;
        let (tx, inbox) = mpsc::channel();
        let (ack_tx, acks) = mpsc::channel();
        thread::spawn(move || {
            let mut buf = Vec::new();
            let mut chunk = [0u8; 8192];
            loop {
                let n = match reader.read(&mut chunk) {
                    Ok(0) | Err(_) => return,
                    Ok(n) => n,
                };
                buf.extend_from_slice(&chunk[..n]);
                while let Ok(Some((env, used))) = decode_frame(&buf) {
                    buf.drain(..used);
                    let target = if env.kind == Kind::Suback { &ack_tx } else { &tx };
                    if target.send(env).is_err() {
                        return;
                    }
                }
            }
        });
        Ok(TcpBusClient { client_id: client_id.to_string(), stream, inbox, acks })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    /// Subscribe and wait for the broker's acknowledgement.
    pub fn subscribe(&mut self, filter: &str, timeout: Duration) -> io::Result<()> {
        let frame = encode_frame(&BusEnvelope::subscribe(&self.client_id, filter, 0)).map_err(invalid)?;
        self.stream.write_all(&frame)?;
        match self.acks.recv_timeout(timeout) {
            Ok(ack) if ack.topic == filter => Ok(()),
            Ok(_) => Err(io::Error::new(io::ErrorKind::InvalidData, "unexpected SUBACK")),
            Err(_) => Err(io::Error::new(io::ErrorKind::TimedOut, "no SUBACK from broker")),
        }
    }

    pub fn unsubscribe(&mut self, filter: &str) -> io::Result<()> {
        let frame = encode_frame(&BusEnvelope::unsubscribe(&self.client_id, filter, 0)).map_err(invalid)?;
        self.stream.write_all(&frame)
    }

    pub fn publish(&mut self, topic: &str, payload: &[u8], ts: u64) -> io::Result<()> {
        let frame = encode_frame(&BusEnvelope::publish(&self.client_id, topic, payload.to_vec(), ts)).map_err(invalid)?;
        self.stream.write_all(&frame)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<BusEnvelope> {
        self.inbox.recv_timeout(timeout).ok()
    }
}

impl Drop for TcpBusClient {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

fn invalid(e: impl std::error::Error + Send + Sync + 'static) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidInput, e)
}
