//! TCP server speaking the ND-JSON protocol, one session per connection.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;

use super::protocol::{Host, Request};
use super::SessionConfig;
use crate::error::{Error, Result};

pub struct Server {
    listener: TcpListener,
    defaults: SessionConfig,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, defaults: SessionConfig) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::io("<socket>", e))?;
        Ok(Self { listener, defaults })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener.local_addr().map_err(|e| Error::io("<socket>", e))
    }

    /// Accepts connections forever.
    pub fn run(self) -> Result<()> {
        for stream in self.listener.incoming() {
            match stream {
                Ok(stream) => {
                    let defaults = self.defaults.clone();
                    thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = serve_connection(stream, defaults) {
                            log::warn!("connection {peer:?} ended: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::spawn(move || self.run());
        Ok(addr)
    }
}

/// Reads lines on a separate thread so incoming drags queue up while a
/// solve is running; each queued batch is executed with drag coalescing.
pub fn serve_connection(stream: TcpStream, defaults: SessionConfig) -> Result<()> {
    let reader = stream.try_clone().map_err(|e| Error::io("<socket>", e))?;
    let (tx, rx) = mpsc::channel::<String>();
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    let mut host = Host::new(defaults);
    let mut out = BufWriter::new(stream);
    while let Ok(first) = rx.recv() {
        let mut batch = vec![Request::parse_line(&first)];
        batch.extend(rx.try_iter().map(|l| Request::parse_line(&l)));
        for reply in host.process_batch(batch) {
            writeln!(out, "{}", reply.to_line()).map_err(|e| Error::io("<socket>", e))?;
        }
        out.flush().map_err(|e| Error::io("<socket>", e))?;
    }
    Ok(())
}
