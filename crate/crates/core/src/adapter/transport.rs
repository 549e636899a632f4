use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{read_message, write_message, AdapterError, AdapterServer, Message};

/// Bidirectional message channel to an adapter.
pub trait Transport: Send {
    fn send(&mut self, msg: &Message) -> Result<(), AdapterError>;

    /// Next message, or `Timeout` if none arrives within `timeout`.
    fn recv(&mut self, timeout: Duration) -> Result<Message, AdapterError>;
}

/// Framed messages over any byte stream pair. A reader thread decodes
/// incoming frames so receives can time out.
pub struct StreamTransport {
    writer: Box<dyn Write + Send>,
    incoming: Receiver<Result<Message, AdapterError>>,
    dead: Option<AdapterError>,
}

impl StreamTransport {
    pub fn new(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let item = match read_message(&mut reader) {
                    Ok(Some(m)) => Ok(m),
                    Ok(None) => Err(AdapterError::BrokenPipe("adapter closed its output".into())),
                    Err(e) => Err(e),
                };
                let stop = !matches!(item, Ok(_) | Err(AdapterError::Protocol(_)));
                if tx.send(item).is_err() || stop {
                    break;
                }
            }
        });
        Self { writer: Box::new(BufWriter::new(writer)), incoming: rx, dead: None }
    }
}

impl Transport for StreamTransport {
    fn send(&mut self, msg: &Message) -> Result<(), AdapterError> {
        if let Some(e) = &self.dead {
            return Err(e.clone());
        }
        write_message(&mut self.writer, msg).inspect_err(|e| self.dead = Some(e.clone()))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Message, AdapterError> {
        if let Some(e) = &self.dead {
            return Err(e.clone());
        }
        match self.incoming.recv_timeout(timeout) {
            Ok(Ok(m)) => Ok(m),
            Ok(Err(e)) => {
                if matches!(e, AdapterError::BrokenPipe(_)) {
                    self.dead = Some(e.clone());
                }
                Err(e)
            }
            Err(RecvTimeoutError::Timeout) => Err(AdapterError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                let e = AdapterError::BrokenPipe("adapter reader stopped".into());
                self.dead = Some(e.clone());
                Err(e)
            }
        }
    }
}

/// Adapter running as a child process, protocol over its stdin/stdout.
/// Diagnostics on the child's stderr pass through to ours.
pub struct ChildTransport {
    inner: StreamTransport,
    child: Child,
}

impl ChildTransport {
    pub fn spawn(program: &Path, args: &[String]) -> Result<Self, AdapterError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AdapterError::Spawn(format!("{}: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        Ok(Self { inner: StreamTransport::new(stdout, stdin), child })
    }

    pub fn id(&self) -> u32 {
        self.child.id()
    }

    /// Terminates the child immediately.
    pub fn kill(&mut self) -> std::io::Result<()> {
        self.child.kill()?;
        self.child.wait().map(|_| ())
    }
}

impl Transport for ChildTransport {
    fn send(&mut self, msg: &Message) -> Result<(), AdapterError> {
        self.inner.send(msg)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Message, AdapterError> {
        self.inner.recv(timeout)
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        let _ = self.inner.send(&Message::Shutdown);
        for _ in 0..50 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// In-process adapter: an [`AdapterServer`] on its own thread, connected
/// through OS pipes so every byte takes the same path as with a child process.
pub struct LoopbackTransport {
    inner: Option<StreamTransport>,
    server: Option<JoinHandle<Result<(), AdapterError>>>,
}

impl LoopbackTransport {
    pub fn new(server: AdapterServer) -> std::io::Result<Self> {
        let (to_server_r, to_server_w) = std::io::pipe()?;
        let (from_server_r, from_server_w) = std::io::pipe()?;
        let handle = std::thread::spawn(move || server.serve(to_server_r, from_server_w));
        Ok(Self { inner: Some(StreamTransport::new(from_server_r, to_server_w)), server: Some(handle) })
    }
}

impl Transport for LoopbackTransport {
    fn send(&mut self, msg: &Message) -> Result<(), AdapterError> {
        self.inner.as_mut().expect("open until drop").send(msg)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Message, AdapterError> {
        self.inner.as_mut().expect("open until drop").recv(timeout)
    }
}

impl Drop for LoopbackTransport {
    fn drop(&mut self) {
        if let Some(mut t) = self.inner.take() {
            let _ = t.send(&Message::Shutdown);
        }
        if let Some(h) = self.server.take() {
            let _ = h.join();
        }
    }
}
