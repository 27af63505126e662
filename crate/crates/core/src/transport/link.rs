//! Ordered, reliable frame links: an in-process channel pair and TCP.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::frame::{Header, HEADER_LEN};
use super::ledger::{Direction, SharedLedger, Traffic};
use super::{Frame, TransportError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// A bidirectional frame pipe to one peer.
pub trait Link: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Frame, TransportError>;
}

impl<L: Link + ?Sized> Link for Box<L> {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        (**self).recv()
    }
}

/// One end of an in-process link. Frames cross as encoded bytes so both
/// transports exercise the same codec.
pub struct InprocLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

pub fn inproc_pair(timeout: Duration) -> (InprocLink, InprocLink) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        InprocLink {
            tx: a_tx,
            rx: a_rx,
            timeout,
        },
        InprocLink {
            tx: b_tx,
            rx: b_rx,
            timeout,
        },
    )
}

impl Link for InprocLink {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.tx
            .send(frame.encode())
            .map_err(|_| TransportError::ConnectionLost)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(bytes) => Ok(Frame::decode(&bytes)?),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::ConnectionLost),
        }
    }
}

/// Frame link over a TCP stream.
pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Self { stream })
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        Self::from_stream(stream, timeout)
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.stream.peer_addr().ok()
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), TransportError> {
        self.stream.read_exact(buf).map_err(|e| match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => TransportError::Timeout,
            _ => TransportError::ConnectionLost,
        })
    }
}

impl Link for TcpLink {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.stream
            .write_all(&frame.encode())
            .map_err(|e| match e.kind() {
                ErrorKind::WouldBlock | ErrorKind::TimedOut => TransportError::Timeout,
                _ => TransportError::ConnectionLost,
            })
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let mut head = [0u8; HEADER_LEN];
        self.read_exact(&mut head)?;
        let header = Header::parse(&head)?;
        let mut payload = vec![0u8; header.payload_len as usize];
        self.read_exact(&mut payload)?;
        Ok(header.with_payload(payload))
    }
}

/// Binds a listener; port 0 picks a free port.
pub fn tcp_listen(addr: impl ToSocketAddrs) -> Result<TcpListener, TransportError> {
    Ok(TcpListener::bind(addr)?)
}

/// Connected loopback pair `(server end, client end)`.
pub fn tcp_loopback_pair(timeout: Duration) -> Result<(TcpLink, TcpLink), TransportError> {
    let listener = tcp_listen("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let client = TcpStream::connect(addr)?;
    let (server, _) = listener.accept()?;
    Ok((
        TcpLink::from_stream(server, timeout)?,
        TcpLink::from_stream(client, timeout)?,
    ))
}

/// Which party owns a metered link end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Server,
    Client,
}

/// Link wrapper that records every frame in a cost ledger.
pub struct MeteredLink<L> {
    inner: L,
    side: Side,
    ledger: SharedLedger,
    traffic: Traffic,
}

impl<L: Link> MeteredLink<L> {
    pub fn new(inner: L, side: Side, ledger: SharedLedger) -> Self {
        Self {
            inner,
            side,
            ledger,
            traffic: Traffic::Steady,
        }
    }

    /// Classifies subsequent parameter traffic until changed.
    pub fn set_traffic(&mut self, traffic: Traffic) {
        self.traffic = traffic;
    }

    pub fn into_inner(self) -> L {
        self.inner
    }

    fn outgoing(&self) -> Direction {
        match self.side {
            Side::Server => Direction::ServerToClient,
            Side::Client => Direction::ClientToServer,
        }
    }

    fn incoming(&self) -> Direction {
        match self.side {
            Side::Server => Direction::ClientToServer,
            Side::Client => Direction::ServerToClient,
        }
    }
}

impl<L: Link> Link for MeteredLink<L> {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.inner.send(frame)?;
        self.ledger.record(self.outgoing(), frame, self.traffic)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let frame = self.inner.recv()?;
        self.ledger.record(self.incoming(), &frame, self.traffic)?;
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::MsgType;

    #[test]
    fn inproc_delivers_in_order_and_reports_disconnect() {
        let (mut a, mut b) = inproc_pair(Duration::from_millis(200));
        for i in 0..5u32 {
            a.send(&Frame::new(MsgType::Control, i, 1, 0, vec![i as u8]))
                .unwrap();
        }
        for i in 0..5u32 {
            assert_eq!(b.recv().unwrap().round, i);
        }
        assert!(matches!(b.recv(), Err(TransportError::Timeout)));
        drop(a);
        assert!(matches!(b.recv(), Err(TransportError::ConnectionLost)));
    }

    #[test]
    fn tcp_recv_on_closed_connection_is_connection_lost() {
        let (server, mut client) = tcp_loopback_pair(Duration::from_secs(2)).unwrap();
        drop(server);
        assert!(matches!(client.recv(), Err(TransportError::ConnectionLost)));
    }
}
