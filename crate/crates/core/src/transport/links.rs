use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{decode_frame, decode_message, encode_frame, encode_message, read_frame, write_frame, Frame, TransportError};
use crate::nn::Scalar;
use crate::protocol::{ClientLink, ClientNode, Control, Envelope, Message, MessageKind, ProtocolError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub round: u32,
    pub client_id: u32,
    pub kind: MessageKind,
    pub bytes: usize,
    pub upload: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoundTally {
    pub up: usize,
    pub down: usize,
    pub frames: usize,
}

/// Shared log of every frame that crossed a link, with its encoded size.
#[derive(Clone, Debug, Default)]
pub struct Meter {
    records: Arc<Mutex<Vec<FrameRecord>>>,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, frame: &Frame, upload: bool) {
        self.records.lock().expect("meter lock").push(FrameRecord {
            round: frame.round,
            client_id: frame.client_id,
            kind: frame.kind,
            bytes: frame.encoded_len(),
            upload,
        });
    }

    pub fn records(&self) -> Vec<FrameRecord> {
        self.records.lock().expect("meter lock").clone()
    }

    pub fn clear(&self) {
        self.records.lock().expect("meter lock").clear();
    }

    /// Per-round byte counts over protocol messages; session control frames
    /// are left out.
    pub fn by_round(&self) -> BTreeMap<u32, RoundTally> {
        let mut out = BTreeMap::<u32, RoundTally>::new();
        for r in self.records().iter().filter(|r| r.kind != MessageKind::RoundControl) {
            let t = out.entry(r.round).or_default();
            if r.upload {
                t.up += r.bytes;
            } else {
                t.down += r.bytes;
            }
            t.frames += 1;
        }
        out
    }

    pub fn round(&self, round: u32) -> RoundTally {
        self.by_round().remove(&round).unwrap_or_default()
    }

    pub fn by_kind(&self) -> BTreeMap<MessageKind, (usize, usize)> {
        let mut out = BTreeMap::new();
        for r in self.records() {
            let e = out.entry(r.kind).or_insert((0, 0));
            e.0 += 1;
            e.1 += r.bytes;
        }
        out
    }

    pub fn control_bytes(&self) -> usize {
        self.records().iter().filter(|r| r.kind == MessageKind::RoundControl).map(|r| r.bytes).sum()
    }
}

fn through_wire<T: Scalar>(env: &Envelope<T>, meter: &Meter, upload: bool) -> Result<Envelope<T>, TransportError> {
    let frame = encode_message(env);
    let bytes = encode_frame(&frame)?;
    meter.record(&frame, upload);
    let (back, _) = decode_frame(&bytes)?;
    decode_message(&back)
}

/// In-process link that serialises every message in both directions, so the
/// client sees exactly what it would receive over a socket.
pub struct LoopbackLink<T: Scalar> {
    pub node: ClientNode<T>,
    meter: Meter,
}

impl<T: Scalar> LoopbackLink<T> {
    pub fn new(node: ClientNode<T>, meter: Meter) -> Self {
        LoopbackLink { node, meter }
    }

    pub fn meter(&self) -> &Meter {
        &self.meter
    }

    fn deliver(&mut self, env: Envelope<T>) -> Result<Option<Envelope<T>>, TransportError> {
        let received = through_wire(&env, &self.meter, false)?;
        match self.node.handle(received)? {
            Some(reply) => Ok(Some(through_wire(&reply, &self.meter, true)?)),
            None => Ok(None),
        }
    }
}

impl<T: Scalar> ClientLink<T> for LoopbackLink<T> {
    fn client_id(&self) -> u32 {
        self.node.client_id()
    }

    fn request(&mut self, env: Envelope<T>) -> Result<Envelope<T>, ProtocolError> {
        let id = self.client_id();
        self.deliver(env)
            .map_err(|e| e.into_protocol(id))?
            .ok_or(ProtocolError::Link { client: id, msg: "client sent no reply".into() })
    }

    fn notify(&mut self, env: Envelope<T>) -> Result<(), ProtocolError> {
        let id = self.client_id();
        match self.deliver(env).map_err(|e| e.into_protocol(id))? {
            None => Ok(()),
            Some(r) => Err(ProtocolError::Link { client: id, msg: format!("unexpected reply {}", r.message.kind()) }),
        }
    }
}

/// Server side of one client's TCP connection.
pub struct TcpLink<T: Scalar> {
    id: u32,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    meter: Meter,
    _scalar: PhantomData<T>,
}

impl<T: Scalar> TcpLink<T> {
    fn send(&mut self, env: &Envelope<T>) -> Result<(), TransportError> {
        let frame = encode_message(env);
        write_frame(&mut self.writer, &frame)?;
        self.meter.record(&frame, false);
        Ok(())
    }

    fn receive(&mut self) -> Result<Envelope<T>, TransportError> {
        let frame = read_frame(&mut self.reader)?
            .ok_or_else(|| TransportError::Io(format!("client {} closed the connection", self.id)))?;
        self.meter.record(&frame, true);
        decode_message(&frame)
    }
}

impl<T: Scalar> ClientLink<T> for TcpLink<T> {
    fn client_id(&self) -> u32 {
        self.id
    }

    fn request(&mut self, env: Envelope<T>) -> Result<Envelope<T>, ProtocolError> {
        let id = self.id;
        self.send(&env).and_then(|_| self.receive()).map_err(|e| e.into_protocol(id))
    }

    fn notify(&mut self, env: Envelope<T>) -> Result<(), ProtocolError> {
        let id = self.id;
        self.send(&env).map_err(|e| e.into_protocol(id))
    }
}

/// Listening socket that turns incoming connections into links.
pub struct TcpServer {
    listener: TcpListener,
}

impl TcpServer {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> Result<Self, TransportError> {
        Ok(TcpServer { listener: TcpListener::bind(addr)? })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }

    /// Waits for `n` clients, each of which must open with a join frame, and
    /// returns their links sorted by client id.
    pub fn accept<T: Scalar>(&self, n: usize, meter: &Meter) -> Result<Vec<TcpLink<T>>, TransportError> {
        let mut links = Vec::with_capacity(n);
        while links.len() < n {
            let (stream, _) = self.listener.accept()?;
            stream.set_nodelay(true)?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let frame = read_frame(&mut reader)?.ok_or_else(|| TransportError::Io("connection closed before join".into()))?;
            meter.record(&frame, true);
            let env: Envelope<T> = decode_message(&frame)?;
            if env.message != Message::Control(Control::Join) {
                return Err(TransportError::Payload { kind: frame.kind, msg: "expected a join frame".into() });
            }
            if links.iter().any(|l: &TcpLink<T>| l.id == env.client_id) {
                return Err(TransportError::Io(format!("client id {} joined twice", env.client_id)));
            }
            links.push(TcpLink {
                id: env.client_id,
                reader,
                writer: BufWriter::new(stream),
                meter: meter.clone(),
                _scalar: PhantomData,
            });
        }
        links.sort_by_key(|l| l.id);
        Ok(links)
    }
}

/// Connects to a server, retrying for up to `attempts` times 50 ms.
pub fn connect_client<A: ToSocketAddrs + Clone>(addr: A, attempts: usize) -> Result<TcpStream, TransportError> {
    let mut last = None;
    for _ in 0..attempts.max(1) {
        match TcpStream::connect(addr.clone()) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => {
                last = Some(e);
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// Client event loop: joins, then answers server frames until the server
/// closes the connection. Returns the node so its final state can be read.
pub fn run_client<T: Scalar>(stream: TcpStream, mut node: ClientNode<T>) -> Result<ClientNode<T>, TransportError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let join: Envelope<T> = Envelope::new(0, node.client_id(), Message::Control(Control::Join));
    write_frame(&mut writer, &encode_message(&join))?;
    while let Some(frame) = read_frame(&mut reader)? {
        let env = decode_message::<T>(&frame)?;
        if let Some(reply) = node.handle(env)? {
            write_frame(&mut writer, &encode_message(&reply))?;
        }
    }
    writer.flush()?;
    Ok(node)
}

/// Accepts `n` clients on `server`, runs `driver` over their links, then
/// closes every connection.
pub fn run_server<T: Scalar, Out>(
    server: &TcpServer,
    n: usize,
    meter: &Meter,
    driver: impl FnOnce(&mut [TcpLink<T>]) -> Result<Out, ProtocolError>,
) -> Result<Out, TransportError> {
    let mut links = server.accept::<T>(n, meter)?;
    let out = driver(&mut links);
    for link in &links {
        let _ = link.writer.get_ref().shutdown(std::net::Shutdown::Both);
    }
    Ok(out?)
}
