//! One client connection: nonblocking socket plus in and out buffers.

use std::collections::HashSet;
use std::io::{self, Read, Write};
use std::net::TcpStream;

use mcaslite_core::protocol::{message_extent, parse_message, write_message, Message, Opcode, Response, WireError};

/// Bytes read from one session per loop pass, so a bulk upload cannot
/// starve the other sessions.
const READ_BUDGET: usize = 1 << 20;
/// Stop taking requests from a session whose responses are not draining.
pub const OUT_LIMIT: usize = 8 << 20;

pub struct Session {
    pub id: u64,
    stream: TcpStream,
    inbuf: Vec<u8>,
    in_pos: usize,
    out: Vec<u8>,
    out_pos: usize,
    /// Pools this session opened.
    pub pools: HashSet<u64>,
    /// Waiting on ADO work; later requests stay queued behind it.
    pub parked: bool,
    /// Close once the output drains.
    pub closing: bool,
    pub dead: bool,
    last_request: Option<u64>,
}

impl Session {
    pub fn new(id: u64, stream: TcpStream) -> io::Result<Self> {
        stream.set_nonblocking(true)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            id,
            stream,
            inbuf: Vec::new(),
            in_pos: 0,
            out: Vec::new(),
            out_pos: 0,
            pools: HashSet::new(),
            parked: false,
            closing: false,
            dead: false,
            last_request: None,
        })
    }

    /// Read what the socket has, up to the budget. Returns whether any
    /// bytes arrived.
    pub fn fill(&mut self) -> bool {
        if self.dead || self.closing {
            return false;
        }
        if self.in_pos > 0 && (self.in_pos == self.inbuf.len() || self.in_pos > (1 << 16)) {
            self.inbuf.drain(..self.in_pos);
            self.in_pos = 0;
        }
        let mut got = 0;
        let mut chunk = [0u8; 64 * 1024];
        while got < READ_BUDGET {
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    self.dead = true;
                    break;
                }
                Ok(n) => {
                    self.inbuf.extend_from_slice(&chunk[..n]);
                    got += n;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => {
                    self.dead = true;
                    break;
                }
            }
        }
        got > 0
    }

    /// Next complete request, if buffered. Request ids must increase.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        let buf = &self.inbuf[self.in_pos..];
        let Some(n) = message_extent(buf)? else { return Ok(None) };
        let (m, used) = parse_message(&buf[..n])?;
        debug_assert_eq!(used, n);
        self.in_pos += n;
        if self.last_request.is_some_and(|last| m.request_id <= last) {
            return Err(WireError::Protocol(mcaslite_core::codec::ProtocolError(format!(
                "request id {} does not increase",
                m.request_id
            ))));
        }
        self.last_request = Some(m.request_id);
        Ok(Some(m))
    }

    pub fn respond(&mut self, request_id: u64, r: &Response) {
        self.send_parts(request_id, &[&r.encode_body()]);
    }

    pub fn send_parts(&mut self, request_id: u64, parts: &[&[u8]]) {
        if self.dead {
            return;
        }
        write_message(&mut self.out, Opcode::Response, request_id, parts).expect("vec write");
    }

    pub fn backlog(&self) -> usize {
        self.out.len() - self.out_pos
    }

    /// Write pending output. Returns whether any bytes left.
    pub fn flush(&mut self) -> bool {
        let mut wrote = false;
        while self.out_pos < self.out.len() && !self.dead {
            match self.stream.write(&self.out[self.out_pos..]) {
                Ok(0) => self.dead = true,
                Ok(n) => {
                    self.out_pos += n;
                    wrote = true;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => self.dead = true,
            }
        }
        if self.out_pos == self.out.len() {
            self.out.clear();
            self.out_pos = 0;
            if self.closing {
                self.dead = true;
            }
        } else if self.out_pos > (1 << 20) {
            self.out.drain(..self.out_pos);
            self.out_pos = 0;
        }
        wrote
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}
