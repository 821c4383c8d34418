//! Little-endian length-prefixed field encoding shared by the wire
//! protocol, the plugin queue messages and the personalities.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolError(pub String);

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "protocol error: {}", self.0)
    }
}

impl std::error::Error for ProtocolError {}

pub fn perr<T>(msg: impl Into<String>) -> Result<T, ProtocolError> {
    Err(ProtocolError(msg.into()))
}

#[derive(Default)]
pub struct Enc(pub Vec<u8>);

impl Enc {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn key(&mut self, k: &[u8]) -> &mut Self {
        self.u32(k.len() as u32);
        self.0.extend_from_slice(k);
        self
    }
    pub fn string(&mut self, s: &str) -> &mut Self {
        self.key(s.as_bytes())
    }
    pub fn value(&mut self, v: &[u8]) -> &mut Self {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
        self
    }
}

pub struct Dec<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Dec<'a> {
    pub fn new(b: &'a [u8]) -> Self {
        Self { b, at: 0 }
    }
    pub fn take(&mut self, n: u64) -> Result<&'a [u8], ProtocolError> {
        let left = (self.b.len() - self.at) as u64;
        if n > left {
            return perr(format!("truncated: need {n} bytes, {left} left"));
        }
        let s = &self.b[self.at..self.at + n as usize];
        self.at += n as usize;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    pub fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    pub fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    pub fn bytes32(&mut self) -> Result<Vec<u8>, ProtocolError> {
        let n = self.u32()?;
        Ok(self.take(n as u64)?.to_vec())
    }
    pub fn key(&mut self) -> Result<Vec<u8>, ProtocolError> {
        let k = self.bytes32()?;
        if k.is_empty() {
            return perr("empty key");
        }
        Ok(k)
    }
    pub fn string(&mut self) -> Result<String, ProtocolError> {
        String::from_utf8(self.bytes32()?).or_else(|_| perr("string is not UTF-8"))
    }
    pub fn value(&mut self) -> Result<Vec<u8>, ProtocolError> {
        let n = self.u64()?;
        Ok(self.take(n)?.to_vec())
    }
    pub fn finish(&self) -> Result<(), ProtocolError> {
        match self.b.len() - self.at {
            0 => Ok(()),
            n => perr(format!("{n} trailing bytes")),
        }
    }
}


impl Enc {
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.extend_from_slice(b);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }
}

impl<'a> Dec<'a> {
    pub fn bool(&mut self) -> Result<bool, ProtocolError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => perr(format!("bad bool {v}")),
        }
    }

    pub fn remaining(&self) -> usize {
        self.b.len() - self.at
    }
}
