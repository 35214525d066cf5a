//! Protocol records exchanged between clients and the server.
//!
//! Center message (client to server), little-endian:
//!
//! ```text
//! client_id  u32
//! round      u32
//! centers    K×D f64, row-major
//! counts     K u64
//! ```
//!
//! Global centers (server to clients) use `round u32` followed by `K×D f64`.
//! Neither record carries its shape; both sides know `K` and `D` from the
//! run configuration. Final parameters travel as model checkpoints.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CenterMessage {
    pub client_id: u32,
    pub round: u32,
    pub centers: Matrix,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCenters {
    pub c: Matrix,
    pub round: u32,
}

impl CenterMessage {
    pub fn encoded_len(k: usize, d: usize) -> usize {
        8 + 8 * k * d + 8 * k
    }

    pub fn encode(&self) -> Vec<u8> {
        let (k, d) = self.centers.shape();
        let mut out = Vec::with_capacity(Self::encoded_len(k, d));
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        for v in self.centers.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], k: usize, d: usize) -> Result<Self> {
        let mut r = Reader::new(bytes, Self::encoded_len(k, d))?;
        let client_id = r.u32();
        let round = r.u32();
        let centers = Matrix::from_vec(k, d, (0..k * d).map(|_| r.f64()).collect()).map_err(|_| Error::Format {
            offset: 8,
            message: "non-finite center value".into(),
        })?;
        let counts = (0..k).map(|_| r.u64()).collect();
        Ok(Self {
            client_id,
            round,
            centers,
            counts,
        })
    }
}

impl GlobalCenters {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.c.as_slice().len());
        out.extend_from_slice(&self.round.to_le_bytes());
        for v in self.c.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], k: usize, d: usize) -> Result<Self> {
        let mut r = Reader::new(bytes, 4 + 8 * k * d)?;
        let round = r.u32();
        let c = Matrix::from_vec(k, d, (0..k * d).map(|_| r.f64()).collect()).map_err(|_| Error::Format {
            offset: 4,
            message: "non-finite center value".into(),
        })?;
        Ok(Self { c, round })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], expected: usize) -> Result<Self> {
        if bytes.len() < expected {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
                missing: (expected - bytes.len()) as u64,
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format {
                offset: expected as u64,
                message: format!("{} trailing bytes", bytes.len() - expected),
            });
        }
        Ok(Self { bytes, pos: 0 })
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}
