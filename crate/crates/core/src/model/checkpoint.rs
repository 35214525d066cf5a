//! Model checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic          4 bytes  "FSTM"
//! version        u32      = 1
//! adapter_mode   u32      0 = no adapter, 1 = identity activation, 2 = tanh
//! 6 tensors in order adapter.W, adapter.b, head.W1, head.b1, head.W2, head.b2:
//!   rank         u32
//!   dims         rank × u64
//!   data         Π dims × f64, row-major
//! ```
//!
//! A disabled adapter is written as tensors of shape `[0, 0]` and `[0]`.

use std::io::{Read, Write};

use super::{Activation, Adapter, Head, ModelParams, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSTM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &ModelParams, mut out: impl Write) -> Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let mode: u32 = match &params.adapter {
        None => 0,
        Some(a) if a.activation == Activation::Identity => 1,
        Some(_) => 2,
    };
    out.write_all(&mode.to_le_bytes())?;

    let empty_w = Matrix::zeros(0, 0);
    let (aw, ab): (&Matrix, &[f64]) = match &params.adapter {
        Some(a) => (&a.weight, &a.bias),
        None => (&empty_w, &[]),
    };
    write_matrix(&mut out, aw)?;
    write_vector(&mut out, ab)?;
    write_matrix(&mut out, &params.head.w1)?;
    write_vector(&mut out, &params.head.b1)?;
    write_matrix(&mut out, &params.head.w2)?;
    write_vector(&mut out, &params.head.b2)?;
    Ok(())
}

fn write_matrix(out: &mut impl Write, m: &Matrix) -> Result<()> {
    out.write_all(&2u32.to_le_bytes())?;
    out.write_all(&(m.rows() as u64).to_le_bytes())?;
    out.write_all(&(m.cols() as u64).to_le_bytes())?;
    write_f64s(out, m.as_slice())
}

fn write_vector(out: &mut impl Write, v: &[f64]) -> Result<()> {
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(v.len() as u64).to_le_bytes())?;
    write_f64s(out, v)
}

fn write_f64s(out: &mut impl Write, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(n);
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(Error::Truncated {
                offset: self.offset + got as u64,
                missing: (n - got) as u64,
            });
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, name: &str, rank: u32) -> Result<(Vec<usize>, Vec<f64>)> {
        let at = self.offset;
        let got = self.u32()?;
        if got != rank {
            return Err(Error::Format {
                offset: at,
                message: format!("{name}: expected rank {rank}, found {got}"),
            });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(self.u64()? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format {
                offset: at,
                message: format!("{name}: shape {dims:?} overflows"),
            })?;
        let data_at = self.offset;
        let raw = self.bytes(len.checked_mul(8).ok_or_else(|| Error::Format {
            offset: at,
            message: format!("{name}: shape {dims:?} overflows"),
        })?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: data_at + 8 * p as u64,
                message: format!("{name}: non-finite value"),
            });
        }
        Ok((dims, data))
    }
}

pub fn read_checkpoint(input: impl Read) -> Result<ModelParams> {
    let mut c = Cursor {
        inner: input,
        offset: 0,
    };
    let magic = c.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected \"FSTM\""),
        });
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let mode = c.u32()?;
    let activation = match mode {
        0 => None,
        1 => Some(Activation::Identity),
        2 => Some(Activation::Tanh),
        other => {
            return Err(Error::Format {
                offset: 8,
                message: format!("unknown adapter mode {other}"),
            })
        }
    };

    let mut mats = Vec::with_capacity(6);
    for (i, name) in TENSOR_NAMES.iter().enumerate() {
        let rank = if i % 2 == 0 { 2 } else { 1 };
        mats.push(c.tensor(name, rank)?);
    }
    let mut it = mats.into_iter();
    let mut next_matrix = || {
        let (dims, data) = it.next().unwrap();
        (dims, data)
    };
    let (aw_dims, aw) = next_matrix();
    let (_, ab) = next_matrix();
    let (w1_dims, w1) = next_matrix();
    let (_, b1) = next_matrix();
    let (w2_dims, w2) = next_matrix();
    let (_, b2) = next_matrix();

    let shape_err = |msg: String| Error::Format {
        offset: c.offset,
        message: msg,
    };
    let (d, h, k) = (w1_dims[0], w1_dims[1], w2_dims[1]);
    if w2_dims[0] != h || b1.len() != h || b2.len() != k {
        return Err(shape_err(format!(
            "inconsistent head shapes W1={w1_dims:?} b1={} W2={w2_dims:?} b2={}",
            b1.len(),
            b2.len()
        )));
    }
    let adapter = match activation {
        None => {
            if !aw.is_empty() || !ab.is_empty() {
                return Err(shape_err("adapter tensors present but adapter mode is 0".into()));
            }
            None
        }
        Some(activation) => {
            if aw_dims != [d, d] || ab.len() != d {
                return Err(shape_err(format!("adapter shape {aw_dims:?} does not match D={d}")));
            }
            Some(Adapter {
                weight: Matrix::from_vec_unchecked(d, d, aw),
                bias: ab,
                activation,
            })
        }
    };
    Ok(ModelParams {
        adapter,
        head: Head {
            w1: Matrix::from_vec_unchecked(d, h, w1),
            b1,
            w2: Matrix::from_vec_unchecked(h, k, w2),
            b2,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;

    fn model(adapter: bool, activation: Activation) -> ModelParams {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dim: Some(4),
            clusters: 2,
            adapter,
            activation,
        };
        ModelParams::init(&cfg, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn round_trips() {
        for (adapter, act) in [
            (true, Activation::Identity),
            (true, Activation::Tanh),
            (false, Activation::Identity),
        ] {
            let p = model(adapter, act);
            let mut buf = Vec::new();
            write_checkpoint(&p, &mut buf).unwrap();
            assert_eq!(&buf[..4], b"FSTM");
            assert_eq!(read_checkpoint(&buf[..]).unwrap(), p);
        }
    }

    #[test]
    fn truncated_reports_missing_bytes() {
        let mut buf = Vec::new();
        write_checkpoint(&model(true, Activation::Identity), &mut buf).unwrap();
        let cut = buf.len() - 5;
        match read_checkpoint(&buf[..cut]) {
            Err(Error::Truncated { offset, missing }) => {
                assert_eq!(missing, 5);
                assert_eq!(offset, cut as u64);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            read_checkpoint(&b"FSTCxxxxxxxx"[..]),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
