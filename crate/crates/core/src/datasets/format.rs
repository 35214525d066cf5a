//! On-disk dataset formats.
//!
//! Binary (little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "FSTC"
//! 4       4           u32 version = 1
//! 8       8           u64 n
//! 16      4           u32 d
//! 20      1           u8 has_labels (0 or 1)
//! 21      3           padding (zero)
//! 24      n·d·4       f32 embeddings, row-major
//! ...     n·4         i32 labels, present iff has_labels = 1
//! ```
//!
//! CSV (tiny fixtures only): first line `n,d`; then `n` rows of `d` values,
//! optionally followed by an integer label column on every row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DATASET_MAGIC: [u8; 4] = *b"FSTC";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Binary,
    Csv,
}

impl DatasetFormat {
    /// `.csv` files are CSV, everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Binary,
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let mut reader = BufReader::new(file);
    match format {
        DatasetFormat::Binary => read_binary(&mut reader, name),
        DatasetFormat::Csv => {
            let mut text = String::new();
            reader.read_to_string(&mut text)?;
            parse_csv(&text, name)
        }
    }
}

pub fn save_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut w = BufWriter::new(file);
    write_binary(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes the binary layout. Embeddings are narrowed to `f32`.
pub fn write_binary(ds: &EmbeddingDataset, out: &mut impl Write) -> Result<()> {
    let (n, d) = ds.x.shape();
    let d32 = u32::try_from(d).map_err(|_| Error::invalid("dimension does not fit in u32"))?;
    out.write_all(&DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&(n as u64).to_le_bytes())?;
    out.write_all(&d32.to_le_bytes())?;
    out.write_all(&[u8::from(ds.labels.is_some()), 0, 0, 0])?;
    let mut buf = Vec::with_capacity(n * d * 4);
    for &v in ds.x.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    if let Some(labels) = &ds.labels {
        let mut buf = Vec::with_capacity(n * 4);
        for &l in labels {
            let l = i32::try_from(l).map_err(|_| Error::invalid("label does not fit in i32"))?;
            buf.extend_from_slice(&l.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    offset: offset + filled as u64,
                    missing: (buf.len() - filled) as u64,
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_binary(r: &mut impl Read, source_name: String) -> Result<EmbeddingDataset> {
    let mut header = [0u8; HEADER_LEN as usize];
    read_exact_at(r, &mut header, 0)?;
    if header[..4] != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:02x?}, expected \"FSTC\"", &header[..4]),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let d = u32::from_le_bytes(header[16..20].try_into().unwrap()) as u64;
    let has_labels = match header[20] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                offset: 20,
                message: format!("has_labels must be 0 or 1, got {other}"),
            })
        }
    };
    let body = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .filter(|&v| usize::try_from(v).is_ok())
        .ok_or_else(|| Error::Format {
            offset: 8,
            message: format!("n={n}, d={d} is too large"),
        })?;

    let mut raw = vec![0u8; body as usize];
    read_exact_at(r, &mut raw, HEADER_LEN)?;
    let mut data = Vec::with_capacity((n * d) as usize);
    for (idx, c) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format {
                offset: HEADER_LEN + 4 * idx as u64,
                message: "non-finite embedding value".into(),
            });
        }
        data.push(v as f64);
    }

    let labels = if has_labels {
        let at = HEADER_LEN + body;
        let mut raw = vec![0u8; (n * 4) as usize];
        read_exact_at(r, &mut raw, at)?;
        let mut labels = Vec::with_capacity(n as usize);
        for (idx, c) in raw.chunks_exact(4).enumerate() {
            let l = i32::from_le_bytes(c.try_into().unwrap());
            if l < 0 {
                return Err(Error::Format {
                    offset: at + 4 * idx as u64,
                    message: format!("negative label {l}"),
                });
            }
            labels.push(l as usize);
        }
        Some(labels)
    } else {
        None
    };

    let x = Matrix::from_vec_unchecked(n as usize, d as usize, data);
    Ok(EmbeddingDataset { x, labels, source_name })
}

pub fn parse_csv(text: &str, source_name: String) -> Result<EmbeddingDataset> {
    let fmt = |line: usize, message: String| Error::Format {
        offset: line as u64,
        message: format!("line {}: {message}", line + 1),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| fmt(0, "empty file".into()))?;
    let dims: Vec<&str> = header.split(',').map(str::trim).collect();
    if dims.len() != 2 {
        return Err(fmt(hl, format!("header must be `n,d`, got `{header}`")));
    }
    let n: usize = dims[0].parse().map_err(|_| fmt(hl, format!("bad n `{}`", dims[0])))?;
    let d: usize = dims[1].parse().map_err(|_| fmt(hl, format!("bad d `{}`", dims[1])))?;

    let mut data = Vec::with_capacity(n * d);
    let mut labels: Vec<usize> = Vec::new();
    let mut labeled = None;
    let mut rows = 0;
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let has_label = match fields.len() {
            len if len == d => false,
            len if len == d + 1 => true,
            len => return Err(fmt(ln, format!("expected {d} or {} fields, got {len}", d + 1))),
        };
        if *labeled.get_or_insert(has_label) != has_label {
            return Err(fmt(ln, "label column present on some rows only".into()));
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| fmt(ln, format!("bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(fmt(ln, format!("non-finite value `{f}`")));
            }
            data.push(v);
        }
        if has_label {
            labels.push(
                fields[d]
                    .parse()
                    .map_err(|_| fmt(ln, format!("bad label `{}`", fields[d])))?,
            );
        }
        rows += 1;
    }
    if rows != n {
        return Err(fmt(0, format!("header declares {n} rows, found {rows}")));
    }
    Ok(EmbeddingDataset {
        x: Matrix::from_vec_unchecked(n, d, data),
        labels: labeled.unwrap_or(false).then_some(labels),
        source_name,
    })
}
