//! `.tgrd` token-grid files.
//!
//! Layout, little endian throughout:
//!
//! ```text
//! magic    4 bytes  "TGRD"
//! version  u32      1
//! frames   u32
//! tokens   u32
//! dim      u32
//! dtype    u8       1 = f64
//! labelled u8       0 or 1
//! label    u32      present only when labelled = 1
//! payload  frames * tokens * dim f64 values, frame-major
//! ```

use std::fs;
use std::path::Path;

use crate::encoders::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TGRD";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridHeader {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub label: Option<usize>,
}

impl GridHeader {
    pub fn header_len(&self) -> usize {
        4 + 4 + 12 + 2 + if self.label.is_some() { 4 } else { 0 }
    }

    pub fn payload_len(&self) -> usize {
        self.frames * self.tokens * self.dim * 8
    }
}

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        field,
        detail: detail.into(),
    }
}

fn to_u32(field: &'static str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| fmt_err(field, format!("{v} does not fit in u32")))
}

pub fn encode_grid(grid: &TokenGrid, label: Option<usize>) -> Result<Vec<u8>> {
    let header = GridHeader {
        frames: grid.frames(),
        tokens: grid.tokens_per_frame(),
        dim: grid.dim(),
        label,
    };
    let mut out = Vec::with_capacity(header.header_len() + header.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32("frames", header.frames)?.to_le_bytes());
    out.extend_from_slice(&to_u32("tokens", header.tokens)?.to_le_bytes());
    out.extend_from_slice(&to_u32("dim", header.dim)?.to_le_bytes());
    out.push(DTYPE_F64);
    match label {
        Some(l) => {
            out.push(1);
            out.extend_from_slice(&to_u32("label", l)?.to_le_bytes());
        }
        None => out.push(0),
    }
    for v in grid.tensor().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, field: &'static str, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(fmt_err(
                field,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(field, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(field, 1)?[0])
    }
}

/// Parses only the header; the payload is not touched.
pub fn decode_header(bytes: &[u8]) -> Result<GridHeader> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take("magic", 4)?;
    if magic != MAGIC {
        return Err(fmt_err("magic", format!("expected \"TGRD\", found {magic:?}")));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(fmt_err("version", format!("unsupported version {version}")));
    }
    let frames = c.u32("frames")? as usize;
    let tokens = c.u32("tokens")? as usize;
    let dim = c.u32("dim")? as usize;
    for (field, v) in [("frames", frames), ("tokens", tokens), ("dim", dim)] {
        if v == 0 {
            return Err(fmt_err(field, "must be positive"));
        }
    }
    let dtype = c.u8("dtype")?;
    if dtype != DTYPE_F64 {
        return Err(fmt_err("dtype", format!("unsupported dtype code {dtype}")));
    }
    let label = match c.u8("labelled")? {
        0 => None,
        1 => Some(c.u32("label")? as usize),
        other => return Err(fmt_err("labelled", format!("flag must be 0 or 1, found {other}"))),
    };
    Ok(GridHeader {
        frames,
        tokens,
        dim,
        label,
    })
}

pub fn decode_grid(bytes: &[u8]) -> Result<(TokenGrid, Option<usize>)> {
    let header = decode_header(bytes)?;
    let start = header.header_len();
    let need = frames_checked(&header)?;
    let have = bytes.len() - start;
    if have != need {
        let kind = if have < need { "truncated" } else { "trailing bytes" };
        return Err(fmt_err(
            "payload",
            format!("{kind}: header declares {need} bytes, found {have}"),
        ));
    }
    let data = bytes[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let tensor = Tensor::new([header.frames, header.tokens, header.dim], data)?;
    Ok((TokenGrid::new(tensor)?, header.label))
}

fn frames_checked(h: &GridHeader) -> Result<usize> {
    h.frames
        .checked_mul(h.tokens)
        .and_then(|x| x.checked_mul(h.dim))
        .and_then(|x| x.checked_mul(8))
        .ok_or_else(|| fmt_err("dim", "payload size overflows"))
}

pub fn save_grid(path: impl AsRef<Path>, grid: &TokenGrid, label: Option<usize>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_grid(grid, label)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<(TokenGrid, Option<usize>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_payload_size() {
        let h = GridHeader {
            frames: 8,
            tokens: 16,
            dim: 64,
            label: None,
        };
        assert_eq!(h.payload_len(), 65536);
    }

    #[test]
    fn bad_magic_names_field() {
        let err = decode_grid(b"TGRX\x01\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { field: "magic", .. }));
    }
}
