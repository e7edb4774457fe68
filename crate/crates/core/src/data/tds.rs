//! TDS tensor-dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! "CLRT"                       magic, 4 bytes
//! u32 version                  = 1
//! u8  dtype                    1 = float32, 2 = uint8, 3 = int32
//! u32 ndim, u32 dims[ndim]
//! payload                      product(dims) elements, row-major
//! u32 label_count, i32 labels[label_count]
//! u16 name_count, names        each: u32 byte length + UTF-8
//! meta pairs                   each: key, value as u32 length + UTF-8,
//!                              repeated until the checksum
//! u64 checksum                 FNV-1a 64 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"CLRT";
pub const VERSION: u32 = 1;

/// Element buffer of a TDS payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl Payload {
    pub fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 1,
            Payload::U8(_) => 2,
            Payload::I32(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            Payload::F32(_) => "float32",
            Payload::U8(_) => "uint8",
            Payload::I32(_) => "int32",
        }
    }

    /// Element `i` widened to f32.
    pub fn get_f32(&self, i: usize) -> f32 {
        match self {
            Payload::F32(v) => v[i],
            Payload::U8(v) => v[i] as f32,
            Payload::I32(v) => v[i] as f32,
        }
    }
}

/// Decoded contents of a TDS file.
#[derive(Debug, Clone, PartialEq)]
pub struct TdsRecord {
    pub dims: Vec<usize>,
    pub payload: Payload,
    pub labels: Vec<i32>,
    pub names: Vec<String>,
    pub meta: Vec<(String, String)>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl TdsRecord {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let n: usize = self.dims.iter().product();
        if n != self.payload.len() {
            return Err(CoreError::input(format!(
                "dims {:?} hold {n} elements but payload has {}",
                self.dims,
                self.payload.len()
            )));
        }
        if self.names.len() > u16::MAX as usize {
            return Err(CoreError::input("too many class names for a u16 count"));
        }
        let mut out = Vec::with_capacity(64 + n * 4 + self.labels.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.payload.code());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| CoreError::input(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        self.labels.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out.extend_from_slice(&(self.names.len() as u16).to_le_bytes());
        self.names.iter().for_each(|s| put_str(&mut out, s));
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CoreError::format(0, format!("bad magic {magic:?}, expected \"CLRT\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CoreError::format(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        if bytes.len() < 8 + r.pos {
            return Err(CoreError::format(bytes.len() as u64, "truncated: no room for checksum"));
        }
        r.end = bytes.len() - 8;
        let code_at = r.pos;
        let code = r.take(1, "dtype")?[0];
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CoreError::format(r.pos as u64, format!("dims {dims:?} overflow")))?;
        let payload = match code {
            1 => Payload::F32(r.array(n, 4, "payload")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => Payload::U8(r.array(n, 1, "payload")?.to_vec()),
            3 => Payload::I32(r.array(n, 4, "payload")?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            other => return Err(CoreError::format(code_at as u64, format!("unknown dtype code {other}"))),
        };
        let n_labels = r.u32("label count")? as usize;
        let labels = r
            .array(n_labels, 4, "labels")?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let n_names = r.u16("name count")? as usize;
        let mut names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            names.push(r.string("class name")?);
        }
        let mut meta = Vec::new();
        while r.pos < r.end {
            let k = r.string("meta key")?;
            let v = r.string("meta value")?;
            meta.push((k, v));
        }
        let stored = u64::from_le_bytes(bytes[r.end..].try_into().unwrap());
        let actual = fnv1a64(&bytes[..r.end]);
        if stored != actual {
            return Err(CoreError::format(
                r.end as u64,
                format!("checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"),
            ));
        }
        Ok(TdsRecord {
            dims,
            payload,
            labels,
            names,
            meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub end: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor {
            bytes,
            pos: 0,
            end: bytes.len(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(stop) if stop <= self.end => {
                let s = &self.bytes[self.pos..stop];
                self.pos = stop;
                Ok(s)
            }
            _ => Err(CoreError::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.end.saturating_sub(self.pos)),
            )),
        }
    }

    pub fn array(&mut self, count: usize, width: usize, what: &str) -> Result<&'a [u8]> {
        let n = count
            .checked_mul(width)
            .ok_or_else(|| CoreError::format(self.pos as u64, format!("{what} size overflows")))?;
        self.take(n, what)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CoreError::format(at as u64, format!("{what} is not UTF-8")))
    }
}
