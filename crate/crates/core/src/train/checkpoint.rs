//! Checkpoint file.
//!
//! Little-endian layout:
//!
//! ```text
//! "CLCK"                          magic, 4 bytes
//! u32 version                     = 1
//! str config                      `key = value` text of the run config
//! u64 config_hash                 FNV-1a 64 of the config text
//! u32 in_channels, u32 num_classes
//! u64 epoch                       completed epochs
//! u64 adam_t                      applied optimizer steps
//! u64 rng_seed, u64 rng_stream, u128 rng_word_pos
//!                                 stream for the next epoch
//! f64 best_val_oa, u64 best_epoch
//! str metrics_log                 CSV text of the log so far
//! u32 entry_count, entries        each: str name, u8 kind (0 parameter,
//!                                 1 first moment, 2 second moment),
//!                                 u64 offset, u64 length, u32 ndim,
//!                                 u32 dims[ndim]
//! blobs                           concatenated TDS files with float32
//!                                 payloads; offsets count from the first
//!                                 blob byte
//! u64 checksum                    FNV-1a 64 over every preceding byte
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use clear_tensor::{ParamStore, RngState, Tensor};

use crate::data::tds::{fnv1a64, put_str, Cursor, Payload, TdsRecord};
use crate::error::{CoreError, Result};
use crate::train::adam::AdamState;
use crate::train::config::TrainConfig;
use crate::train::log::MetricsLog;

pub const CKPT_MAGIC: &[u8; 4] = b"CLCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub in_channels: usize,
    pub num_classes: usize,
    pub epoch: usize,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub rng: RngState,
    /// `-inf` before any validation.
    pub best_val_oa: f64,
    pub best_epoch: usize,
    pub log: MetricsLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: u8,
    pub offset: u64,
    pub len: u64,
    pub dims: Vec<usize>,
}

fn blob(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    TdsRecord {
        dims: dims.to_vec(),
        payload: Payload::F32(data.to_vec()),
        labels: Vec::new(),
        names: Vec::new(),
        meta: Vec::new(),
    }
    .encode()
}

impl Checkpoint {
    fn blobs(&self) -> Result<(Vec<ManifestEntry>, Vec<u8>)> {
        let mut entries = Vec::new();
        let mut blobs = Vec::new();
        for (i, (_, name, t)) in self.params.iter().enumerate() {
            for (kind, data) in [(0u8, t.data()), (1, &self.adam.m[i][..]), (2, &self.adam.v[i][..])] {
                let b = blob(t.dims(), data)?;
                entries.push(ManifestEntry {
                    name: name.to_string(),
                    kind,
                    offset: blobs.len() as u64,
                    len: b.len() as u64,
                    dims: t.dims().to_vec(),
                });
                blobs.extend_from_slice(&b);
            }
        }
        Ok((entries, blobs))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let text = self.config.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_str(&mut out, &text);
        out.extend_from_slice(&fnv1a64(text.as_bytes()).to_le_bytes());
        out.extend_from_slice(&(self.in_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.best_val_oa.to_le_bytes());
        out.extend_from_slice(&(self.best_epoch as u64).to_le_bytes());
        put_str(&mut out, &self.log.to_csv());

        let (entries, blobs) = self.blobs()?;
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in &entries {
            put_str(&mut out, &e.name);
            out.push(e.kind);
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.len.to_le_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            e.dims.iter().for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
        }
        out.extend_from_slice(&blobs);
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(CoreError::format(0, "bad magic, expected \"CLCK\""));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(CoreError::format(4, format!("unsupported checkpoint version {version}")));
        }
        if bytes.len() < r.pos + 8 {
            return Err(CoreError::format(bytes.len() as u64, "truncated: no room for checksum"));
        }
        r.end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[r.end..].try_into().unwrap());
        let actual = fnv1a64(&bytes[..r.end]);
        if stored != actual {
            return Err(CoreError::format(
                r.end as u64,
                format!("checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"),
            ));
        }
        let text_at = r.pos;
        let text = r.string("config")?;
        let hash = r.u64("config hash")?;
        if hash != fnv1a64(text.as_bytes()) {
            return Err(CoreError::format(text_at as u64, "config hash does not match config text"));
        }
        let config = TrainConfig::from_text(&text)?;
        let in_channels = r.u32("in_channels")? as usize;
        let num_classes = r.u32("num_classes")? as usize;
        let epoch = r.u64("epoch")? as usize;
        let t = r.u64("adam t")?;
        let rng = RngState {
            seed: r.u64("rng seed")?,
            stream: r.u64("rng stream")?,
            word_pos: r.u128("rng position")?,
        };
        let best_val_oa = r.f64("best val oa")?;
        let best_epoch = r.u64("best epoch")? as usize;
        let log = MetricsLog::from_csv(&r.string("metrics log")?)?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("entry name")?;
            let kind = r.u8("entry kind")?;
            let offset = r.u64("entry offset")?;
            let len = r.u64("entry length")?;
            let ndim = r.u32("entry ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                dims.push(r.u32("entry dims")? as usize);
            }
            entries.push(ManifestEntry {
                name,
                kind,
                offset,
                len,
                dims,
            });
        }
        let base = r.pos;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &entries {
            let start = (base as u64).checked_add(e.offset).filter(|&s| s <= r.end as u64);
            let stop = start.and_then(|s| s.checked_add(e.len)).filter(|&s| s <= r.end as u64);
            let (Some(start), Some(stop)) = (start, stop) else {
                return Err(CoreError::format(base as u64, format!("blob of `{}` lies outside the file", e.name)));
            };
            let rec = TdsRecord::decode(&bytes[start as usize..stop as usize]).map_err(|err| match err {
                CoreError::Format { offset, detail } => {
                    CoreError::format(start + offset, format!("blob of `{}`: {detail}", e.name))
                }
                other => other,
            })?;
            let Payload::F32(data) = rec.payload else {
                return Err(CoreError::format(start, format!("blob of `{}` is not float32", e.name)));
            };
            if rec.dims != e.dims {
                return Err(CoreError::format(start, format!("blob of `{}` has dims {:?}, manifest {:?}", e.name, rec.dims, e.dims)));
            }
            match e.kind {
                0 => {
                    params.add(e.name.clone(), Tensor::new(&e.dims, data)?)?;
                }
                1 => m.push(data),
                2 => v.push(data),
                k => return Err(CoreError::format(start, format!("unknown entry kind {k}"))),
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(CoreError::format(base as u64, "optimizer moments do not match the parameters"));
        }
        Ok(Checkpoint {
            config,
            in_channels,
            num_classes,
            epoch,
            params,
            adam: AdamState { t, m, v },
            rng,
            best_val_oa,
            best_epoch,
            log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Manifest entries in file order.
    pub fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        Ok(self.blobs()?.0)
    }
}
