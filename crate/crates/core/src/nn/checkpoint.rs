//! Little-endian binary container for network parameters, optimizer state
//! and other float arrays.
//!
//! Layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "PFGENCKP"
//! 8       4     format version (u32)
//! 12      4     record count (u32)
//! 16      ...   records
//! ```
//!
//! Each record is a 4-byte ASCII tag, a u64 payload length and the payload.
//! Network records (`MLP `) hold the spec echo as four u32 values
//! (input dim, hidden layers, hidden width, output dim), a u64 parameter count
//! and the raw f64 parameters. Adam records (`ADAM`) hold lr, beta1, beta2,
//! eps (f64), the step counter (u64), a u64 length and the `m` then `v`
//! arrays. Array records (`F64A`) are a u64 count followed by raw f64 values,
//! and text records (`JSON`) are UTF-8.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{AdamConfig, AdamState, MlpSpec, ParamStore};

pub const MAGIC: [u8; 8] = *b"PFGENCKP";
pub const VERSION: u32 = 1;

pub type Tag = [u8; 4];

pub const TAG_MLP: Tag = *b"MLP ";
pub const TAG_ADAM: Tag = *b"ADAM";
pub const TAG_F64: Tag = *b"F64A";
pub const TAG_JSON: Tag = *b"JSON";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated input at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed record at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("missing record {0:?}")]
    Missing(String),
}

/// Ordered list of tagged records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<(Tag, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> impl Iterator<Item = (&Tag, &[u8])> {
        self.records.iter().map(|(t, p)| (t, p.as_slice()))
    }

    pub fn push_raw(&mut self, tag: Tag, payload: Vec<u8>) {
        self.records.push((tag, payload));
    }

    pub fn push_mlp(&mut self, params: &ParamStore) {
        let s = params.spec();
        let mut w = Vec::with_capacity(24 + 8 * params.len());
        for v in [s.input_dim, s.hidden_layers, s.hidden_width, s.output_dim] {
            w.extend_from_slice(&(v as u32).to_le_bytes());
        }
        put_f64s(&mut w, params.as_slice());
        self.records.push((TAG_MLP, w));
    }

    pub fn push_adam(&mut self, state: &AdamState) {
        let mut w = Vec::with_capacity(48 + 16 * state.m.len());
        let c = &state.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&state.t.to_le_bytes());
        w.extend_from_slice(&(state.m.len() as u64).to_le_bytes());
        for v in state.m.iter().chain(&state.v) {
            w.extend_from_slice(&v.to_le_bytes());
        }
        self.records.push((TAG_ADAM, w));
    }

    pub fn push_f64s(&mut self, values: &[f64]) {
        let mut w = Vec::with_capacity(8 + 8 * values.len());
        put_f64s(&mut w, values);
        self.records.push((TAG_F64, w));
    }

    pub fn push_json(&mut self, text: &str) {
        self.records.push((TAG_JSON, text.as_bytes().to_vec()));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (tag, payload) in &self.records {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes, 0);
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        r.take(MAGIC.len())?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let tag: Tag = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()? as usize;
            let payload = r.take(len)?.to_vec();
            records.push((tag, payload));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Payload and absolute file offset of the `nth` record carrying `tag`.
    fn find(&self, tag: Tag, nth: usize) -> Result<(&[u8], usize), CheckpointError> {
        let mut offset = 16;
        let mut seen = 0;
        for (t, p) in &self.records {
            offset += 12;
            if *t == tag {
                if seen == nth {
                    return Ok((p, offset));
                }
                seen += 1;
            }
            offset += p.len();
        }
        Err(CheckpointError::Missing(format!(
            "{} #{nth}",
            String::from_utf8_lossy(&tag)
        )))
    }

    pub fn mlp(&self, nth: usize) -> Result<ParamStore, CheckpointError> {
        let (p, base) = self.find(TAG_MLP, nth)?;
        let mut r = Reader::new(p, base);
        let spec = MlpSpec::new(
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        let at = r.offset();
        let theta = r.f64s()?;
        r.finish()?;
        ParamStore::from_vec(spec, theta).map_err(|e| CheckpointError::Malformed {
            offset: at,
            reason: e.to_string(),
        })
    }

    pub fn adam(&self, nth: usize) -> Result<AdamState, CheckpointError> {
        let (p, base) = self.find(TAG_ADAM, nth)?;
        let mut r = Reader::new(p, base);
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let t = r.u64()?;
        let len = r.u64()? as usize;
        let m = r.f64_array(len)?;
        let v = r.f64_array(len)?;
        r.finish()?;
        Ok(AdamState { config, m, v, t })
    }

    pub fn f64s(&self, nth: usize) -> Result<Vec<f64>, CheckpointError> {
        let (p, base) = self.find(TAG_F64, nth)?;
        let mut r = Reader::new(p, base);
        let v = r.f64s()?;
        r.finish()?;
        Ok(v)
    }

    pub fn json(&self, nth: usize) -> Result<String, CheckpointError> {
        let (p, base) = self.find(TAG_JSON, nth)?;
        String::from_utf8(p.to_vec()).map_err(|e| CheckpointError::Malformed {
            offset: base + e.utf8_error().valid_up_to(),
            reason: "invalid UTF-8".into(),
        })
    }
}

fn put_f64s(w: &mut Vec<u8>, values: &[f64]) {
    w.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

/// Bounds-checked cursor that reports absolute offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Self { bytes, pos: 0, base }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated {
                offset: self.offset(),
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_array(&mut self, len: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = len.checked_mul(8).ok_or_else(|| CheckpointError::Malformed {
            offset: self.offset(),
            reason: format!("array length {len} overflows"),
        })?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let len = self.u64()? as usize;
        self.f64_array(len)
    }

    fn finish(&self) -> Result<(), CheckpointError> {
        if self.pos != self.bytes.len() {
            return Err(CheckpointError::Malformed {
                offset: self.offset(),
                reason: format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Writes a single network with its optimizer state.
pub fn save_checkpoint(params: &ParamStore, state: &AdamState, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut c = Container::new();
    c.push_mlp(params);
    c.push_adam(state);
    c.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, AdamState), CheckpointError> {
    let c = Container::load(path)?;
    let params = c.mlp(0)?;
    let state = c.adam(0)?;
    if state.m.len() != params.len() {
        return Err(CheckpointError::Malformed {
            offset: 16,
            reason: format!(
                "optimizer state has {} entries for {} parameters",
                state.m.len(),
                params.len()
            ),
        });
    }
    Ok((params, state))
}
